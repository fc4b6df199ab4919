use tch::Kind;

use super::config::{DataConfig, DatasetKind, ModelType};
use super::train::TrainData;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::metrics::LabeledImages;
use crate::mnist::{load_mnist, make_mnist_pairs, Mnist};
use crate::seed::derive_seed;
use crate::synthgen::{read_split, Dataset, SynthConfig, SyntheticDatapoint};

/// Both splits of one dataset in memory.
pub struct ExperimentData {
    pub kind: DatasetKind,
    pub synth: SynthConfig,
    pub n_classes: usize,
    pub train: LabeledImages,
    pub test: LabeledImages,
    /// Synthetic records; empty for MNIST.
    pub train_points: Vec<SyntheticDatapoint>,
    pub test_points: Vec<SyntheticDatapoint>,
}

impl ExperimentData {
    pub fn load(cfg: &DataConfig) -> Result<ExperimentData> {
        match cfg.kind {
            DatasetKind::Synthetic => {
                let synth = match &cfg.synth_config {
                    Some(p) => SynthConfig::load(p)?,
                    None => SynthConfig::default(),
                };
                let ds = Dataset {
                    train: read_split(&cfg.dataset, "train")?,
                    test: read_split(&cfg.dataset, "test")?,
                };
                Ok(ExperimentData::from_synthetic(synth, ds))
            }
            DatasetKind::Mnist => Ok(ExperimentData::from_mnist(load_mnist(&cfg.dataset)?)),
        }
    }

    pub fn from_synthetic(synth: SynthConfig, ds: Dataset) -> ExperimentData {
        let n = synth.n_lines();
        ExperimentData {
            kind: DatasetKind::Synthetic,
            n_classes: synth.n_classes(),
            train: LabeledImages::from_synthetic(&ds.train, n),
            test: LabeledImages::from_synthetic(&ds.test, n),
            synth,
            train_points: ds.train,
            test_points: ds.test,
        }
    }

    pub fn from_mnist(m: Mnist) -> ExperimentData {
        let labeled = |s: crate::mnist::MnistSplit| LabeledImages {
            labels: s.labels.iter().map(|&l| l as usize).collect(),
            images: s.images,
            factors: None,
        };
        ExperimentData {
            kind: DatasetKind::Mnist,
            synth: SynthConfig::default(),
            n_classes: 10,
            train: labeled(m.train),
            test: labeled(m.test),
            train_points: Vec::new(),
            test_points: Vec::new(),
        }
    }

    /// Training tensors plus `n_pairs` supervision pairs for `model`. On
    /// MNIST only DVAE, ADA-GVAE (positive line-augmentation pairs) and
    /// VAE-CE can be trained.
    pub fn train_data(&self, model: ModelType, n_pairs: usize, seed: u64) -> Result<TrainData> {
        match self.kind {
            DatasetKind::Synthetic => {
                TrainData::from_synthetic(&self.train_points, self.synth.n_lines()).with_supervision(model, &self.synth, n_pairs, seed)
            }
            DatasetKind::Mnist => {
                let mut d = TrainData::from_labeled(&self.train);
                match model {
                    ModelType::Lvae | ModelType::Gvae => {
                        return Err(Error::invalid(format!("{model} needs concept labels, which MNIST lacks")));
                    }
                    ModelType::AdaGvae => {
                        let mut a = Vec::with_capacity(n_pairs);
                        let mut b = Vec::with_capacity(n_pairs);
                        let mut round = 0;
                        // About half the pairs are positive; draw until enough.
                        while a.len() < n_pairs {
                            let pairs = make_mnist_pairs(&self.train.images, 2 * n_pairs, derive_seed(seed, &[0xADA, round]))?;
                            for p in pairs.into_iter().filter(|p| p.label).take(n_pairs - a.len()) {
                                a.push(p.a);
                                b.push(p.b);
                            }
                            round += 1;
                            if round > 16 {
                                return Err(Error::invalid("could not draw enough positive MNIST pairs"));
                            }
                        }
                        d.positive = Some((images_to_tensor(&a, Kind::Float), images_to_tensor(&b, Kind::Float)));
                    }
                    _ => {}
                }
                Ok(d)
            }
        }
    }
}

impl TrainData {
    pub fn from_labeled(data: &LabeledImages) -> TrainData {
        let images: &[Image] = &data.images;
        TrainData {
            images: images_to_tensor(images, Kind::Float),
            labels: tch::Tensor::from_slice(&data.labels.iter().map(|&l| l as i64).collect::<Vec<_>>()),
            concepts: None,
            shared: None,
            positive: None,
        }
    }
}
