use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Device, Kind, Tensor};

use super::config::{ArchKind, CdConfig, ExperimentConfig, ModelType};
use crate::baselines::{lvae_train_step, pair_train_step, Averaging, LvaeHeads};
use crate::batch::BatchSampler;
use crate::conditioning::{
    realism_discriminator, toy_realism_discriminator, train_cd, vaece_train_step, CdModel, CdTrainConfig,
    Discriminator, PairTensors,
};
use crate::dvae::{train_step, Dvae, LossBreakdown, Noise};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::mnist::MnistSplit;
use crate::nn::{load_archive, save_archive, var_tensors, Adam};
use crate::seed::{derive_seed, rng_for};
use crate::synthgen::{
    generate_positive_pairs, generate_shared_concept_pairs, ChangePair, SynthConfig, SyntheticDatapoint,
};

pub const MODEL_CKPT_KIND: &str = "model";
/// Steps averaged into each logged curve point.
pub const CURVE_WINDOW: usize = 10;

/// Pair batch for GVAE: both images and the concept they share.
pub struct SharedPairs {
    pub a: Tensor,
    pub b: Tensor,
    pub dims: Vec<usize>,
}

/// Everything a training run reads: primary images and labels plus the
/// supervision its method needs.
pub struct TrainData {
    pub images: Tensor,
    pub labels: Tensor,
    /// `[N, n_lines]` concept labels, for LVAE.
    pub concepts: Option<Tensor>,
    pub shared: Option<SharedPairs>,
    /// Pairs differing in exactly one concept, for ADA-GVAE.
    pub positive: Option<(Tensor, Tensor)>,
}

fn labels_tensor(labels: impl Iterator<Item = usize>) -> Tensor {
    Tensor::from_slice(&labels.map(|l| l as i64).collect::<Vec<_>>())
}

impl TrainData {
    pub fn from_synthetic(points: &[SyntheticDatapoint], n_lines: usize) -> TrainData {
        let images: Vec<Image> = points.iter().map(|p| p.image.clone()).collect();
        let concepts: Vec<i64> = points
            .iter()
            .flat_map(|p| p.concept_vector(n_lines).into_iter().map(|b| b as i64))
            .collect();
        TrainData {
            images: images_to_tensor(&images, Kind::Float),
            labels: labels_tensor(points.iter().map(|p| p.class_id)),
            concepts: Some(Tensor::from_slice(&concepts).reshape([points.len() as i64, n_lines as i64])),
            shared: None,
            positive: None,
        }
    }

    pub fn from_mnist(split: &MnistSplit) -> TrainData {
        TrainData {
            images: images_to_tensor(&split.images, Kind::Float),
            labels: labels_tensor(split.labels.iter().map(|&l| l as usize)),
            concepts: None,
            shared: None,
            positive: None,
        }
    }

    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generates the pair supervision `model` trains on.
    pub fn with_supervision(mut self, model: ModelType, synth: &SynthConfig, n: usize, seed: u64) -> Result<TrainData> {
        match model {
            ModelType::Gvae => {
                let pairs = generate_shared_concept_pairs(synth, n, derive_seed(seed, &[0x5A]))?;
                let a: Vec<Image> = pairs.iter().map(|p| p.a.image.clone()).collect();
                let b: Vec<Image> = pairs.iter().map(|p| p.b.image.clone()).collect();
                self.shared = Some(SharedPairs {
                    a: images_to_tensor(&a, Kind::Float),
                    b: images_to_tensor(&b, Kind::Float),
                    dims: pairs.iter().map(|p| p.shared_dim).collect(),
                });
            }
            ModelType::AdaGvae => {
                let pairs = generate_positive_pairs(synth, n, derive_seed(seed, &[0xADA]))?;
                let a: Vec<Image> = pairs.iter().map(|p| p.a.clone()).collect();
                let b: Vec<Image> = pairs.iter().map(|p| p.b.clone()).collect();
                self.positive = Some((images_to_tensor(&a, Kind::Float), images_to_tensor(&b, Kind::Float)));
            }
            _ => {}
        }
        Ok(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Means over the last `CURVE_WINDOW` steps.
    pub losses: LossBreakdown,
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub fn at(&self, step: u64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.step == step)
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct Window {
    losses: Vec<LossBreakdown>,
    extra: Vec<BTreeMap<String, f64>>,
}

impl Window {
    fn push(&mut self, l: LossBreakdown, e: BTreeMap<String, f64>) {
        self.losses.push(l);
        self.extra.push(e);
        if self.losses.len() > CURVE_WINDOW {
            self.losses.remove(0);
            self.extra.remove(0);
        }
    }

    fn point(&self, step: u64) -> CurvePoint {
        let n = self.losses.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| self.losses.iter().map(f).sum::<f64>() / n;
        let mut extra = BTreeMap::new();
        for e in &self.extra {
            for (k, v) in e {
                *extra.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        CurvePoint {
            step,
            losses: LossBreakdown {
                kl_y: mean(|l| l.kl_y),
                kl_x: mean(|l| l.kl_x),
                rec: mean(|l| l.rec),
                cls_y: mean(|l| l.cls_y),
                cls_x_adv: mean(|l| l.cls_x_adv),
                total: mean(|l| l.total),
            },
            extra,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ExperimentConfig,
    n_classes: usize,
    step: u64,
    seed: u64,
}

/// A model of any type with its auxiliary trainable parts.
pub struct TrainedModel {
    pub vs: VarStore,
    pub model: Dvae,
    pub lvae: Option<LvaeHeads>,
    /// Realism discriminator, trained alongside VAE-CE.
    pub d: Option<Discriminator>,
    pub config: ExperimentConfig,
    pub n_classes: usize,
    pub step: u64,
    pub seed: u64,
}

impl TrainedModel {
    pub fn build(config: &ExperimentConfig, n_classes: usize, device: Device) -> Result<TrainedModel> {
        config.validate()?;
        let vs = VarStore::new(device);
        let model = Dvae::build(&(vs.root() / "m"), config.arch.dvae(n_classes), config.dvae)?;
        let lvae = match config.model {
            ModelType::Lvae => Some(LvaeHeads::build(&(vs.root() / "lvae"), config.lvae)?),
            _ => None,
        };
        let d = match config.model {
            ModelType::VaeCe => Some(Discriminator::new(
                device,
                match config.arch {
                    ArchKind::Standard => realism_discriminator(),
                    ArchKind::Toy => toy_realism_discriminator(),
                },
            )?),
            _ => None,
        };
        Ok(TrainedModel {
            vs,
            model,
            lvae,
            d,
            config: config.clone(),
            n_classes,
            step: 0,
            seed: config.resolved_seed(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = ModelMeta {
            config: self.config.clone(),
            n_classes: self.n_classes,
            step: self.step,
            seed: self.seed,
        };
        let mut tensors = var_tensors("var.", &self.vs);
        if let Some(d) = &self.d {
            tensors.extend(var_tensors("d.", &d.vs));
        }
        save_archive(path, MODEL_CKPT_KIND, &meta, tensors)
    }

    /// Reloads a checkpoint with every variable frozen.
    pub fn load(path: impl AsRef<Path>, device: Device) -> Result<TrainedModel> {
        let ar = load_archive(path, MODEL_CKPT_KIND)?;
        let meta: ModelMeta = ar.meta()?;
        let mut m = TrainedModel::build(&meta.config, meta.n_classes, device)?;
        ar.restore_vars("var.", &mut m.vs)?;
        m.vs.freeze();
        if let Some(d) = &mut m.d {
            ar.restore_vars("d.", &mut d.vs)?;
            d.vs.freeze();
        }
        m.step = meta.step;
        m.seed = meta.seed;
        Ok(m)
    }
}

fn gather(t: &Tensor, idx: &[usize], dev: Device) -> Tensor {
    let i = Tensor::from_slice(&idx.iter().map(|&i| i as i64).collect::<Vec<_>>());
    t.index_select(0, &i).to_device(dev)
}

fn breakdown_extra(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Where a run writes its checkpoint and curve.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("model.ckpt"))
    }

    pub fn curve(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("curve.json"))
    }
}

/// Trains one model for its effective step budget. Curve points are logged
/// at step 100 and every `log_every` steps; a diverged run writes its curve
/// before returning the error.
pub fn train_model(
    config: &ExperimentConfig,
    data: &TrainData,
    n_classes: usize,
    cd: Option<&CdModel>,
    device: Device,
    out: &RunOutput,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<(TrainedModel, TrainingCurve)> {
    let seed = config.resolved_seed();
    tch::manual_seed(derive_seed(seed, &[0x1417]) as i64);
    let mut tm = TrainedModel::build(config, n_classes, device)?;
    let steps = config.effective_steps();
    if data.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    if config.model == ModelType::VaeCe && cd.is_none() {
        return Err(Error::invalid("VAE-CE needs a trained change discriminator"));
    }
    if config.model == ModelType::Lvae && data.concepts.is_none() {
        return Err(Error::invalid("LVAE needs concept labels"));
    }
    let n_pairs = match config.model {
        ModelType::Gvae => Some(data.shared.as_ref().ok_or_else(|| Error::invalid("GVAE needs shared-concept pairs"))?.dims.len()),
        ModelType::AdaGvae => Some(
            data.positive
                .as_ref()
                .ok_or_else(|| Error::invalid("ADA-GVAE needs positive pairs"))?
                .0
                .size()[0] as usize,
        ),
        _ => None,
    };
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, config.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    }
    let mut opt = Adam::new(&tm.vs, config.optimizer);
    let mut d_opt = tm.d.as_ref().map(|d| Adam::new(&d.vs, config.optimizer));
    let mut sampler = BatchSampler::new(data.len(), config.batch, derive_seed(seed, &[0x7A, 0]))?;
    let mut pair_sampler = match n_pairs {
        Some(n) => Some(BatchSampler::new(n, config.pair_batch, derive_seed(seed, &[0x7A, 1]))?),
        None => None,
    };
    // Pair images over primary images.
    let ratio = 2.0 * config.pair_batch as f64 / config.batch as f64;
    let kind = tm.model.kind();
    let mut curve = TrainingCurve::default();
    let mut window = Window::default();
    for step in 1..=steps {
        let mut rng = rng_for(seed, &[0x7A, 2, step]);
        let idx = sampler.next_indices();
        let x = gather(&data.images, &idx, device).to_kind(kind);
        let y = gather(&data.labels, &idx, device);
        let noise = Noise::draw(&mut rng, idx.len(), &config.dvae, kind);
        let res: Result<(LossBreakdown, BTreeMap<String, f64>)> = match config.model {
            ModelType::Dvae => train_step(&tm.model, &mut opt, &x, &y, &noise).map(|b| (b, BTreeMap::new())),
            ModelType::Lvae => {
                let d = gather(data.concepts.as_ref().expect("checked"), &idx, device);
                let heads = tm.lvae.as_ref().expect("built");
                lvae_train_step(&tm.model, heads, &mut opt, &x, &y, &d, &noise)
                    .map(|b| (b.dvae, breakdown_extra(&[("dim_ce", b.dim_ce), ("comp_ce", b.comp_ce)])))
            }
            ModelType::Gvae | ModelType::AdaGvae => {
                let pidx = pair_sampler.as_mut().expect("built").next_indices();
                let (a, b, avg) = match config.model {
                    ModelType::Gvae => {
                        let s = data.shared.as_ref().expect("checked");
                        (&s.a, &s.b, Averaging::Shared(pidx.iter().map(|&i| s.dims[i]).collect()))
                    }
                    _ => {
                        let p = data.positive.as_ref().expect("checked");
                        (&p.0, &p.1, Averaging::Adaptive)
                    }
                };
                let xa = gather(a, &pidx, device).to_kind(kind);
                let xb = gather(b, &pidx, device).to_kind(kind);
                let na = Noise::draw(&mut rng, pidx.len(), &config.dvae, kind);
                let nb = Noise::draw(&mut rng, pidx.len(), &config.dvae, kind);
                pair_train_step(&tm.model, &mut opt, &x, &y, &noise, (&xa, &xb, &avg), (&na, &nb), ratio)
                    .map(|b| (b.dvae, breakdown_extra(&[("pair_elbo", b.pair_elbo)])))
            }
            ModelType::VaeCe => {
                let d = tm.d.as_mut().expect("built");
                vaece_train_step(
                    &tm.model,
                    &mut opt,
                    d,
                    d_opt.as_mut().expect("built"),
                    cd.expect("checked"),
                    &x,
                    &y,
                    &noise,
                    &config.cond,
                    &mut rng,
                )
                .map(|b| {
                    (
                        b.dvae,
                        breakdown_extra(&[
                            ("realism", b.realism),
                            ("change", b.change),
                            ("scale", b.mean_scale),
                            ("d_loss", b.d_loss),
                        ]),
                    )
                })
            }
        };
        let (b, extra) = match res {
            Ok(v) => v,
            Err(e) => {
                if let Some(p) = out.curve() {
                    curve.write(p)?;
                }
                return Err(e);
            }
        };
        tm.step = step;
        window.push(b, extra);
        if step == 100 || step % config.log_every == 0 || step == steps {
            let p = window.point(step);
            progress(&p);
            if curve.last().map_or(true, |l| l.step != step) {
                curve.points.push(p);
            }
        }
        if step % config.checkpoint_every == 0 {
            if let Some(p) = out.checkpoint() {
                tm.save(p)?;
            }
        }
    }
    if let Some(p) = out.checkpoint() {
        tm.save(p)?;
    }
    if let Some(p) = out.curve() {
        curve.write(p)?;
    }
    tm.vs.freeze();
    if let Some(d) = &mut tm.d {
        d.vs.freeze();
    }
    Ok((tm, curve))
}

/// Trains the change discriminator on images, labels and change pairs.
pub fn train_cd_run(
    config: &CdConfig,
    data: &TrainData,
    pairs: &[ChangePair],
    n_classes: usize,
    device: Device,
    checkpoint: Option<&Path>,
    mut progress: impl FnMut(u64, f64, f64),
) -> Result<CdModel> {
    let seed = crate::seed::resolve_seed(config.seed);
    let mut cd = CdModel::build(device, config.arch.change_discriminator(n_classes), config.n_latent, config.params)?;
    let mut opt = Adam::new(&cd.vs, config.optimizer);
    let pt = PairTensors::from_pairs(pairs, Kind::Float);
    let tc = CdTrainConfig {
        steps: config.effective_steps(),
        batch: config.batch,
        pair_batch: config.pair_batch,
        seed,
    };
    let log_every = config.log_every.max(1);
    train_cd(&cd, &mut opt, &data.images, &data.labels, &pt, &tc, |step, b: &crate::conditioning::CdBreakdown| {
        if step % log_every == 0 || step == tc.steps {
            progress(step, b.pair_ce, b.pair_acc);
        }
    })?;
    if let Some(p) = checkpoint {
        cd.save(p, opt.step, seed, Some(&opt))?;
    }
    cd.freeze();
    Ok(cd)
}
