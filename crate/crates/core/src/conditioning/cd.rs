//! The change discriminator CD: its own DVAE plus a DISC head on absolute
//! differences of class latents.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Device, Kind, Tensor};

use crate::batch::BatchSampler;
use crate::dvae::{normal_tensor, Architecture, DVAEParams, Dvae, DvaeForward, LossBreakdown, Noise};
use crate::error::{Error, Result};
use crate::image::images_to_tensor;
use crate::nn::{
    cross_entropy, load_archive, save_archive, var_tensors, Adam, Layer, Network, NetworkSpec, Shape,
    LRELU_SLOPE,
};
use crate::seed::{derive_seed, rng_for};
use crate::synthgen::ChangePair;

pub const CD_LATENT: usize = 16;
const CKPT_KIND: &str = "cd";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CDTrainParams {
    pub beta_y: f64,
    pub beta_x: f64,
    pub alpha: f64,
    pub alpha_c: f64,
}

impl Default for CDTrainParams {
    fn default() -> Self {
        CDTrainParams {
            beta_y: 1.0,
            beta_x: 0.5,
            alpha: 16.0,
            alpha_c: 50.0,
        }
    }
}

impl CDTrainParams {
    pub fn dvae(&self, n_latent: usize) -> DVAEParams {
        DVAEParams {
            beta_y: self.beta_y,
            beta_x: self.beta_x,
            alpha: self.alpha,
            n_y: n_latent,
            n_x: n_latent,
        }
    }
}

/// FC(50) + LReLU + BN + dropout 0.3, then FC(2) + softmax.
pub fn disc_head() -> NetworkSpec {
    NetworkSpec::new(vec![
        Layer::Dense { width: 50 },
        Layer::LeakyRelu { slope: LRELU_SLOPE },
        Layer::BatchNorm,
        Layer::Dropout { rate: 0.3 },
        Layer::Dense { width: 2 },
        Layer::Softmax,
    ])
}

/// Pair images stacked as `[P,1,32,32]` tensors, labels as int64 (1 = good
/// change).
pub struct PairTensors {
    pub a: Tensor,
    pub b: Tensor,
    pub label: Tensor,
}

impl PairTensors {
    pub fn from_pairs(pairs: &[ChangePair], kind: Kind) -> PairTensors {
        let a: Vec<_> = pairs.iter().map(|p| p.a.clone()).collect();
        let b: Vec<_> = pairs.iter().map(|p| p.b.clone()).collect();
        let l: Vec<i64> = pairs.iter().map(|p| p.label as i64).collect();
        PairTensors {
            a: images_to_tensor(&a, kind),
            b: images_to_tensor(&b, kind),
            label: Tensor::from_slice(&l),
        }
    }

    pub fn len(&self) -> usize {
        self.label.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CdBreakdown {
    pub dvae: LossBreakdown,
    /// DISC cross-entropy on the pair batch, before weighting.
    pub pair_ce: f64,
    pub pair_acc: f64,
    pub total: f64,
}

impl CdBreakdown {
    pub fn is_finite(&self) -> bool {
        self.dvae.is_finite() && self.pair_ce.is_finite() && self.total.is_finite()
    }
}

pub struct CdForward {
    pub dvae: DvaeForward,
    pub pair_ce: Tensor,
    pub pair_logits: Tensor,
    pub total: Tensor,
    pub surrogate: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CdMeta {
    arch: Architecture,
    n_latent: usize,
    params: CDTrainParams,
    disc: NetworkSpec,
    step: u64,
    seed: u64,
}

pub struct CdModel {
    pub vs: VarStore,
    pub dvae: Dvae,
    pub disc: Network,
    pub params: CDTrainParams,
    disc_spec: NetworkSpec,
    n_latent: usize,
}

impl CdModel {
    pub fn build(device: Device, arch: Architecture, n_latent: usize, params: CDTrainParams) -> Result<Self> {
        let vs = VarStore::new(device);
        let dvae = Dvae::build(&(vs.root() / "dvae"), arch, params.dvae(n_latent))?;
        let disc_spec = disc_head();
        let disc = Network::build(&(vs.root() / "disc"), &disc_spec, Shape::Flat(n_latent as i64))?;
        Ok(CdModel {
            vs,
            dvae,
            disc,
            params,
            disc_spec,
            n_latent,
        })
    }

    pub fn standard(device: Device, n_classes: usize) -> Result<Self> {
        Self::build(device, Architecture::change_discriminator(n_classes), CD_LATENT, CDTrainParams::default())
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    /// DISC logits on `|z_a - z_b|`.
    pub fn disc_logits(&self, z_a: &Tensor, z_b: &Tensor, train: bool) -> Tensor {
        self.disc.logits_t(&(z_a - z_b).abs(), train)
    }

    /// `log CD(x_a, x_b)` per row, from posterior means in evaluation mode.
    /// Differentiable with respect to the inputs.
    pub fn log_good(&self, x_a: &Tensor, x_b: &Tensor) -> Tensor {
        let mu_a = self.dvae.enc_y.forward_t(x_a, false).mean;
        let mu_b = self.dvae.enc_y.forward_t(x_b, false).mean;
        let l = self.disc_logits(&mu_a, &mu_b, false);
        l.log_softmax(-1, l.kind()).select(1, 1)
    }

    /// Probability of a single-concept change, per row.
    pub fn predict(&self, x_a: &Tensor, x_b: &Tensor) -> Tensor {
        tch::no_grad(|| self.log_good(x_a, x_b).exp())
    }

    /// CD's own DVAE loss on a labelled batch plus `ratio * alpha_c` times
    /// the DISC cross-entropy on a pair batch, using posterior samples.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_loss(
        &self,
        x: &Tensor,
        y: &Tensor,
        noise: &Noise,
        pair_a: &Tensor,
        pair_b: &Tensor,
        y_cd: &Tensor,
        pair_eps: (&Tensor, &Tensor),
        ratio: f64,
        train: bool,
    ) -> CdForward {
        let dvae = self.dvae.forward_loss(x, y, noise, train);
        let z_a = self.dvae.enc_y.forward_t(pair_a, train).sample(pair_eps.0);
        let z_b = self.dvae.enc_y.forward_t(pair_b, train).sample(pair_eps.1);
        let pair_logits = self.disc_logits(&z_a, &z_b, train);
        let pair_ce = cross_entropy(&pair_logits, y_cd);
        let weighted = &pair_ce * (ratio * self.params.alpha_c);
        CdForward {
            total: &dvae.total + &weighted,
            surrogate: &dvae.surrogate + &weighted,
            dvae,
            pair_ce,
            pair_logits,
        }
    }

    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    pub fn kind(&self) -> Kind {
        self.dvae.kind()
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64, opt: Option<&Adam>) -> Result<()> {
        let meta = CdMeta {
            arch: self.dvae.arch.clone(),
            n_latent: self.n_latent,
            params: self.params,
            disc: self.disc_spec.clone(),
            step,
            seed,
        };
        let mut tensors = var_tensors("var.", &self.vs);
        if let Some(o) = opt {
            tensors.extend(o.state_tensors("opt."));
        }
        save_archive(path, CKPT_KIND, &meta, tensors)
    }

    /// Loads a CD checkpoint as a frozen model, with its step counter.
    pub fn load(path: impl AsRef<Path>, device: Device) -> Result<(CdModel, u64)> {
        let ar = load_archive(path, CKPT_KIND)?;
        let meta: CdMeta = ar.meta()?;
        if meta.disc != disc_head() {
            return Err(Error::Checkpoint("unexpected DISC layout".into()));
        }
        let mut m = CdModel::build(device, meta.arch, meta.n_latent, meta.params)?;
        ar.restore_vars("var.", &mut m.vs)?;
        m.freeze();
        Ok((m, meta.step))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdTrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Pairs per step; the pair loss is scaled by `pair_batch / batch`.
    pub pair_batch: usize,
    pub seed: u64,
}

impl Default for CdTrainConfig {
    fn default() -> Self {
        CdTrainConfig {
            steps: 5_000_000,
            batch: 128,
            pair_batch: 64,
            seed: 0,
        }
    }
}

fn pair_accuracy(logits: &Tensor, labels: &Tensor) -> f64 {
    logits
        .argmax(-1, false)
        .eq_tensor(labels)
        .to_kind(Kind::Double)
        .mean(Kind::Double)
        .double_value(&[])
}

/// One optimizer update of CD.
pub fn cd_train_step(
    cd: &CdModel,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    pairs: (&Tensor, &Tensor, &Tensor),
    ratio: f64,
    rng: &mut impl rand::Rng,
) -> Result<CdBreakdown> {
    let kind = cd.kind();
    let noise = Noise::draw(rng, x.size()[0] as usize, &cd.dvae.params, kind);
    let p = pairs.0.size()[0] as usize;
    let eps_a = normal_tensor(rng, p, cd.n_latent, kind);
    let eps_b = normal_tensor(rng, p, cd.n_latent, kind);
    let out = cd.forward_loss(x, y, &noise, pairs.0, pairs.1, pairs.2, (&eps_a, &eps_b), ratio, true);
    let b = CdBreakdown {
        dvae: out.dvae.breakdown(),
        pair_ce: out.pair_ce.double_value(&[]),
        pair_acc: pair_accuracy(&out.pair_logits, pairs.2),
        total: out.total.double_value(&[]),
    };
    if !b.is_finite() {
        return Err(Error::Diverged {
            step: opt.step + 1,
            breakdown: format!("{} pair_ce={:.5}", b.dvae, b.pair_ce),
        });
    }
    opt.backward_step(&out.surrogate);
    Ok(b)
}

/// Trains CD on labelled images (`[N,1,32,32]`, int64 labels) and change
/// pairs. `log` sees every step's breakdown.
pub fn train_cd(
    cd: &CdModel,
    opt: &mut Adam,
    images: &Tensor,
    labels: &Tensor,
    pairs: &PairTensors,
    cfg: &CdTrainConfig,
    mut log: impl FnMut(u64, &CdBreakdown),
) -> Result<CdBreakdown> {
    let mut img_s = BatchSampler::new(images.size()[0] as usize, cfg.batch, derive_seed(cfg.seed, &[0xCD, 0]))?;
    let mut pair_s = BatchSampler::new(pairs.len(), cfg.pair_batch, derive_seed(cfg.seed, &[0xCD, 1]))?;
    let ratio = cfg.pair_batch as f64 / cfg.batch as f64;
    let dev = cd.dvae.device();
    let mut last = CdBreakdown::default();
    while opt.step < cfg.steps {
        let step = opt.step;
        let mut rng = rng_for(cfg.seed, &[0xCD, 2, step]);
        let ii = Tensor::from_slice(&img_s.next_indices().iter().map(|&i| i as i64).collect::<Vec<_>>());
        let pi = Tensor::from_slice(&pair_s.next_indices().iter().map(|&i| i as i64).collect::<Vec<_>>());
        let x = images.index_select(0, &ii).to_device(dev);
        let y = labels.index_select(0, &ii).to_device(dev);
        let pa = pairs.a.index_select(0, &pi).to_device(dev);
        let pb = pairs.b.index_select(0, &pi).to_device(dev);
        let pl = pairs.label.index_select(0, &pi).to_device(dev);
        last = cd_train_step(cd, opt, &x, &y, (&pa, &pb, &pl), ratio, &mut rng)?;
        log(opt.step, &last);
    }
    Ok(last)
}

/// Accuracy of thresholding `predict` at 0.5 against the pair labels.
pub fn cd_accuracy(cd: &CdModel, pairs: &PairTensors, batch: usize) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let dev = cd.dvae.device();
    let mut hits = 0i64;
    let n = pairs.len() as i64;
    let mut start = 0;
    while start < n {
        let len = (batch as i64).min(n - start);
        let a = pairs.a.narrow(0, start, len).to_device(dev).to_kind(cd.kind());
        let b = pairs.b.narrow(0, start, len).to_device(dev).to_kind(cd.kind());
        let l = pairs.label.narrow(0, start, len).to_device(dev);
        let good = cd.predict(&a, &b).ge(0.5).to_kind(Kind::Int64);
        hits += good.eq_tensor(&l).sum(Kind::Int64).int64_value(&[]);
        start += len;
    }
    hits as f64 / n as f64
}
