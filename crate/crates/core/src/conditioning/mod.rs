//! Pair-based dimension conditioning. Two class latents are mixed so they
//! share all but one dimension, both mixes are decoded with the same
//! residual latent, and the decoder/encoders are pushed to make the results
//! look real (D) and differ by a single concept (CD).

mod cd;
mod disc;

pub use cd::{
    cd_accuracy, cd_train_step, disc_head, train_cd, CDTrainParams, CdBreakdown, CdForward, CdModel,
    CdTrainConfig, PairTensors, CD_LATENT,
};
pub use disc::{
    d_accuracy, d_loss, d_train_step, realism_discriminator, toy_realism_discriminator, Discriminator,
    FAKE, REAL,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::batch::random_derangement;
use crate::dvae::{Dvae, DvaeForward, LossBreakdown, Noise};
use crate::error::{Error, Result};
use crate::nn::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondParams {
    pub alpha_r: f64,
    pub alpha_p: f64,
    pub n_y: usize,
}

impl Default for CondParams {
    fn default() -> Self {
        CondParams {
            alpha_r: 1.0,
            alpha_p: 3.0,
            n_y: 8,
        }
    }
}

/// Which source each dimension of a mixed pair comes from. `j` is the one
/// dimension where the two mixes differ; every other dimension `k` is copied
/// from `a` into both mixes when `from_a[k]`, else from `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixPlan {
    pub j: usize,
    pub from_a: Vec<bool>,
}

impl MixPlan {
    pub fn draw(rng: &mut impl Rng, n: usize) -> MixPlan {
        let j = rng.gen_range(0..n);
        let from_a = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        MixPlan { j, from_a }
    }

    fn picks(&self, k: usize) -> (bool, bool) {
        if k == self.j {
            (true, false)
        } else {
            (self.from_a[k], self.from_a[k])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedPair {
    pub z_pa: Vec<f64>,
    pub z_pb: Vec<f64>,
    pub j: usize,
}

pub fn build_mixed_pair(z_ya: &[f64], z_yb: &[f64], rng: &mut impl Rng) -> Result<MixedPair> {
    if z_ya.len() != z_yb.len() || z_ya.is_empty() {
        return Err(Error::invalid("mixed pair needs two latents of equal, non-zero width"));
    }
    let plan = MixPlan::draw(rng, z_ya.len());
    let pick = |take_a: bool, k: usize| if take_a { z_ya[k] } else { z_yb[k] };
    let (mut z_pa, mut z_pb) = (Vec::new(), Vec::new());
    for k in 0..z_ya.len() {
        let (a, b) = plan.picks(k);
        z_pa.push(pick(a, k));
        z_pb.push(pick(b, k));
    }
    Ok(MixedPair { z_pa, z_pb, j: plan.j })
}

/// Batched mixing, one plan per row. Values are selected, not blended, so
/// shared dimensions are bit-identical between the two outputs.
pub fn mix_latents(z_ya: &Tensor, z_yb: &Tensor, plans: &[MixPlan]) -> (Tensor, Tensor) {
    let n = z_ya.size()[1] as usize;
    let (mut ma, mut mb) = (Vec::new(), Vec::new());
    for p in plans {
        for k in 0..n {
            let (a, b) = p.picks(k);
            ma.push(a);
            mb.push(b);
        }
    }
    let shape = [plans.len() as i64, n as i64];
    let ma = Tensor::from_slice(&ma).reshape(shape).to_device(z_ya.device());
    let mb = Tensor::from_slice(&mb).reshape(shape).to_device(z_ya.device());
    (z_ya.where_self(&ma, z_yb), z_ya.where_self(&mb, z_yb))
}

/// `n_y * |z_pa - z_pb|_1 / |z_ya - z_yb|_1` per row, detached, and 0 where
/// the denominator vanishes. Lies in `[0, n_y]`.
pub fn scale_factor(z_pa: &Tensor, z_pb: &Tensor, z_ya: &Tensor, z_yb: &Tensor, n_y: usize) -> Tensor {
    tch::no_grad(|| {
        let k = z_pa.kind();
        let num = (z_pa - z_pb).abs().sum_dim_intlist(-1, false, k);
        let den = (z_ya - z_yb).abs().sum_dim_intlist(-1, false, k);
        let live = den.gt(0.0);
        let safe = den.where_scalarother(&live, 1.0);
        (num / safe * n_y as f64).where_scalarother(&live, 0.0)
    })
}

pub struct CondLoss {
    pub total: Tensor,
    pub realism: Tensor,
    pub change: Tensor,
    pub scale: Tensor,
}

/// The loss from per-row log-probabilities: `-alpha_r (log D(pa) + log
/// D(pb)) + alpha_p * scale * -log CD(pa, pb)`, averaged over rows.
pub fn combine_terms(log_d_pa: &Tensor, log_d_pb: &Tensor, log_cd: &Tensor, scale: &Tensor, p: &CondParams) -> CondLoss {
    let k = log_d_pa.kind();
    let realism = -(log_d_pa + log_d_pb).mean(k) * p.alpha_r;
    let change = -(scale * log_cd).mean(k) * p.alpha_p;
    CondLoss {
        total: &realism + &change,
        realism,
        change,
        scale: scale.shallow_clone(),
    }
}

/// Conditioning loss with a given scale. D and CD run in evaluation mode;
/// whether their parameters collect gradients is up to the caller (both are
/// expected to be frozen).
pub fn conditioning_loss_scaled(
    x_pa: &Tensor,
    x_pb: &Tensor,
    scale: &Tensor,
    d: &Discriminator,
    cd: &CdModel,
    p: &CondParams,
) -> CondLoss {
    combine_terms(
        &d.log_real(x_pa, false),
        &d.log_real(x_pb, false),
        &cd.log_good(x_pa, x_pb),
        scale,
        p,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn conditioning_loss(
    x_pa: &Tensor,
    x_pb: &Tensor,
    z_pa: &Tensor,
    z_pb: &Tensor,
    z_ya: &Tensor,
    z_yb: &Tensor,
    d: &Discriminator,
    cd: &CdModel,
    p: &CondParams,
) -> CondLoss {
    let scale = scale_factor(z_pa, z_pb, z_ya, z_yb, p.n_y);
    conditioning_loss_scaled(x_pa, x_pb, &scale, d, cd, p)
}

/// The synthesized pair batch of one step. Row `i` mixes datapoint `i`
/// (as `a`) with datapoint `perm[i]` (as `b`); the residual latent is `b`'s.
pub struct PairPass {
    pub x_pa: Tensor,
    pub x_pb: Tensor,
    pub z_pa: Tensor,
    pub z_pb: Tensor,
    pub z_ya: Tensor,
    pub z_yb: Tensor,
    pub z_xb: Tensor,
}

pub fn synthesize_pairs(model: &Dvae, out: &DvaeForward, perm: &[usize], plans: &[MixPlan], train: bool) -> PairPass {
    let idx = Tensor::from_slice(&perm.iter().map(|&i| i as i64).collect::<Vec<_>>()).to_device(model.device());
    let z_ya = out.z_y.shallow_clone();
    let z_yb = out.z_y.index_select(0, &idx);
    let z_xb = out.z_x.index_select(0, &idx);
    let (z_pa, z_pb) = mix_latents(&z_ya, &z_yb, plans);
    PairPass {
        x_pa: model.decode(&z_pa, &z_xb, train),
        x_pb: model.decode(&z_pb, &z_xb, train),
        z_pa,
        z_pb,
        z_ya,
        z_yb,
        z_xb,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeCeBreakdown {
    pub dvae: LossBreakdown,
    pub realism: f64,
    pub change: f64,
    pub mean_scale: f64,
    pub d_loss: f64,
}

impl VaeCeBreakdown {
    pub fn is_finite(&self) -> bool {
        self.dvae.is_finite() && self.realism.is_finite() && self.change.is_finite()
    }
}

/// One VAE-CE step: the DVAE loss pass, the conditioning pass on mixed
/// pairs drawn from the same batch, then one update of D on the batch as
/// real data and the synthesized pairs as fake data. `cd` must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn vaece_train_step(
    model: &Dvae,
    opt: &mut Adam,
    d: &mut Discriminator,
    d_opt: &mut Adam,
    cd: &CdModel,
    x: &Tensor,
    y: &Tensor,
    noise: &Noise,
    cond: &CondParams,
    rng: &mut impl Rng,
) -> Result<VaeCeBreakdown> {
    let b = x.size()[0] as usize;
    let out = model.forward_loss(x, y, noise, true);
    let perm = random_derangement(b, rng)?;
    let plans: Vec<MixPlan> = (0..b).map(|_| MixPlan::draw(rng, model.params.n_y)).collect();
    let pass = synthesize_pairs(model, &out, &perm, &plans, true);
    d.vs.freeze();
    let cl = conditioning_loss(
        &pass.x_pa, &pass.x_pb, &pass.z_pa, &pass.z_pb, &pass.z_ya, &pass.z_yb, d, cd, cond,
    );
    d.vs.unfreeze();
    let mut bd = VaeCeBreakdown {
        dvae: out.breakdown(),
        realism: cl.realism.double_value(&[]),
        change: cl.change.double_value(&[]),
        mean_scale: cl.scale.mean(Kind::Double).double_value(&[]),
        d_loss: 0.0,
    };
    if !bd.is_finite() {
        return Err(Error::Diverged {
            step: opt.step + 1,
            breakdown: format!("{} realism={:.5} change={:.5}", bd.dvae, bd.realism, bd.change),
        });
    }
    opt.backward_step(&(&out.surrogate + &cl.total));
    let fake = Tensor::cat(&[&pass.x_pa, &pass.x_pb], 0);
    bd.d_loss = d_train_step(d, d_opt, x, &fake);
    Ok(bd)
}

#[cfg(test)]
mod tests;
