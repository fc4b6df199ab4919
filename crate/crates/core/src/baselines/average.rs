//! Pair-averaging of class-latent posteriors.

use tch::{Kind, Tensor};

use serde::{Deserialize, Serialize};

use crate::dvae::{Dvae, LatentGaussian, LossBreakdown, Noise, Posterior};
use crate::error::{Error, Result};
use crate::nn::Adam;

fn average_dim(a: &mut LatentGaussian, b: &mut LatentGaussian, k: usize) {
    // Already-equal entries are left alone so averaging is idempotent bit
    // for bit.
    if a.mean[k] != b.mean[k] {
        let m = 0.5 * (a.mean[k] + b.mean[k]);
        a.mean[k] = m;
        b.mean[k] = m;
    }
    if a.std[k] != b.std[k] {
        let s = (0.5 * (a.std[k] * a.std[k] + b.std[k] * b.std[k])).sqrt();
        a.std[k] = s;
        b.std[k] = s;
    }
}

/// Replaces the mean and variance at `shared_dim` in both posteriors by the
/// pair's arithmetic mean.
pub fn gvae_average(
    q_a: &LatentGaussian,
    q_b: &LatentGaussian,
    shared_dim: usize,
) -> Result<(LatentGaussian, LatentGaussian)> {
    if q_a.width() != q_b.width() {
        return Err(Error::invalid("posterior widths differ"));
    }
    if shared_dim >= q_a.width() {
        return Err(Error::invalid(format!(
            "shared dimension {shared_dim} out of range for width {}",
            q_a.width()
        )));
    }
    let (mut a, mut b) = (q_a.clone(), q_b.clone());
    average_dim(&mut a, &mut b, shared_dim);
    Ok((a, b))
}

/// `0.5 * (KL(a||b) + KL(b||a))` per dimension for univariate Gaussians.
pub fn symmetric_kl(q_a: &LatentGaussian, q_b: &LatentGaussian) -> Vec<f64> {
    q_a.mean
        .iter()
        .zip(&q_a.std)
        .zip(q_b.mean.iter().zip(&q_b.std))
        .map(|((&ma, &sa), (&mb, &sb))| {
            let (va, vb) = (sa * sa, sb * sb);
            let d2 = (ma - mb) * (ma - mb);
            // The log terms cancel in the symmetric sum.
            0.25 * ((va + d2) / vb + (vb + d2) / va) - 0.5
        })
        .collect()
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Leaves the dimension with the largest symmetric KL independent (lowest
/// index on ties) and averages every other dimension.
pub fn ada_gvae_pair_step(
    q_a: &LatentGaussian,
    q_b: &LatentGaussian,
) -> Result<(LatentGaussian, LatentGaussian, usize)> {
    if q_a.width() != q_b.width() || q_a.width() == 0 {
        return Err(Error::invalid("posterior widths differ or are empty"));
    }
    let j = argmax_lowest(&symmetric_kl(q_a, q_b));
    let (mut a, mut b) = (q_a.clone(), q_b.clone());
    for k in (0..a.width()).filter(|&k| k != j) {
        average_dim(&mut a, &mut b, k);
    }
    Ok((a, b, j))
}

/// Batched per-dimension symmetric KL, `[B, n]`.
pub fn symmetric_kl_tensor(q_a: &Posterior, q_b: &Posterior) -> Tensor {
    let (va, vb) = (q_a.var(), q_b.var());
    let d2 = (&q_a.mean - &q_b.mean).square();
    ((&va + &d2) / &vb + (&vb + &d2) / &va) * 0.25 - 0.5
}

/// Averages both posteriors wherever `mask` (`[B, n]` bool) is set.
/// Entries that already agree keep their exact values.
pub fn average_posteriors(q_a: &Posterior, q_b: &Posterior, mask: &Tensor) -> (Posterior, Posterior) {
    let m_avg = (&q_a.mean + &q_b.mean) * 0.5;
    let lv_avg = ((q_a.var() + q_b.var()) * 0.5).log();
    let pick = |own: &Tensor, avg: &Tensor, other: &Tensor| {
        let use_avg = mask.logical_and(&own.ne_tensor(other));
        avg.where_self(&use_avg, own)
    };
    (
        Posterior {
            mean: pick(&q_a.mean, &m_avg, &q_b.mean),
            logvar: pick(&q_a.logvar, &lv_avg, &q_b.logvar),
        },
        Posterior {
            mean: pick(&q_b.mean, &m_avg, &q_a.mean),
            logvar: pick(&q_b.logvar, &lv_avg, &q_a.logvar),
        },
    )
}

fn to_mask(rows: Vec<Vec<bool>>, device: tch::Device) -> Tensor {
    let (b, n) = (rows.len() as i64, rows.first().map_or(0, |r| r.len()) as i64);
    let flat: Vec<bool> = rows.into_iter().flatten().collect();
    Tensor::from_slice(&flat).reshape([b, n]).to_device(device)
}

/// GVAE masks: only each pair's shared dimension is averaged.
pub fn gvae_masks(shared: &[usize], n: usize, device: tch::Device) -> Tensor {
    to_mask(shared.iter().map(|&s| (0..n).map(|k| k == s).collect()).collect(), device)
}

/// ADA-GVAE masks and the independent dimension of each row.
pub fn ada_masks(q_a: &Posterior, q_b: &Posterior) -> (Tensor, Vec<usize>) {
    let kl = tch::no_grad(|| symmetric_kl_tensor(q_a, q_b)).to_kind(Kind::Double);
    let (b, n) = (kl.size()[0], kl.size()[1] as usize);
    let mut js = Vec::with_capacity(b as usize);
    let mut rows = Vec::with_capacity(b as usize);
    for i in 0..b {
        let v: Vec<f64> = Vec::try_from(kl.get(i)).expect("kl row");
        let j = argmax_lowest(&v);
        js.push(j);
        rows.push((0..n).map(|k| k != j).collect());
    }
    (to_mask(rows, q_a.mean.device()), js)
}

/// Which pair-averaging scheme a training run uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// GVAE: each pair's known shared dimension.
    Shared(Vec<usize>),
    /// ADA-GVAE: all but the most divergent dimension.
    Adaptive,
}

/// ELBO of a pair batch after averaging class latents, as the mean over the
/// `2P` images. Residual latents are untouched.
pub fn pair_elbo(
    model: &Dvae,
    x_a: &Tensor,
    x_b: &Tensor,
    averaging: &Averaging,
    noise_a: &Noise,
    noise_b: &Noise,
) -> Result<Tensor> {
    let (qya, qxa) = model.encode(x_a, true);
    let (qyb, qxb) = model.encode(x_b, true);
    let mask = match averaging {
        Averaging::Shared(dims) => {
            if dims.len() as i64 != x_a.size()[0] || dims.iter().any(|&d| d >= model.params.n_y) {
                return Err(Error::invalid("shared dimensions do not fit the pair batch"));
            }
            gvae_masks(dims, model.params.n_y, model.device())
        }
        Averaging::Adaptive => ada_masks(&qya, &qyb).0,
    };
    let (qya, qyb) = average_posteriors(&qya, &qyb, &mask);
    let ea = model.elbo_from_posteriors(x_a, &qya, &qxa, noise_a, true);
    let eb = model.elbo_from_posteriors(x_b, &qyb, &qxb, noise_b, true);
    Ok((ea + eb) * 0.5)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBreakdown {
    pub dvae: LossBreakdown,
    pub pair_elbo: f64,
}

/// One step on the DVAE loss of a primary batch plus the averaged-pair
/// ELBO weighted by `ratio` (pair images over primary images).
#[allow(clippy::too_many_arguments)]
pub fn pair_train_step(
    model: &Dvae,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    noise: &Noise,
    pair: (&Tensor, &Tensor, &Averaging),
    pair_noise: (&Noise, &Noise),
    ratio: f64,
) -> Result<PairBreakdown> {
    let out = model.forward_loss(x, y, noise, true);
    let pe = pair_elbo(model, pair.0, pair.1, pair.2, pair_noise.0, pair_noise.1)?;
    let b = PairBreakdown {
        dvae: out.breakdown(),
        pair_elbo: pe.double_value(&[]),
    };
    if !(b.dvae.is_finite() && b.pair_elbo.is_finite()) {
        return Err(Error::Diverged {
            step: opt.step + 1,
            breakdown: format!("{} pair_elbo={:.5}", b.dvae, b.pair_elbo),
        });
    }
    opt.backward_step(&(&out.surrogate + pe * ratio));
    Ok(b)
}
