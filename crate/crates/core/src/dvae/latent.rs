use rand::Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Diagonal Gaussian posterior for a single datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let q = LatentGaussian { mean, std };
        q.validate()?;
        Ok(q)
    }

    /// Skips validation; lets tests feed degenerate scales.
    pub fn new_unchecked(mean: Vec<f64>, std: Vec<f64>) -> Self {
        LatentGaussian { mean, std }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::invalid("mean and std widths differ"));
        }
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("posterior has non-finite entries"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("posterior std must be strictly positive"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q || N(0, I))` in closed form, summed over dimensions.
pub fn kl_to_standard_normal(q: &LatentGaussian) -> Result<f64> {
    q.validate()?;
    Ok(q.mean
        .iter()
        .zip(&q.std)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum())
}

/// `mean + std * eps` with `eps ~ N(0, I)`.
pub fn reparameterize(q: &LatentGaussian, rng: &mut impl Rng) -> Vec<f64> {
    q.mean
        .iter()
        .zip(&q.std)
        .map(|(&m, &s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect()
}

/// Batched posterior as produced by an encoder: `[B, n]` means and
/// log-variances.
#[derive(Debug)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Posterior {
    pub fn std(&self) -> Tensor {
        (&self.logvar * 0.5).exp()
    }

    pub fn var(&self) -> Tensor {
        self.logvar.exp()
    }

    /// Closed-form KL to the standard normal, summed over dimensions and
    /// averaged over the batch.
    pub fn kl(&self) -> Tensor {
        let per = (self.mean.square() + self.var() - 1.0 - &self.logvar) * 0.5;
        per.sum_dim_intlist(-1, false, per.kind()).mean(per.kind())
    }

    pub fn sample(&self, eps: &Tensor) -> Tensor {
        &self.mean + self.std() * eps
    }

    pub fn shallow_clone(&self) -> Posterior {
        Posterior {
            mean: self.mean.shallow_clone(),
            logvar: self.logvar.shallow_clone(),
        }
    }

    /// Row `i` as a validated [`LatentGaussian`].
    pub fn row(&self, i: i64) -> Result<LatentGaussian> {
        let mean: Vec<f64> = Vec::try_from(self.mean.get(i).to_kind(Kind::Double))
            .map_err(|e: tch::TchError| Error::invalid(e.to_string()))?;
        let std: Vec<f64> = Vec::try_from(self.std().get(i).to_kind(Kind::Double))
            .map_err(|e: tch::TchError| Error::invalid(e.to_string()))?;
        LatentGaussian::new(mean, std)
    }
}

/// `[rows, cols]` standard-normal noise drawn from `rng`, so samples depend
/// only on the seed and not on torch's global generator.
pub fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, kind: Kind) -> Tensor {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_slice(&v)
        .reshape([rows as i64, cols as i64])
        .to_kind(kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        let q = LatentGaussian::new(vec![0.0; 5], vec![1.0; 5]).unwrap();
        assert_eq!(kl_to_standard_normal(&q).unwrap(), 0.0);
        let q = LatentGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_to_standard_normal(&q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_positive_std_rejected() {
        assert!(LatentGaussian::new(vec![0.0], vec![0.0]).is_err());
        let q = LatentGaussian::new_unchecked(vec![0.0], vec![-1.0]);
        assert!(kl_to_standard_normal(&q).is_err());
    }

    #[test]
    fn zero_std_sample_is_mean() {
        let q = LatentGaussian::new_unchecked(vec![0.3, -2.0], vec![0.0, 0.0]);
        assert_eq!(reparameterize(&q, &mut rng_for(1, &[])), q.mean);
    }

    #[test]
    fn sample_mean_converges() {
        let q = LatentGaussian::new(vec![1.5, -0.5], vec![2.0, 0.3]).unwrap();
        let mut rng = rng_for(5, &[]);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let s = reparameterize(&q, &mut rng);
            acc[0] += s[0];
            acc[1] += s[1];
        }
        for d in 0..2 {
            let m = acc[d] / n as f64;
            assert!((m - q.mean[d]).abs() < 3.0 * q.std[d] / (n as f64).sqrt(), "{d}: {m}");
        }
    }

    #[test]
    fn sample_gradient_wrt_mean_is_identity() {
        let p = Posterior {
            mean: Tensor::from_slice(&[0.2f64, -1.0]).reshape([1, 2]).set_requires_grad(true),
            logvar: Tensor::from_slice(&[0.1f64, 0.4]).reshape([1, 2]),
        };
        let eps = Tensor::from_slice(&[0.7f64, -0.3]).reshape([1, 2]);
        p.sample(&eps).sum(Kind::Double).backward();
        let g: Vec<f64> = Vec::try_from(p.mean.grad().reshape([-1])).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn batched_kl_matches_scalar() {
        let mean = Tensor::from_slice(&[0.5f64, -1.0, 2.0, 0.0]).reshape([2, 2]);
        let logvar = Tensor::from_slice(&[0.0f64, -0.5, 0.3, 1.0]).reshape([2, 2]);
        let p = Posterior { mean, logvar };
        let expect = (0..2)
            .map(|i| kl_to_standard_normal(&p.row(i).unwrap()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((p.kl().double_value(&[]) - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            mean in prop::collection::vec(-5.0f64..5.0, 1..10),
            log_std in prop::collection::vec(-3.0f64..3.0, 10),
        ) {
            let std: Vec<f64> = log_std[..mean.len()].iter().map(|l| l.exp()).collect();
            let q = LatentGaussian::new(mean, std).unwrap();
            prop_assert!(kl_to_standard_normal(&q).unwrap() >= 0.0);
        }
    }
}
