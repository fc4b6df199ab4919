//! Central finite-difference gradient checks for small models.

use rand::seq::index::sample;
use rand::Rng;
use tch::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `||a - n|| / max(||a||, ||n||)`, or 0 when both vanish.
    pub fn rel_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        }
    }

    pub fn len(&self) -> usize {
        self.analytic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.analytic.is_empty()
    }
}

/// Compares the gradients currently stored on `params` with central
/// differences of `loss`, on up to `per_param` random coordinates of each
/// parameter. `loss` must be deterministic.
pub fn check_gradients(
    params: &[Tensor],
    mut loss: impl FnMut() -> f64,
    per_param: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    // Parameters the loss never reached have no gradient tensor at all.
    let analytic_grads: Vec<Tensor> = params
        .iter()
        .map(|p| {
            let g = p.grad();
            if g.defined() {
                g.copy()
            } else {
                p.zeros_like()
            }
        })
        .collect();
    let mut out = GradCheck {
        analytic: vec![],
        numeric: vec![],
    };
    for (p, g) in params.iter().zip(&analytic_grads) {
        let n = p.numel();
        let flat = p.view([-1]);
        let gflat = g.view([-1]);
        for i in sample(rng, n, per_param.min(n)) {
            let i = i as i64;
            let bump = |delta: f64| {
                tch::no_grad(|| {
                    let mut e = flat.get(i);
                    let _ = e.f_add_scalar_(delta).expect("perturb");
                })
            };
            bump(h);
            let up = loss();
            bump(-2.0 * h);
            let down = loss();
            bump(h);
            out.numeric.push((up - down) / (2.0 * h));
            out.analytic.push(gflat.double_value(&[i]));
        }
    }
    out
}
