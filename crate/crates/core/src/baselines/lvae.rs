use serde::{Deserialize, Serialize};
use tch::nn;
use tch::Tensor;

use crate::dvae::{linear_classifier, mlp_classifier, Dvae, LossBreakdown, Noise};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, grad_reverse_scaled, Adam, Network, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LVAEParams {
    pub alpha_d: f64,
    pub n_c: usize,
}

impl Default for LVAEParams {
    fn default() -> Self {
        LVAEParams { alpha_d: 20.0, n_c: 8 }
    }
}

/// For every concept `i`: a classifier on `z_y[i]` alone and an adversarial
/// one on the other `n_c - 1` dimensions.
#[derive(Debug)]
pub struct LvaeHeads {
    pub per_dim: Vec<Network>,
    pub complement: Vec<Network>,
    pub params: LVAEParams,
}

impl LvaeHeads {
    pub fn build(p: &nn::Path, params: LVAEParams) -> Result<LvaeHeads> {
        if params.n_c < 2 {
            return Err(Error::invalid("LVAE needs at least two concepts"));
        }
        let mut per_dim = Vec::new();
        let mut complement = Vec::new();
        for i in 0..params.n_c {
            per_dim.push(Network::build(&(p / format!("dim{i}")), &linear_classifier(2), Shape::Flat(1))?);
            complement.push(Network::build(
                &(p / format!("comp{i}")),
                &mlp_classifier(50, 2),
                Shape::Flat(params.n_c as i64 - 1),
            )?);
        }
        Ok(LvaeHeads {
            per_dim,
            complement,
            params,
        })
    }
}

fn complement_of(z: &Tensor, i: usize, n: usize) -> Tensor {
    let idx: Vec<i64> = (0..n as i64).filter(|&k| k != i as i64).collect();
    z.index_select(1, &Tensor::from_slice(&idx).to_device(z.device()))
}

pub struct LvaeLoss {
    /// Summed per-dimension cross-entropies.
    pub dim_ce: Tensor,
    /// Summed complementary (adversarial) cross-entropies.
    pub comp_ce: Tensor,
    /// `alpha_d * dim_ce - alpha_d * comp_ce`, the objective seen by the
    /// encoder and the per-dimension classifiers.
    pub total: Tensor,
    /// `alpha_d * dim_ce + comp_ce`, with the complementary input routed
    /// through gradient reversal scaled by `alpha_d`.
    pub surrogate: Tensor,
}

/// LVAE terms on class latents `z_y` (`[B, n_c]`) and binary concept labels
/// `d` (`[B, n_c]`, int64).
pub fn lvae_loss(heads: &LvaeHeads, z_y: &Tensor, d: &Tensor, train: bool) -> Result<LvaeLoss> {
    let n = heads.params.n_c;
    if z_y.size()[1] != n as i64 {
        return Err(Error::invalid(format!("z_y has width {}, expected {n}", z_y.size()[1])));
    }
    if d.size() != [z_y.size()[0], n as i64] {
        return Err(Error::invalid(format!("dimension labels have shape {:?}", d.size())));
    }
    let a = heads.params.alpha_d;
    let rev = grad_reverse_scaled(z_y, a);
    let mut dim_ce = Vec::with_capacity(n);
    let mut comp_ce = Vec::with_capacity(n);
    for i in 0..n {
        let di = d.select(1, i as i64);
        let zi = z_y.narrow(1, i as i64, 1);
        dim_ce.push(cross_entropy(&heads.per_dim[i].logits_t(&zi, train), &di));
        let zc = complement_of(&rev, i, n);
        comp_ce.push(cross_entropy(&heads.complement[i].logits_t(&zc, train), &di));
    }
    let dim_ce = Tensor::stack(&dim_ce, 0).sum(z_y.kind());
    let comp_ce = Tensor::stack(&comp_ce, 0).sum(z_y.kind());
    Ok(LvaeLoss {
        total: &dim_ce * a - &comp_ce * a,
        surrogate: &dim_ce * a + &comp_ce,
        dim_ce,
        comp_ce,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LvaeBreakdown {
    pub dvae: LossBreakdown,
    pub dim_ce: f64,
    pub comp_ce: f64,
}

/// DVAE loss plus the LVAE terms on the same batch's `z_y` samples.
#[allow(clippy::too_many_arguments)]
pub fn lvae_train_step(
    model: &Dvae,
    heads: &LvaeHeads,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    d: &Tensor,
    noise: &Noise,
) -> Result<LvaeBreakdown> {
    let out = model.forward_loss(x, y, noise, true);
    let l = lvae_loss(heads, &out.z_y, d, true)?;
    let b = LvaeBreakdown {
        dvae: out.breakdown(),
        dim_ce: l.dim_ce.double_value(&[]),
        comp_ce: l.comp_ce.double_value(&[]),
    };
    if !(b.dvae.is_finite() && b.dim_ce.is_finite() && b.comp_ce.is_finite()) {
        return Err(Error::Diverged {
            step: opt.step + 1,
            breakdown: format!("{} dim_ce={:.5} comp_ce={:.5}", b.dvae, b.dim_ce, b.comp_ce),
        });
    }
    opt.backward_step(&(&out.surrogate + &l.surrogate));
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dvae::{normal_tensor, Architecture, DVAEParams};
    use crate::nn::{check_gradients, AdamConfig};
    use crate::seed::rng_for;
    use tch::Kind;
    use tch::nn::VarStore;
    use tch::Device;

    fn labels(rows: &[[i64; 2]]) -> Tensor {
        Tensor::from_slice(&rows.concat()).reshape([rows.len() as i64, 2])
    }

    #[test]
    fn complement_width_is_seven() {
        let vs = VarStore::new(Device::Cpu);
        let h = LvaeHeads::build(&vs.root(), LVAEParams::default()).unwrap();
        assert_eq!(h.complement.len(), 8);
        assert!(h.complement.iter().all(|c| c.input == Shape::Flat(7)));
        assert!(h.per_dim.iter().all(|c| c.input == Shape::Flat(1)));
    }

    #[test]
    fn wrong_label_shape_rejected() {
        let vs = VarStore::new(Device::Cpu);
        let h = LvaeHeads::build(&vs.root(), LVAEParams { alpha_d: 1.0, n_c: 2 }).unwrap();
        let z = Tensor::zeros([3, 2], (Kind::Float, Device::Cpu));
        let d = Tensor::zeros([3, 1], (Kind::Int64, Device::Cpu));
        assert!(lvae_loss(&h, &z, &d, false).is_err());
    }

    #[test]
    fn certain_dimension_classifiers_cost_nothing() {
        let vs = VarStore::new(Device::Cpu);
        let h = LvaeHeads::build(&vs.root(), LVAEParams { alpha_d: 3.0, n_c: 2 }).unwrap();
        tch::no_grad(|| {
            for (name, mut t) in vs.variables() {
                if name.starts_with("dim") {
                    let _ = t.zero_();
                    if name.ends_with("bias") {
                        let _ = t.get(1).fill_(1e4);
                    }
                }
            }
        });
        let z = Tensor::randn([4, 2], (Kind::Float, Device::Cpu));
        let l = lvae_loss(&h, &z, &labels(&[[1, 1]; 4]), false).unwrap();
        assert_eq!(l.dim_ce.double_value(&[]), 0.0);
    }

    #[test]
    fn reversal_scales_complement_gradient_by_minus_alpha() {
        let mut vs = VarStore::new(Device::Cpu);
        let p = LVAEParams { alpha_d: 2.5, n_c: 3 };
        let h = LvaeHeads::build(&vs.root(), p).unwrap();
        vs.double();
        let z = Tensor::randn([5, 3], (Kind::Double, Device::Cpu)).set_requires_grad(true);
        let d = Tensor::from_slice(&[0i64, 1, 1, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1, 1, 0]).reshape([5, 3]);
        let l = lvae_loss(&h, &z, &d, true).unwrap();
        let through = Tensor::run_backward(&[&l.comp_ce], &[&z], true, false).remove(0);
        let mut plain = Vec::new();
        for i in 0..3 {
            let zc = complement_of(&z, i, 3);
            plain.push(cross_entropy(&h.complement[i].logits_t(&zc, true), &d.select(1, i as i64)));
        }
        let plain = Tensor::stack(&plain, 0).sum(Kind::Double);
        let direct = Tensor::run_backward(&[&plain], &[&z], false, false).remove(0);
        assert!(through.allclose(&(direct * -2.5), 1e-12, 1e-14, false));
    }

    #[test]
    fn lvae_gradients_match_finite_differences() {
        tch::manual_seed(4);
        let mut vs = VarStore::new(Device::Cpu);
        let dp = DVAEParams {
            beta_y: 1.0,
            beta_x: 1.0,
            alpha: 2.0,
            n_y: 2,
            n_x: 2,
        };
        let m = Dvae::build(&(vs.root() / "m"), Architecture::toy(10), dp).unwrap();
        let p = LVAEParams { alpha_d: 1.7, n_c: 2 };
        let h = LvaeHeads::build(&(vs.root() / "lvae"), p).unwrap();
        vs.double();
        let x = Tensor::rand([6, 1, 32, 32], (Kind::Double, Device::Cpu));
        let d = labels(&[[0, 1], [1, 1], [0, 0], [1, 0], [1, 1], [0, 1]]);
        let eps = normal_tensor(&mut rng_for(3, &[]), 6, 2, Kind::Double);
        let run = |train: bool| {
            let z = m.enc_y.forward_t(&x, train).sample(&eps);
            lvae_loss(&h, &z, &d, train).unwrap()
        };
        let mut named: Vec<(String, Tensor)> =
            vs.variables().into_iter().filter(|(n, t)| t.requires_grad() && !n.contains("enc_x") && !n.starts_with("m.dec") && !n.contains("cls")).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let (adv, main): (Vec<_>, Vec<_>) = named.into_iter().partition(|(n, _)| n.contains("comp"));
        let adv: Vec<Tensor> = adv.into_iter().map(|t| t.1).collect();
        let main: Vec<Tensor> = main.into_iter().map(|t| t.1).collect();
        let mut opt = Adam::new(&vs, AdamConfig::default());
        opt.zero_grad();
        run(true).surrogate.backward();
        let mut rng = rng_for(5, &[]);
        let gc = check_gradients(&main, || tch::no_grad(|| run(true).total.double_value(&[])), 4, 1e-6, &mut rng);
        assert!(gc.rel_error() < 1e-3, "main {}", gc.rel_error());
        let gc = check_gradients(&adv, || tch::no_grad(|| run(true).comp_ce.double_value(&[])), 4, 1e-6, &mut rng);
        assert!(gc.rel_error() < 1e-3, "adversary {}", gc.rel_error());
    }
}
