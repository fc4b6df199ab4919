use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::Tensor;

use crate::error::{Error, Result};

/// Optimizer constants shared by every training procedure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-4,
        }
    }
}

/// Adam over the variables of one var-store that were trainable when the
/// optimizer was created. Moment buffers are keyed by variable name so the
/// state can be written into checkpoints.
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    vars: Vec<(String, Tensor)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(vs: &VarStore, config: AdamConfig) -> Adam {
        let mut vars: Vec<(String, Tensor)> = vs
            .variables()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        let zeros = |vars: &[(String, Tensor)]| {
            vars.iter()
                .map(|(n, t)| (n.clone(), t.zeros_like()))
                .collect::<BTreeMap<_, _>>()
        };
        Adam {
            config,
            step: 0,
            m: zeros(&vars),
            v: zeros(&vars),
            vars,
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &self.vars {
            let mut g = t.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    /// Applies one update from the gradients currently stored on the
    /// variables. Variables without a gradient are left alone.
    pub fn step(&mut self) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        tch::no_grad(|| {
            for (name, p) in &self.vars {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let m = self.m.get_mut(name).expect("moment");
                let v = self.v.get_mut(name).expect("moment");
                *m = &*m * beta1 + &g * (1.0 - beta1);
                *v = &*v * beta2 + g.square() * (1.0 - beta2);
                let update = (&*m / c1) / ((&*v / c2).sqrt() + eps) * lr;
                let mut p = p.shallow_clone();
                let _ = p.f_sub_(&update).expect("in-place update");
            }
        });
    }

    pub fn backward_step(&mut self, loss: &Tensor) {
        self.zero_grad();
        loss.backward();
        self.step();
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.m {
            out.push((format!("{prefix}m.{n}"), t.shallow_clone()));
        }
        for (n, t) in &self.v {
            out.push((format!("{prefix}v.{n}"), t.shallow_clone()));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        prefix: &str,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (kind, buf) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (n, t) in buf.iter_mut() {
                let key = format!("{prefix}{kind}.{n}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if src.size() != t.size() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {key}")));
                }
                *t = src.to_kind(t.kind());
            }
        }
        self.step = step;
        Ok(())
    }
}
