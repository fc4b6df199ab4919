use std::collections::BTreeMap;

use itertools::Itertools;

use super::{apply_noise, render_base, Concepts, SynthConfig, SyntheticDatapoint};
use crate::error::{Error, Result};
use crate::image::Image;

/// All ground-truth explanations from `a` towards a target concept set:
/// every order of flipping the differing concepts one at a time, rendered
/// with `a`'s noise seed. States are rendered once per visited subset.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub start: Concepts,
    pub differing: Vec<usize>,
    pub states: BTreeMap<Concepts, Image>,
    /// Each order is a permutation of `differing`.
    pub orders: Vec<Vec<usize>>,
}

/// Hard cap on concepts to change; 8! orders is the largest enumeration.
pub const MAX_TRUTH_CONCEPTS: usize = 8;

impl GroundTruth {
    pub fn build(cfg: &SynthConfig, a: &SyntheticDatapoint, target: Concepts) -> Result<Self> {
        let diff = a.concepts.symmetric_difference(target);
        let differing = diff.indices();
        if differing.len() > MAX_TRUTH_CONCEPTS {
            return Err(Error::invalid(format!(
                "{} differing concepts exceeds the limit of {MAX_TRUTH_CONCEPTS}",
                differing.len()
            )));
        }
        let mut states = BTreeMap::new();
        // Every subset of the differing concepts is reachable by some order.
        for mask in 0u32..(1 << differing.len()) {
            let mut s = a.concepts;
            for (bit, &c) in differing.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    s = s.toggle(c);
                }
            }
            let im = if s == a.concepts {
                a.image.clone()
            } else {
                apply_noise(&render_base(s, &cfg.lines)?, &cfg.noise, a.noise_seed)
            };
            states.insert(s, im);
        }
        let orders = differing
            .iter()
            .copied()
            .permutations(differing.len())
            .collect();
        Ok(GroundTruth {
            start: a.concepts,
            differing,
            states,
            orders,
        })
    }

    /// Concept sets visited by one order, starting state included.
    pub fn concept_path(&self, order: &[usize]) -> Vec<Concepts> {
        let mut cur = self.start;
        let mut out = vec![cur];
        for &c in order {
            cur = cur.toggle(c);
            out.push(cur);
        }
        out
    }

    pub fn images(&self, order: &[usize]) -> Vec<Image> {
        self.concept_path(order)
            .into_iter()
            .map(|s| self.states[&s].clone())
            .collect()
    }
}

/// One image sequence per concept order (`n!` sequences of `n + 1` states).
pub fn ground_truth_explanations(
    cfg: &SynthConfig,
    a: &SyntheticDatapoint,
    b_concepts: Concepts,
) -> Result<Vec<Vec<Image>>> {
    let gt = GroundTruth::build(cfg, a, b_concepts)?;
    Ok(gt.orders.iter().map(|o| gt.images(o)).collect())
}
