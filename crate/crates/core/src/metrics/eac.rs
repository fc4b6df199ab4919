//! Explanation alignment cost: DTW between a candidate explanation and the
//! closest ground-truth explanation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthgen::{Concepts, GroundTruth, SynthConfig, SyntheticDatapoint, MAX_TRUTH_CONCEPTS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EACConfig {
    /// Constant added to every aligned state pair.
    pub epsilon: f64,
    pub n_pairs: usize,
}

impl Default for EACConfig {
    fn default() -> Self {
        EACConfig {
            epsilon: 1e-3,
            n_pairs: 90,
        }
    }
}

impl EACConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Summed squared pixel difference plus `epsilon`.
pub fn state_cost(x_c: &Image, x_t: &Image, epsilon: f64) -> f64 {
    x_c.pixels()
        .iter()
        .zip(x_t.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        + epsilon
}

/// DTW over a precomputed `n x m` cost matrix. The path starts at `(0, 0)`,
/// ends at `(n-1, m-1)` and moves by `(1,0)`, `(0,1)` or `(1,1)`.
pub fn dtw_from_costs(cost: &[Vec<f64>]) -> Result<f64> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || cost.iter().any(|r| r.len() != m) {
        return Err(Error::invalid("DTW needs a non-empty rectangular cost matrix"));
    }
    let mut acc = vec![vec![f64::INFINITY; m]; n];
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 {
                    best = best.min(acc[i - 1][j]);
                }
                if j > 0 {
                    best = best.min(acc[i][j - 1]);
                }
                if i > 0 && j > 0 {
                    best = best.min(acc[i - 1][j - 1]);
                }
                best
            };
            acc[i][j] = prev + cost[i][j];
        }
    }
    Ok(acc[n - 1][m - 1])
}

/// Minimum total state cost over monotone alignments that cover every state
/// of both sequences.
pub fn dtw_align(candidate: &[Image], truth: &[Image], epsilon: f64) -> Result<f64> {
    if candidate.is_empty() || truth.is_empty() {
        return Err(Error::invalid("cannot align an empty sequence"));
    }
    let cost: Vec<Vec<f64>> = candidate
        .iter()
        .map(|c| truth.iter().map(|t| state_cost(c, t, epsilon)).collect())
        .collect();
    dtw_from_costs(&cost)
}

/// Exhaustive minimum over every monotone complete alignment, by walking
/// all step sequences. Exponential; for checking the dynamic program.
pub fn brute_force_alignment(cost: &[Vec<f64>]) -> f64 {
    fn walk(cost: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + cost[i][j];
        let (n, m) = (cost.len(), cost[0].len());
        if i == n - 1 && j == m - 1 {
            *best = best.min(acc);
            return;
        }
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            if i + di < n && j + dj < m {
                walk(cost, i + di, j + dj, acc, best);
            }
        }
    }
    let mut best = f64::INFINITY;
    walk(cost, 0, 0, 0.0, &mut best);
    best
}

/// Minimum DTW cost of the candidate states against every ground-truth
/// order from `a` to the target concepts.
pub fn eac(candidate: &[Image], a: &SyntheticDatapoint, b_concepts: Concepts, synth: &SynthConfig, cfg: &EACConfig) -> Result<f64> {
    cfg.validate()?;
    if candidate.is_empty() {
        return Err(Error::invalid("candidate explanation has no states"));
    }
    let n = a.concepts.symmetric_difference(b_concepts).len();
    if n > MAX_TRUTH_CONCEPTS {
        return Err(Error::invalid(format!("{n} differing concepts exceeds {MAX_TRUTH_CONCEPTS}")));
    }
    let gt = GroundTruth::build(synth, a, b_concepts)?;
    eac_against(candidate, &gt, cfg.epsilon)
}

/// `eac` against an already built ground truth. State costs are computed
/// once per (candidate state, truth subset).
pub fn eac_against(candidate: &[Image], gt: &GroundTruth, epsilon: f64) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::invalid("candidate explanation has no states"));
    }
    let keys: Vec<Concepts> = gt.states.keys().copied().collect();
    let table: Vec<Vec<f64>> = candidate
        .iter()
        .map(|c| keys.iter().map(|k| state_cost(c, &gt.states[k], epsilon)).collect())
        .collect();
    let col = |s: Concepts| keys.binary_search(&s).expect("state rendered");
    let best = gt
        .orders
        .par_iter()
        .map(|order| {
            let cols: Vec<usize> = gt.concept_path(order).into_iter().map(col).collect();
            let cost: Vec<Vec<f64>> = table.iter().map(|row| cols.iter().map(|&j| row[j]).collect()).collect();
            dtw_from_costs(&cost).expect("non-empty")
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best)
}
