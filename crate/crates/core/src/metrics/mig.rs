//! Mutual information gap over discretized latents and binary factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binning {
    /// Equal-width bins between each dimension's min and max.
    EqualWidth,
    /// Equal-count bins by rank; equal values share a bin.
    Quantile,
}

/// Bin index per sample for one latent dimension.
pub fn discretize(values: &[f64], bins: usize, mode: Binning) -> Vec<usize> {
    match mode {
        Binning::EqualWidth => {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = (hi - lo) / bins as f64;
            values
                .iter()
                .map(|&v| {
                    if width > 0.0 {
                        (((v - lo) / width) as usize).min(bins - 1)
                    } else {
                        0
                    }
                })
                .collect()
        }
        Binning::Quantile => {
            let n = values.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
            let mut out = vec![0; n];
            let mut first_rank = 0;
            for (r, &i) in order.iter().enumerate() {
                if r > 0 && values[i] != values[order[r - 1]] {
                    first_rank = r;
                }
                out[i] = first_rank * bins / n;
            }
            out
        }
    }
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information (nats) between two discrete variables, as
/// `sum p(x,y) ln(p(x,y) / (p(x) p(y)))`.
pub fn mutual_information(x: &[usize], y: &[usize]) -> f64 {
    let n = x.len();
    let kx = x.iter().max().map_or(0, |m| m + 1);
    let ky = y.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; kx * ky];
    let mut px = vec![0usize; kx];
    let mut py = vec![0usize; ky];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * ky + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..kx {
        for b in 0..ky {
            let c = joint[a * ky + b];
            if c > 0 {
                mi += c as f64 / nf * ((c as f64 * nf) / (px[a] as f64 * py[b] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Discrete entropy (nats) of labels.
pub fn discrete_entropy(x: &[usize]) -> f64 {
    let k = x.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &v in x {
        counts[v] += 1;
    }
    entropy(&counts, x.len())
}

/// Mean over non-constant factors of the gap between the two largest
/// latent-factor mutual informations, normalized by the factor's entropy.
/// `latents` is `N x d` (d >= 2), `factors` is `N x k`.
pub fn mig(latents: &[Vec<f64>], factors: &[Vec<bool>], bins: usize, mode: Binning) -> Result<f64> {
    let n = latents.len();
    if n == 0 || factors.len() != n {
        return Err(Error::invalid("latents and factors must be non-empty and equally long"));
    }
    if bins < 2 || n < bins {
        return Err(Error::invalid(format!("need at least {bins} samples and 2 bins")));
    }
    let d = latents[0].len();
    let k = factors[0].len();
    if d < 2 || latents.iter().any(|r| r.len() != d) || factors.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("ragged input or fewer than two latent dimensions"));
    }
    let codes: Vec<Vec<usize>> = (0..d)
        .map(|j| discretize(&latents.iter().map(|r| r[j]).collect::<Vec<_>>(), bins, mode))
        .collect();
    let mut gaps = Vec::new();
    for f in 0..k {
        let fac: Vec<usize> = factors.iter().map(|r| r[f] as usize).collect();
        let h = discrete_entropy(&fac);
        if h <= 0.0 {
            continue;
        }
        let mut mis: Vec<f64> = codes.iter().map(|c| mutual_information(c, &fac)).collect();
        mis.sort_by(|a, b| b.total_cmp(a));
        gaps.push(((mis[0] - mis[1]) / h).clamp(0.0, 1.0));
    }
    if gaps.is_empty() {
        return Err(Error::invalid("every factor is constant"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}
