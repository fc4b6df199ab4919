//! Explanation and representation quality metrics.

mod eac;
mod mig;

use linfa::prelude::*;
use linfa_logistic::MultiLogisticRegression;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use tch::Kind;

use crate::dvae::{Dvae, Noise};
use crate::error::{Error, Result};
use crate::explain::{explain, select_exemplar, Bundle, ExemplarPool, GraphParams, Method, Target};
use crate::image::{images_to_tensor, Image};
use crate::seed::rng_for;
use crate::synthgen::{EacPairSpec, GroundTruth, SynthConfig, SyntheticDatapoint};

pub use eac::{brute_force_alignment, dtw_align, dtw_from_costs, eac, eac_against, state_cost, EACConfig};
pub use mig::{discrete_entropy, discretize, mig, mutual_information, Binning, DEFAULT_BINS};

/// Version tag written into evaluation reports.
pub const REPORT_VERSION: u32 = 1;

pub const PROBE_ALPHA: f64 = 1.0;
pub const PROBE_MAX_ITER: u64 = 1000;

fn to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::invalid(format!("ragged feature rows: {e}")))
}

/// Accuracy on the test rows of a multinomial logistic regression fit on
/// the train rows (L2 weight `PROBE_ALPHA`).
pub fn probe_accuracy(train_x: &[Vec<f64>], train_y: &[usize], test_x: &[Vec<f64>], test_y: &[usize]) -> Result<f64> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() || test_x.is_empty() {
        return Err(Error::invalid("probe features and labels must be non-empty and aligned"));
    }
    let train = Dataset::new(to_array(train_x)?, Array1::from_vec(train_y.to_vec()));
    let model = MultiLogisticRegression::default()
        .alpha(PROBE_ALPHA)
        .max_iterations(PROBE_MAX_ITER)
        .fit(&train)
        .map_err(|e| Error::invalid(format!("probe fit failed: {e}")))?;
    let pred = model.predict(&to_array(test_x)?);
    let hits = pred.iter().zip(test_y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test_y.len() as f64)
}

/// Images with class labels and, for synthetic data, concept factors.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub factors: Option<Vec<Vec<bool>>>,
}

impl LabeledImages {
    pub fn from_synthetic(points: &[SyntheticDatapoint], n_lines: usize) -> LabeledImages {
        LabeledImages {
            images: points.iter().map(|p| p.image.clone()).collect(),
            labels: points.iter().map(|p| p.class_id).collect(),
            factors: Some(points.iter().map(|p| p.concept_vector(n_lines)).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    /// Absent for data without concept factors.
    pub mig: Option<f64>,
    pub rec: f64,
    pub kl_y: f64,
    pub kl_x: f64,
    pub acc: f64,
    pub l_acc_y: f64,
    pub l_acc_x: f64,
}

fn rows(t: &tch::Tensor) -> Result<Vec<Vec<f64>>> {
    let t = t.to_kind(Kind::Double).to_device(tch::Device::Cpu);
    let w = t.size()[1] as usize;
    let flat = Vec::<f64>::try_from(t.reshape([-1]))?;
    Ok(flat.chunks(w.max(1)).map(<[f64]>::to_vec).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// ELBO terms, classifier accuracy, linear-probe accuracies and MIG of a
/// model. ELBO terms are per-image means over the test split in evaluation
/// mode with noise drawn from `seed`.
pub fn representation_report(
    model: &Dvae,
    train: &LabeledImages,
    test: &LabeledImages,
    batch: usize,
    seed: u64,
) -> Result<RepresentationReport> {
    if test.is_empty() || train.is_empty() {
        return Err(Error::invalid("representation report needs train and test data"));
    }
    let batch = batch.max(1);
    let mut rng = rng_for(seed, &[0xE7A1]);
    let (mut rec, mut kl_y, mut kl_x) = (0.0, 0.0, 0.0);
    tch::no_grad(|| {
        for (imgs, labels) in test.images.chunks(batch).zip(test.labels.chunks(batch)) {
            let x = images_to_tensor(imgs, model.kind()).to_device(model.device());
            let y = tch::Tensor::from_slice(&labels.iter().map(|&l| l as i64).collect::<Vec<_>>()).to_device(model.device());
            let noise = Noise::draw(&mut rng, imgs.len(), &model.params, model.kind());
            let out = model.forward_loss(&x, &y, &noise, false);
            let w = imgs.len() as f64;
            rec += out.rec.double_value(&[]) * w;
            kl_y += out.kl_y.double_value(&[]) * w;
            kl_x += out.kl_x.double_value(&[]) * w;
        }
    });
    let n = test.len() as f64;
    let (mu_y, mu_x) = model.encode_means(&test.images, batch);
    let probs = rows(&tch::no_grad(|| model.class_probs(&mu_y)))?;
    let acc = probs.iter().zip(&test.labels).filter(|(p, &y)| argmax(p) == y).count() as f64 / n;
    let (test_y, test_x) = (rows(&mu_y)?, rows(&mu_x)?);
    let (tr_y, tr_x) = model.encode_means(&train.images, batch);
    let l_acc_y = probe_accuracy(&rows(&tr_y)?, &train.labels, &test_y, &test.labels)?;
    let l_acc_x = probe_accuracy(&rows(&tr_x)?, &train.labels, &test_x, &test.labels)?;
    let mig = match &test.factors {
        Some(f) => Some(mig(&test_y, f, DEFAULT_BINS, Binning::EqualWidth)?),
        None => None,
    };
    Ok(RepresentationReport {
        mig,
        rec: rec / n,
        kl_y: kl_y / n,
        kl_x: kl_x / n,
        acc,
        l_acc_y,
        l_acc_x,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEac {
    pub method: Method,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over pairs.
    pub std: f64,
}

impl MethodEac {
    pub fn from_values(method: Method, values: Vec<f64>) -> MethodEac {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MethodEac {
            method,
            values,
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EacReport {
    pub methods: Vec<MethodEac>,
    /// Lowest mean over methods; the model-selection score.
    pub selection_score: f64,
}

impl EacReport {
    pub fn from_methods(methods: Vec<MethodEac>) -> Result<EacReport> {
        let selection_score = methods
            .iter()
            .map(|m| m.mean)
            .fold(f64::INFINITY, f64::min);
        if methods.is_empty() {
            return Err(Error::invalid("no methods evaluated"));
        }
        Ok(EacReport {
            methods,
            selection_score,
        })
    }

    pub fn mean(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.mean)
    }
}

/// Explains `a` against `b` for each pair and method and scores the states
/// against the ground truth from `a` to `b`'s concepts.
pub fn eac_report(
    bundle: &Bundle<'_>,
    pairs: &[EacPairSpec],
    synth: &SynthConfig,
    methods: &[Method],
    params: &GraphParams,
    cfg: &EACConfig,
) -> Result<EacReport> {
    let mut values = vec![Vec::with_capacity(pairs.len()); methods.len()];
    for spec in pairs {
        let (a, b) = spec.render(synth)?;
        let gt = GroundTruth::build(synth, &a, b.concepts)?;
        for (mi, &m) in methods.iter().enumerate() {
            let e = explain(&a.image, &Target::Image(b.image.clone()), bundle, m, params)?;
            values[mi].push(eac_against(&e.states, &gt, cfg.epsilon)?);
        }
    }
    EacReport::from_methods(
        methods
            .iter()
            .zip(values)
            .map(|(&m, v)| MethodEac::from_values(m, v))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantExperiment {
    pub target_class: usize,
    pub variant: usize,
    pub near_classes: Vec<usize>,
    /// Share of near-class queries whose exemplar is the designated variant.
    pub p_near: f64,
    pub p_other: f64,
    pub n_near: usize,
    pub n_other: usize,
    /// Queries without any exemplar above the threshold.
    pub n_skipped: usize,
}

/// The target-class variant sharing the most lines with the near classes.
pub fn designated_variant(synth: &SynthConfig, target: usize, near: &[usize]) -> Result<usize> {
    let n_var = synth
        .classes
        .get(target)
        .ok_or_else(|| Error::invalid(format!("no class {target}")))?
        .variants
        .len();
    let mut best = (0usize, 0usize);
    for v in 0..n_var {
        let cv = synth.variant(target, v)?;
        let mut shared = 0;
        for &c in near {
            for w in 0..synth.classes[c].variants.len() {
                shared += cv.intersect(synth.variant(c, w)?).len();
            }
        }
        if v == 0 || shared > best.1 {
            best = (v, shared);
        }
    }
    Ok(best.0)
}

/// How often queries from `near` classes and from all other classes pick
/// the designated variant as their `target`-class exemplar. Queries of the
/// target class itself are not used.
#[allow(clippy::too_many_arguments)]
pub fn variant_selection(
    queries: &[(Vec<f64>, usize)],
    pool: &ExemplarPool,
    pool_class: &[usize],
    pool_variant: &[usize],
    target: usize,
    variant: usize,
    near: &[usize],
    t: f64,
) -> Result<VariantExperiment> {
    if pool_class.len() != pool.len() || pool_variant.len() != pool.len() {
        return Err(Error::invalid("pool metadata does not match the pool"));
    }
    let (mut hit_near, mut n_near, mut hit_other, mut n_other, mut skipped) = (0, 0, 0, 0, 0);
    for (mu, class) in queries {
        if *class == target {
            continue;
        }
        let idx = match select_exemplar(mu, pool, target, t) {
            Ok(i) => i,
            Err(Error::NoExemplar { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let hit = pool_class[idx] == target && pool_variant[idx] == variant;
        if near.contains(class) {
            n_near += 1;
            hit_near += hit as usize;
        } else {
            n_other += 1;
            hit_other += hit as usize;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(VariantExperiment {
        target_class: target,
        variant,
        near_classes: near.to_vec(),
        p_near: ratio(hit_near, n_near),
        p_other: ratio(hit_other, n_other),
        n_near,
        n_other,
        n_skipped: skipped,
    })
}

/// Runs the variant experiment with the model's embeddings: the first
/// `n_queries` non-target test points query a pool made of the whole test
/// split.
pub fn exemplar_variant_experiment(
    model: &Dvae,
    test: &[SyntheticDatapoint],
    synth: &SynthConfig,
    n_queries: usize,
    t: f64,
) -> Result<VariantExperiment> {
    let (target, near) = (9, [7usize, 8]);
    let variant = designated_variant(synth, target, &near)?;
    let images: Vec<Image> = test.iter().map(|p| p.image.clone()).collect();
    let pool = ExemplarPool::from_model(model, &images, 256)?;
    let queries: Vec<(Vec<f64>, usize)> = test
        .iter()
        .enumerate()
        .filter(|(_, p)| p.class_id != target)
        .take(n_queries)
        .map(|(i, p)| (pool.mu_y[i].clone(), p.class_id))
        .collect();
    let classes: Vec<usize> = test.iter().map(|p| p.class_id).collect();
    let variants: Vec<usize> = test.iter().map(|p| p.variant_id).collect();
    variant_selection(&queries, &pool, &classes, &variants, target, variant, &near, t)
}

#[cfg(test)]
mod tests;
