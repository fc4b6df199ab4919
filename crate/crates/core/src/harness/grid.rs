use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::config::{GridPoint, GridSpec, ModelType};
use super::train::TrainedModel;
use crate::conditioning::CdModel;
use crate::error::Result;
use crate::explain::{Bundle, Method, ModelCritic};
use crate::metrics::{eac_report, EacReport};
use crate::seed::derive_seed;
use crate::synthgen::{EacPairSpec, SynthConfig};

/// Interpolation methods scored during model selection; graph needs the
/// VAE-CE critics.
pub fn selection_methods(model: ModelType) -> &'static [Method] {
    match model {
        ModelType::VaeCe => &[Method::Smooth, Method::Dim, Method::Graph],
        _ => &[Method::Smooth, Method::Dim],
    }
}

/// eac of a trained model on the validation pairs, with the methods its
/// type supports.
pub fn selection_report(tm: &TrainedModel, cd: Option<&CdModel>, pairs: &[EacPairSpec], synth: &SynthConfig) -> Result<EacReport> {
    let critic = match (&tm.d, cd) {
        (Some(d), Some(cd)) => Some(ModelCritic { d, cd, batch: 64 }),
        _ => None,
    };
    let bundle = Bundle {
        model: &tm.model,
        critic: critic.as_ref().map(|c| c as _),
        pool: None,
    };
    let methods: Vec<Method> = selection_methods(tm.config.model)
        .iter()
        .copied()
        .filter(|&m| m != Method::Graph || critic.is_some())
        .collect();
    eac_report(&bundle, pairs, synth, &methods, &tm.config.graph, &tm.config.eac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub point: GridPoint,
    pub run: usize,
    pub seed: u64,
    /// Minimum over methods of the mean eac.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub point: GridPoint,
    pub mean: f64,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<GridRun>,
    /// One entry per model type with at least one completed run.
    pub selections: Vec<Selection>,
}

fn cmp_points(a: &GridPoint, b: &GridPoint) -> Ordering {
    let key = |p: &GridPoint| [p.beta_y, p.alpha, p.alpha_d, p.alpha_p];
    let ma = ModelType::ALL.iter().position(|&m| m == a.model);
    let mb = ModelType::ALL.iter().position(|&m| m == b.model);
    ma.cmp(&mb).then_with(|| {
        key(a)
            .iter()
            .zip(key(b))
            .map(|(x, y)| x.total_cmp(&y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Mean score per configuration, then the lowest mean per model type.
/// Scores are summed in sorted order so the result does not depend on the
/// order of `runs`; equal means go to the smaller configuration.
pub fn select(runs: &[GridRun]) -> Vec<Selection> {
    let mut points: Vec<GridPoint> = Vec::new();
    for r in runs {
        if r.score.is_some() && !points.iter().any(|p| cmp_points(p, &r.point).is_eq()) {
            points.push(r.point);
        }
    }
    points.sort_by(cmp_points);
    let mut best: Vec<Selection> = Vec::new();
    for p in points {
        let mut scores: Vec<f64> = runs
            .iter()
            .filter(|r| cmp_points(&r.point, &p).is_eq())
            .filter_map(|r| r.score)
            .collect();
        scores.sort_by(f64::total_cmp);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let s = Selection {
            point: p,
            mean,
            completed: scores.len(),
        };
        match best.iter_mut().find(|b| b.point.model == p.model) {
            Some(b) if mean < b.mean => *b = s,
            Some(_) => {}
            None => best.push(s),
        }
    }
    best
}

/// Runs `eval` for every configuration `spec.runs` times. Run seeds derive
/// from `seed`, the configuration index and the run index. Failed runs are
/// recorded and left out of the selection.
pub fn run_grid(
    spec: &GridSpec,
    seed: u64,
    mut eval: impl FnMut(&GridPoint, usize, u64) -> Result<f64>,
    mut progress: impl FnMut(&GridRun),
) -> GridReport {
    let mut runs = Vec::with_capacity(spec.total_runs());
    for (i, p) in spec.configurations().iter().enumerate() {
        for run in 0..spec.runs {
            let s = derive_seed(seed, &[0x6121, i as u64, run as u64]);
            let r = match eval(p, run, s) {
                Ok(v) if v.is_finite() => GridRun {
                    point: *p,
                    run,
                    seed: s,
                    score: Some(v),
                    error: None,
                },
                Ok(v) => GridRun {
                    point: *p,
                    run,
                    seed: s,
                    score: None,
                    error: Some(format!("non-finite score {v}")),
                },
                Err(e) => GridRun {
                    point: *p,
                    run,
                    seed: s,
                    score: None,
                    error: Some(e.to_string()),
                },
            };
            progress(&r);
            runs.push(r);
        }
    }
    let selections = select(&runs);
    GridReport { runs, selections }
}
