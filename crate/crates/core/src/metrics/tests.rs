use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::nn::VarStore;
use tch::Device;

use super::*;
use crate::dvae::{Architecture, DVAEParams};
use crate::synthgen::{generate_eac_pairs, generate_split};

fn toy_model() -> (VarStore, Dvae) {
    tch::manual_seed(5);
    let vs = VarStore::new(Device::Cpu);
    let p = DVAEParams {
        beta_y: 1.0,
        beta_x: 1.0,
        alpha: 1.0,
        n_y: 8,
        n_x: 2,
    };
    let m = Dvae::build(&vs.root(), Architecture::toy(10), p).unwrap();
    (vs, m)
}

fn zero_vars(vs: &VarStore, prefix: &str) {
    tch::no_grad(|| {
        for (name, mut t) in vs.variables() {
            if name.starts_with(prefix) && !name.contains("running_var") {
                let _ = t.zero_();
            }
        }
    });
}

#[test]
fn noise_probe_is_at_chance() {
    let mut rng = crate::seed::rng_for(6, &[]);
    let mut draw = |n: usize| {
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 10).collect();
        (x, y)
    };
    let (tx, ty) = draw(2000);
    let (sx, sy) = draw(2000);
    let acc = probe_accuracy(&tx, &ty, &sx, &sy).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
}

#[test]
fn separable_probe_is_accurate() {
    let mut rng = crate::seed::rng_for(7, &[]);
    let mut draw = |n: usize| {
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| (0..3).map(|k| if k == c { 4.0 } else { 0.0 } + rng.gen_range(-0.5..0.5)).collect())
            .collect();
        (x, y)
    };
    let (tx, ty) = draw(300);
    let (sx, sy) = draw(300);
    assert!(probe_accuracy(&tx, &ty, &sx, &sy).unwrap() > 0.99);
}

#[test]
fn prior_encoder_has_zero_kl_y() {
    let (vs, m) = toy_model();
    zero_vars(&vs, "enc_y.mean");
    zero_vars(&vs, "enc_y.logvar");
    let cfg = SynthConfig::default();
    let pts = generate_split(&cfg, 1, 30, 3).unwrap();
    let data = LabeledImages::from_synthetic(&pts, cfg.n_lines());
    // Every z_y is identical, so the equal-width binning collapses and MIG
    // is zero; the report still has to be well formed.
    let r = representation_report(&m, &data, &data, 64, 1).unwrap();
    assert_eq!(r.kl_y, 0.0);
    assert!(r.kl_x > 0.0 && r.rec > 0.0);
    for v in [r.acc, r.l_acc_y, r.l_acc_x, r.mig.unwrap()] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn method_stats() {
    let m = MethodEac::from_values(Method::Dim, vec![2.5; 4]);
    assert_eq!((m.mean, m.std), (2.5, 0.0));
    let m = MethodEac::from_values(Method::Smooth, vec![1.0, 3.0]);
    assert_eq!((m.mean, m.std), (2.0, 1.0));
    let r = EacReport::from_methods(vec![m, MethodEac::from_values(Method::Dim, vec![1.5])]).unwrap();
    assert_eq!(r.selection_score, 1.5);
    assert!(EacReport::from_methods(vec![]).is_err());
}

#[test]
fn repeated_pair_has_zero_spread() {
    let (_vs, m) = toy_model();
    let cfg = SynthConfig::default();
    let spec = generate_eac_pairs(&cfg, 1, 4)[0];
    let bundle = Bundle {
        model: &m,
        critic: None,
        pool: None,
    };
    let r = eac_report(&bundle, &[spec; 3], &cfg, &[Method::Smooth, Method::Dim], &GraphParams::default(), &EACConfig::default())
        .unwrap();
    for me in &r.methods {
        assert_eq!(me.values.len(), 3);
        assert_eq!(me.std, 0.0);
    }
}

#[test]
fn constant_decoder_eac_has_closed_form() {
    // A decoder that ignores its input turns every explanation into a run
    // of one repeated image c. For a truth order t_0..t_{m-1} the best
    // alignment then costs sum_j d_j + (L - m)^+ min_j d_j + max(L, m) eps,
    // with d_j the squared distance from c to t_j, and eac is its minimum
    // over orders. Smooth and dim differ only through L.
    let (vs, m) = toy_model();
    zero_vars(&vs, "dec.");
    let cfg = SynthConfig::default();
    let pairs = generate_eac_pairs(&cfg, 6, 11);
    let bundle = Bundle {
        model: &m,
        critic: None,
        pool: None,
    };
    let eps = 1e-3;
    let r = eac_report(&bundle, &pairs, &cfg, &[Method::Smooth, Method::Dim], &GraphParams::default(), &EACConfig::default())
        .unwrap();
    let c = Image::from_fn(|_, _| 0.5);
    for (i, spec) in pairs.iter().enumerate() {
        let (a, b) = spec.render(&cfg).unwrap();
        let gt = GroundTruth::build(&cfg, &a, b.concepts).unwrap();
        for me in &r.methods {
            let e = explain(&a.image, &Target::Image(b.image.clone()), &bundle, me.method, &GraphParams::default()).unwrap();
            assert!(e.states.iter().all(|s| *s == c));
            let len = e.states.len();
            let want = gt
                .orders
                .iter()
                .map(|o| {
                    let d: Vec<f64> = gt.images(o).iter().map(|t| state_cost(&c, t, 0.0)).collect();
                    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
                    d.iter().sum::<f64>() + len.saturating_sub(d.len()) as f64 * dmin + len.max(d.len()) as f64 * eps
                })
                .fold(f64::INFINITY, f64::min);
            assert!((me.values[i] - want).abs() < 1e-6 * want.max(1.0), "{} {} vs {want}", me.method, me.values[i]);
        }
    }
}

#[test]
fn designated_variant_shares_lines_with_seven_and_eight() {
    assert_eq!(designated_variant(&SynthConfig::default(), 9, &[7, 8]).unwrap(), 0);
}

#[test]
fn hamming_oracle_picks_shared_variant_for_near_classes() {
    let cfg = SynthConfig::default();
    let test = generate_split(&cfg, 1, 40, 12).unwrap();
    let n = cfg.n_lines();
    let embed = |p: &SyntheticDatapoint| p.concept_vector(n).iter().map(|&b| b as u8 as f64).collect::<Vec<f64>>();
    let pool = ExemplarPool {
        mu_y: test.iter().map(embed).collect(),
        probs: test
            .iter()
            .map(|p| (0..10).map(|c| if c == p.class_id { 1.0 } else { 0.0 }).collect())
            .collect(),
    };
    let queries: Vec<(Vec<f64>, usize)> = test.iter().map(|p| (embed(p), p.class_id)).collect();
    let classes: Vec<usize> = test.iter().map(|p| p.class_id).collect();
    let variants: Vec<usize> = test.iter().map(|p| p.variant_id).collect();
    let r = variant_selection(&queries, &pool, &classes, &variants, 9, 0, &[7, 8], 0.95).unwrap();
    assert_eq!(r.p_near, 1.0);
    assert_eq!(r.n_near + r.n_other + r.n_skipped, queries.iter().filter(|q| q.1 != 9).count());
    assert!((0.0..=1.0).contains(&r.p_other));
}

#[test]
fn model_variant_experiment_partitions_queries() {
    let (_vs, m) = toy_model();
    let cfg = SynthConfig::default();
    let test = generate_split(&cfg, 1, 12, 2).unwrap();
    let r = exemplar_variant_experiment(&m, &test, &cfg, 50, 0.05).unwrap();
    assert_eq!(r.n_near + r.n_other + r.n_skipped, 50);
    assert!((0.0..=1.0).contains(&r.p_near) && (0.0..=1.0).contains(&r.p_other));
}
