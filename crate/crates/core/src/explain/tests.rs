use std::cell::{Cell, RefCell};

use proptest::prelude::*;
use rand::Rng;

use super::*;

/// Writes each latent into one pixel row so decoded states are traceable.
struct RowDecoder {
    calls: Cell<usize>,
    decoded: Cell<usize>,
    seen_mu_x: RefCell<Vec<Vec<f64>>>,
}

impl RowDecoder {
    fn new() -> Self {
        RowDecoder {
            calls: Cell::new(0),
            decoded: Cell::new(0),
            seen_mu_x: RefCell::new(Vec::new()),
        }
    }
}

impl LatentDecoder for RowDecoder {
    fn decode_states(&self, z_y: &[Vec<f64>], mu_x: &[f64]) -> Result<Vec<Image>> {
        self.calls.set(self.calls.get() + 1);
        self.decoded.set(self.decoded.get() + z_y.len());
        self.seen_mu_x.borrow_mut().push(mu_x.to_vec());
        Ok(z_y
            .iter()
            .map(|z| Image::from_fn(|r, c| if r == 0 && c < z.len() { z[c] as f32 } else { 0.0 }))
            .collect())
    }
}

/// Realism depends on the number of latent entries at 0.5 or above; change
/// quality on the number of pixels that moved.
struct CountingCritic;

impl Critic for CountingCritic {
    fn realism(&self, images: &[Image]) -> Result<Vec<f64>> {
        Ok(images
            .iter()
            .map(|im| 1.0 / (1.0 + (0..32).filter(|&c| im.get(0, c) >= 0.5).count() as f64))
            .collect())
    }
    fn change_quality(&self, images: &[Image], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        Ok(pairs
            .iter()
            .map(|&(a, b)| {
                let moved = (0..32).filter(|&c| images[a].get(0, c) != images[b].get(0, c)).count();
                (0.9f64).powi(moved as i32)
            })
            .collect())
    }
}

fn pool(rows: &[(&[f64], &[f64])]) -> ExemplarPool {
    ExemplarPool {
        mu_y: rows.iter().map(|r| r.0.to_vec()).collect(),
        probs: rows.iter().map(|r| r.1.to_vec()).collect(),
    }
}

#[test]
fn own_embedding_is_selected() {
    let p = pool(&[(&[3.0, 3.0], &[0.0, 0.99]), (&[0.5, 0.5], &[0.01, 0.99]), (&[0.0, 0.0], &[0.0, 0.97])]);
    assert_eq!(select_exemplar(&[0.0, 0.0], &p, 1, 0.95).unwrap(), 2);
}

#[test]
fn unreachable_threshold_is_an_error() {
    let p = pool(&[(&[0.0], &[0.2, 0.8]), (&[1.0], &[0.1, 0.9])]);
    match select_exemplar(&[0.0], &p, 1, 0.95) {
        Err(Error::NoExemplar { class, .. }) => assert_eq!(class, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn exemplar_matches_exhaustive_scan() {
    let mut rng = crate::seed::rng_for(7, &[]);
    for _ in 0..5 {
        let mut p = ExemplarPool::default();
        for _ in 0..1000 {
            // Coarse grid values make exact distance ties common.
            p.mu_y.push((0..8).map(|_| rng.gen_range(-2..=2) as f64).collect());
            let hot: f64 = rng.gen_range(0.0..1.0);
            let mut pr = vec![(1.0 - hot) / 9.0; 10];
            pr[rng.gen_range(0..10)] = hot;
            p.probs.push(pr);
        }
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-2..=2) as f64).collect();
        let target = rng.gen_range(0..10);
        let mut cands: Vec<(f64, usize)> = (0..1000)
            .filter(|&i| p.probs[i][target] > 0.95)
            .map(|i| (q.iter().zip(&p.mu_y[i]).map(|(a, b)| (a - b).powi(2)).sum(), i))
            .collect();
        cands.sort_by(|x, y| x.partial_cmp(y).unwrap());
        match (select_exemplar(&q, &p, target, 0.95), cands.first()) {
            (Ok(i), Some(&(_, j))) => assert_eq!(i, j),
            (Err(Error::NoExemplar { .. }), None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn smooth_scalar_states() {
    let s = interp_smooth(&[0.0], &[1.0]).unwrap();
    let got: Vec<f64> = s.iter().map(|z| z[0]).collect();
    for (g, w) in got.iter().zip([0.2, 0.4, 0.6, 0.8, 1.0]) {
        assert!((g - w).abs() < 1e-15);
    }
    assert_eq!(s[4], vec![1.0]);
}

#[test]
fn smooth_identical_endpoints() {
    let a = vec![0.3, -1.2];
    assert!(interp_smooth(&a, &a).unwrap().iter().all(|z| *z == a));
}

#[test]
fn dim_threshold_rule() {
    let (s, c) = interp_dim(&[0.0, 0.0], &[1.5, 0.3], 1.0).unwrap();
    assert_eq!(s, vec![vec![0.0, 0.3], vec![1.5, 0.3]]);
    assert_eq!(c, vec![vec![1], vec![0]]);
    let (s, _) = interp_dim(&[0.0, 0.0], &[0.5, 0.3], 1.0).unwrap();
    assert_eq!(s, vec![vec![0.5, 0.3]]);
    let (s, c) = interp_dim(&[0.0; 5], &[2.0, -3.0, 0.0, 0.1, 1.5], 1.0).unwrap();
    assert_eq!(s.len(), 4);
    assert_eq!(c, vec![vec![3], vec![0], vec![1], vec![4]]);
    let (s, c) = interp_dim(&[0.0; 3], &[2.0, 0.0, 3.0], 1.0).unwrap();
    assert_eq!((s.len(), c[0].clone()), (2, vec![0]));
}

#[test]
fn mismatched_widths_rejected() {
    assert!(interp_smooth(&[0.0], &[0.0, 1.0]).is_err());
    assert!(interp_dim(&[0.0], &[0.0, 1.0], 1.0).is_err());
}

#[test]
fn identical_embeddings_give_query_only() {
    let a = vec![0.1, 0.2, 0.3];
    for m in Method::ALL {
        let dec = RowDecoder::new();
        let e = explain_latents(&a, &a, &[0.0], m, &dec, Some(&CountingCritic), &GraphParams::default()).unwrap();
        assert_eq!((e.n_steps(), e.states.len()), (0, 1));
        assert_eq!(e.latents[0], a);
    }
}

#[test]
fn graph_decodes_each_node_once_and_weights_match() {
    let dec = RowDecoder::new();
    let p = GraphParams::default();
    let a = [0.0, 0.0, 0.0, 0.7];
    let b = [1.0, 0.0, 0.6, 0.2];
    let built = build_interp_graph(&a, &b, &[0.25], &dec, &CountingCritic, &p).unwrap();
    assert_eq!(built.graph.dims, vec![0, 2, 3]);
    assert_eq!((dec.calls.get(), dec.decoded.get()), (1, 8));
    assert_eq!((built.graph.n_nodes(), built.graph.n_edges()), (8, 19));
    // Node {dim0, dim3}: z = (1, 0, 0, 0.2), one entry >= .5, so D = 1/2.
    // From the empty node two pixels move, so CD = .81; k = 2.
    let w = built.graph.weight(0, 0b101).unwrap();
    let want = (0.5 * (1.0 - 0.5) + 1.0 * (1.0 - 0.81)) * 2.0;
    assert!((w - want).abs() < 1e-12, "{w} vs {want}");
}

#[test]
fn graph_and_dim_end_at_the_same_latent() {
    let mut rng = crate::seed::rng_for(21, &[]);
    let p = GraphParams::default();
    let mut checked = 0;
    while checked < 20 {
        let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // The two methods only agree when every dimension enters the graph.
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() <= p.delta_min) {
            continue;
        }
        checked += 1;
        let g = explain_latents(&a, &b, &[0.0], Method::Graph, &RowDecoder::new(), Some(&CountingCritic), &p).unwrap();
        let d = explain_latents(&a, &b, &[0.0], Method::Dim, &RowDecoder::new(), None, &p).unwrap();
        assert_eq!(g.latents.last(), d.latents.last());
        assert_eq!(g.latents.last().unwrap(), &b);
        assert_eq!(g.edge_costs.len(), g.n_steps());
    }
}

#[test]
fn graph_keeps_tiny_differences_at_query_values() {
    let a = [0.0, 0.0, 0.0];
    let b = [1.0, 0.0005, -2.0];
    let e = explain_latents(&a, &b, &[], Method::Graph, &RowDecoder::new(), Some(&CountingCritic), &GraphParams::default())
        .unwrap();
    assert_eq!(e.latents.last().unwrap(), &vec![1.0, 0.0, -2.0]);
}

#[test]
fn residual_latent_is_shared_by_all_states() {
    let dec = RowDecoder::new();
    let mu_x = vec![0.123456789, -2.5];
    for m in Method::ALL {
        explain_latents(&[0.0, 1.0], &[2.0, -1.0], &mu_x, m, &dec, Some(&CountingCritic), &GraphParams::default())
            .unwrap();
    }
    assert!(dec.seen_mu_x.borrow().iter().all(|m| m.iter().zip(&mu_x).all(|(x, y)| x.to_bits() == y.to_bits())));
}

#[test]
fn graph_needs_critic() {
    let r = explain_latents(&[0.0], &[1.0], &[], Method::Graph, &RowDecoder::new(), None, &GraphParams::default());
    assert!(r.is_err());
}

#[test]
fn significant_only_shrinks_graph() {
    let p = GraphParams {
        significant_only: true,
        ..GraphParams::default()
    };
    let built = build_interp_graph(&[0.0; 3], &[2.0, 0.5, -1.5], &[], &RowDecoder::new(), &CountingCritic, &p).unwrap();
    assert_eq!(built.graph.dims, vec![0, 2]);
}

#[test]
fn second_class_by_probability() {
    assert_eq!(second_most_likely(&[0.1, 0.6, 0.3]).unwrap(), 2);
    assert_eq!(second_most_likely(&[0.5, 0.25, 0.25]).unwrap(), 1);
}

#[test]
fn method_tags_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.tag()));
    }
}

#[test]
fn bad_params_rejected() {
    assert!(GraphParams { t: 0.0, ..GraphParams::default() }.validate().is_err());
    assert!(GraphParams { beta_g: -1.0, ..GraphParams::default() }.validate().is_err());
}

#[test]
fn model_explanation_with_toy_networks() {
    use crate::conditioning::{toy_realism_discriminator, CDTrainParams};
    use crate::dvae::{Architecture, DVAEParams};
    tch::manual_seed(3);
    let vs = tch::nn::VarStore::new(tch::Device::Cpu);
    let dp = DVAEParams {
        beta_y: 1.0,
        beta_x: 1.0,
        alpha: 1.0,
        n_y: 3,
        n_x: 2,
    };
    let m = Dvae::build(&vs.root(), Architecture::toy(10), dp).unwrap();
    let d = Discriminator::new(tch::Device::Cpu, toy_realism_discriminator()).unwrap();
    let cd = CdModel::build(tch::Device::Cpu, Architecture::toy(10), 4, CDTrainParams::default()).unwrap();
    let critic = ModelCritic { d: &d, cd: &cd, batch: 16 };
    let imgs: Vec<Image> = (0..12).map(|i| Image::from_fn(|r, c| ((r * 7 + c * i) % 5) as f32 / 4.0)).collect();
    let mut pool = ExemplarPool::from_model(&m, &imgs, 5).unwrap();
    // Make every entry a confident member of class 4.
    for p in &mut pool.probs {
        *p = (0..10).map(|c| if c == 4 { 0.99 } else { 0.001 }).collect();
    }
    let bundle = Bundle {
        model: &m,
        critic: Some(&critic),
        pool: Some(&pool),
    };
    let p = GraphParams::default();
    let e = explain(&imgs[0], &Target::Class(4), &bundle, Method::Graph, &p).unwrap();
    assert_eq!(e.exemplar, Some(0));
    assert_eq!(e.n_steps(), 0);
    let e = explain(&imgs[0], &Target::Image(imgs[5].clone()), &bundle, Method::Graph, &p).unwrap();
    assert_eq!(e.states.len(), e.latents.len());
    let alone = ExemplarPool::from_model(&m, &imgs[5..6], 1).unwrap();
    assert_eq!(e.latents.last().unwrap(), &alone.mu_y[0]);
    let e = explain(&imgs[3], &Target::Image(imgs[5].clone()), &bundle, Method::Smooth, &p).unwrap();
    assert_eq!(e.states.len(), 6);
    let q = explain(&imgs[3], &Target::Class(7), &bundle, Method::Dim, &p);
    assert!(matches!(q, Err(Error::NoExemplar { .. })));
}

proptest! {
    #[test]
    fn smooth_states_are_convex(
        ab in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = ab.into_iter().unzip();
        for z in interp_smooth(&a, &b).unwrap() {
            for i in 0..a.len() {
                prop_assert!(z[i] >= a[i].min(b[i]) - 1e-12 && z[i] <= a[i].max(b[i]) + 1e-12);
            }
        }
    }

    #[test]
    fn dim_ends_at_target(
        ab in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..8)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = ab.into_iter().unzip();
        let (s, c) = interp_dim(&a, &b, 1.0).unwrap();
        let n_sig = (0..a.len()).filter(|&i| (a[i] - b[i]).abs() > 1.0).count();
        let minor = (0..a.len()).any(|i| (a[i] - b[i]).abs() <= 1.0 && a[i] != b[i]);
        prop_assert_eq!(s.len(), n_sig + minor as usize);
        prop_assert_eq!(c.len(), s.len());
        if let Some(last) = s.last() {
            prop_assert_eq!(last, &b);
        }
    }
}
