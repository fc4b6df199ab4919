use super::*;
use crate::dvae::{normal_tensor, Architecture, DVAEParams};
use crate::image::{images_to_tensor, Image};
use crate::nn::{check_gradients, AdamConfig};
use crate::seed::rng_for;
use crate::synthgen::{generate_change_pairs, generate_split, SynthConfig};
use proptest::prelude::*;
use tch::nn::VarStore;
use tch::Device;

fn two_dim() -> DVAEParams {
    DVAEParams {
        beta_y: 1.0,
        beta_x: 1.0,
        alpha: 2.0,
        n_y: 2,
        n_x: 2,
    }
}

struct Toy {
    vs: VarStore,
    model: Dvae,
    d: Discriminator,
    cd: CdModel,
}

fn toy(kind: Kind) -> Toy {
    tch::manual_seed(11);
    let mut vs = VarStore::new(Device::Cpu);
    let model = Dvae::build(&vs.root(), Architecture::toy(10), two_dim()).unwrap();
    let mut d = Discriminator::new(Device::Cpu, toy_realism_discriminator()).unwrap();
    let mut cd = CdModel::build(Device::Cpu, Architecture::toy(10), 2, CDTrainParams::default()).unwrap();
    if kind == Kind::Double {
        vs.double();
        d.vs.double();
        cd.vs.double();
    }
    cd.freeze();
    Toy { vs, model, d, cd }
}

fn synth_images(n: usize, seed: u64) -> (Vec<Image>, Vec<i64>) {
    let ds = generate_split(&SynthConfig::default(), 3, 1, seed).unwrap();
    let imgs = ds.iter().cycle().take(n).map(|d| d.image.clone()).collect();
    let ys = ds.iter().cycle().take(n).map(|d| d.class_id as i64).collect();
    (imgs, ys)
}

#[test]
fn identical_latents_give_identical_mixes() {
    let z = [0.3, -1.2, 4.0];
    let m = build_mixed_pair(&z, &z, &mut rng_for(1, &[])).unwrap();
    assert_eq!(m.z_pa, m.z_pb);
}

#[test]
fn differing_dimension_takes_each_side() {
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [10.0, 11.0, 12.0, 13.0];
    let mut rng = rng_for(2, &[]);
    for _ in 0..100 {
        let m = build_mixed_pair(&a, &b, &mut rng).unwrap();
        assert_eq!(m.z_pa[m.j], a[m.j]);
        assert_eq!(m.z_pb[m.j], b[m.j]);
    }
}

#[test]
fn shared_source_frequency_is_half() {
    let a = [0.0; 8];
    let b = [1.0; 8];
    let mut rng = rng_for(3, &[]);
    let (mut from_a, mut shared) = (0usize, 0usize);
    for _ in 0..10_000 {
        let m = build_mixed_pair(&a, &b, &mut rng).unwrap();
        if m.j != 5 {
            shared += 1;
            from_a += (m.z_pa[5] == 0.0) as usize;
        }
    }
    let f = from_a as f64 / shared as f64;
    assert!((f - 0.5).abs() <= 0.02, "{f}");
}

#[test]
fn batched_mix_matches_scalar() {
    let za: Vec<f64> = (0..12).map(|v| v as f64).collect();
    let zb: Vec<f64> = (0..12).map(|v| -(v as f64) - 1.0).collect();
    let ta = Tensor::from_slice(&za).reshape([3, 4]);
    let tb = Tensor::from_slice(&zb).reshape([3, 4]);
    let mut rng = rng_for(4, &[]);
    let plans: Vec<MixPlan> = (0..3).map(|_| MixPlan::draw(&mut rng, 4)).collect();
    let (pa, pb) = mix_latents(&ta, &tb, &plans);
    let mut rng = rng_for(4, &[]);
    for r in 0..3 {
        let m = build_mixed_pair(&za[r * 4..r * 4 + 4], &zb[r * 4..r * 4 + 4], &mut rng).unwrap();
        assert_eq!(Vec::<f64>::try_from(pa.get(r as i64)).unwrap(), m.z_pa);
        assert_eq!(Vec::<f64>::try_from(pb.get(r as i64)).unwrap(), m.z_pb);
    }
}

#[test]
fn scale_is_one_for_uniform_differences() {
    let za = Tensor::from_slice(&[0.0f64, 0.0, 0.0, 0.0]).reshape([1, 4]);
    let zb = Tensor::from_slice(&[0.5f64, -0.5, 0.5, -0.5]).reshape([1, 4]);
    let plans = [MixPlan { j: 2, from_a: vec![true, false, true, true] }];
    let (pa, pb) = mix_latents(&za, &zb, &plans);
    let s = scale_factor(&pa, &pb, &za, &zb, 4).double_value(&[0]);
    assert!((s - 1.0).abs() < 1e-12, "{s}");
}

#[test]
fn degenerate_scales_are_zero() {
    let za = Tensor::from_slice(&[1.0f64, 2.0]).reshape([1, 2]);
    assert_eq!(scale_factor(&za, &za, &za, &za, 2).double_value(&[0]), 0.0);
    // Differing dimension has no difference, others do.
    let zb = Tensor::from_slice(&[1.0f64, 5.0]).reshape([1, 2]);
    let plans = [MixPlan { j: 0, from_a: vec![true, true] }];
    let (pa, pb) = mix_latents(&za, &zb, &plans);
    assert_eq!(scale_factor(&pa, &pb, &za, &zb, 2).double_value(&[0]), 0.0);
}

#[test]
fn certain_critics_give_zero_loss() {
    let zeros = Tensor::zeros([5], (Kind::Double, Device::Cpu));
    let scale = Tensor::from_slice(&[0.5f64, 1.0, 2.0, 0.0, 8.0]);
    let l = combine_terms(&zeros, &zeros, &zeros, &scale, &CondParams::default());
    assert_eq!(l.total.double_value(&[]), 0.0);
}

#[test]
fn d_loss_vanishes_when_perfect() {
    let real = Tensor::from_slice(&[-50.0f64, 50.0, -40.0, 40.0]).reshape([2, 2]);
    let fake = Tensor::from_slice(&[50.0f64, -50.0]).reshape([1, 2]);
    assert!(d_loss(&real, &fake).double_value(&[]) < 1e-6);
}

#[test]
fn label_encoding_is_real_one_fake_zero() {
    assert_eq!((REAL, FAKE), (1, 0));
    // Confident "real" logits on the fake row are penalized.
    let real = Tensor::from_slice(&[0.0f64, 9.0]).reshape([1, 2]);
    assert!(d_loss(&real, &real).double_value(&[]) > 4.0);
}

#[test]
fn cd_is_symmetric_and_bounded() {
    let t = toy(Kind::Float);
    let a = Tensor::rand([6, 1, 32, 32], (Kind::Float, Device::Cpu));
    let b = Tensor::rand([6, 1, 32, 32], (Kind::Float, Device::Cpu));
    let ab = t.cd.predict(&a, &b);
    let ba = t.cd.predict(&b, &a);
    assert!(ab.equal(&ba));
    assert!(ab.min().double_value(&[]) >= 0.0 && ab.max().double_value(&[]) <= 1.0);
}

#[test]
fn conditioning_gradients_match_finite_differences() {
    let t = toy(Kind::Double);
    let (imgs, _) = synth_images(6, 5);
    let x = images_to_tensor(&imgs, Kind::Double);
    let mut rng = rng_for(6, &[]);
    let eps_y = normal_tensor(&mut rng, 6, 2, Kind::Double);
    let eps_x = normal_tensor(&mut rng, 6, 2, Kind::Double);
    let perm = crate::batch::random_derangement(6, &mut rng).unwrap();
    let plans: Vec<MixPlan> = (0..6).map(|_| MixPlan::draw(&mut rng, 2)).collect();
    let p = CondParams { alpha_r: 0.7, alpha_p: 1.3, n_y: 2 };

    let loss = |scale: Option<&Tensor>| {
        let (q_y, q_x) = t.model.encode(&x, true);
        let z_y = q_y.sample(&eps_y);
        let z_x = q_x.sample(&eps_x);
        let idx = Tensor::from_slice(&perm.iter().map(|&i| i as i64).collect::<Vec<_>>());
        let z_yb = z_y.index_select(0, &idx);
        let (z_pa, z_pb) = mix_latents(&z_y, &z_yb, &plans);
        let z_xb = z_x.index_select(0, &idx);
        let x_pa = t.model.decode(&z_pa, &z_xb, true);
        let x_pb = t.model.decode(&z_pb, &z_xb, true);
        let s = scale.map(|s| s.shallow_clone()).unwrap_or_else(|| scale_factor(&z_pa, &z_pb, &z_y, &z_yb, 2));
        (conditioning_loss_scaled(&x_pa, &x_pb, &s, &t.d, &t.cd, &p).total, s)
    };
    let (l, scale) = loss(None);
    assert!(scale.abs().sum(Kind::Double).double_value(&[]) > 0.0);
    let params: Vec<Tensor> = {
        let mut v: Vec<(String, Tensor)> = t.vs.variables().into_iter().filter(|(_, t)| t.requires_grad()).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.into_iter().map(|x| x.1).collect()
    };
    let mut opt = Adam::new(&t.vs, AdamConfig::default());
    opt.zero_grad();
    l.backward();
    let gc = check_gradients(
        &params,
        || tch::no_grad(|| loss(Some(&scale)).0.double_value(&[])),
        4,
        1e-6,
        &mut rng_for(7, &[]),
    );
    assert!(gc.rel_error() < 1e-3, "{}", gc.rel_error());
}

#[test]
fn critics_receive_no_gradient() {
    let mut t = toy(Kind::Float);
    let (imgs, ys) = synth_images(8, 8);
    let x = images_to_tensor(&imgs, Kind::Float);
    let y = Tensor::from_slice(&ys);
    let mut rng = rng_for(9, &[]);
    let noise = Noise::draw(&mut rng, 8, &t.model.params, Kind::Float);
    let out = t.model.forward_loss(&x, &y, &noise, true);
    let perm = crate::batch::random_derangement(8, &mut rng).unwrap();
    let plans: Vec<MixPlan> = (0..8).map(|_| MixPlan::draw(&mut rng, 2)).collect();
    let pass = synthesize_pairs(&t.model, &out, &perm, &plans, true);
    t.d.vs.freeze();
    let cl = conditioning_loss(
        &pass.x_pa, &pass.x_pb, &pass.z_pa, &pass.z_pb, &pass.z_ya, &pass.z_yb, &t.d, &t.cd,
        &CondParams { n_y: 2, ..Default::default() },
    );
    cl.total.backward();
    t.d.vs.unfreeze();
    let grad_norm = |vs: &VarStore| -> f64 {
        vs.variables()
            .values()
            .map(|v| {
                let g = v.grad();
                if g.defined() {
                    g.abs().sum(Kind::Double).double_value(&[])
                } else {
                    0.0
                }
            })
            .sum()
    };
    assert_eq!(grad_norm(&t.d.vs), 0.0);
    assert_eq!(grad_norm(&t.cd.vs), 0.0);
    assert!(grad_norm(&t.vs) > 0.0);
}

#[test]
fn residual_latent_comes_from_b() {
    let t = toy(Kind::Float);
    let (imgs, ys) = synth_images(4, 10);
    let x = images_to_tensor(&imgs, Kind::Float);
    let mut rng = rng_for(1, &[]);
    let noise = Noise::draw(&mut rng, 4, &t.model.params, Kind::Float);
    let out = t.model.forward_loss(&x, &Tensor::from_slice(&ys), &noise, true);
    let perm = vec![2, 3, 0, 1];
    let plans: Vec<MixPlan> = (0..4).map(|_| MixPlan::draw(&mut rng, 2)).collect();
    let pass = synthesize_pairs(&t.model, &out, &perm, &plans, true);
    for (i, &j) in perm.iter().enumerate() {
        assert!(pass.z_xb.get(i as i64).equal(&out.z_x.get(j as i64)));
    }
}

#[test]
fn vaece_step_updates_model_and_d_only() {
    let mut t = toy(Kind::Float);
    let (imgs, ys) = synth_images(8, 12);
    let x = images_to_tensor(&imgs, Kind::Float);
    let y = Tensor::from_slice(&ys);
    let snapshot = |vs: &VarStore| -> Vec<Tensor> {
        let mut v: Vec<_> = vs.variables().into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.into_iter().map(|(_, t)| t.copy()).collect()
    };
    let (m0, d0, c0) = (snapshot(&t.vs), snapshot(&t.d.vs), snapshot(&t.cd.vs));
    let mut opt = Adam::new(&t.vs, AdamConfig::default());
    let mut d_opt = Adam::new(&t.d.vs, AdamConfig::default());
    let mut rng = rng_for(13, &[]);
    let noise = Noise::draw(&mut rng, 8, &t.model.params, Kind::Float);
    let cond = CondParams { n_y: 2, ..Default::default() };
    let b = vaece_train_step(&t.model, &mut opt, &mut t.d, &mut d_opt, &t.cd, &x, &y, &noise, &cond, &mut rng).unwrap();
    assert!(b.is_finite() && b.d_loss > 0.0);
    assert!(b.mean_scale >= 0.0 && b.mean_scale <= 2.0);
    let changed = |a: &[Tensor], b: &[Tensor]| a.iter().zip(b).any(|(x, y)| !x.equal(y));
    assert!(changed(&m0, &snapshot(&t.vs)));
    assert!(changed(&d0, &snapshot(&t.d.vs)));
    assert!(!changed(&c0, &snapshot(&t.cd.vs)));
}

#[test]
fn d_learns_real_from_decoded() {
    tch::manual_seed(21);
    let vs = VarStore::new(Device::Cpu);
    let dec = Dvae::build(&vs.root(), Architecture::toy(10), two_dim()).unwrap();
    let d = Discriminator::new(Device::Cpu, realism_discriminator()).unwrap();
    let mut opt = Adam::new(&d.vs, AdamConfig::default());
    let (imgs, _) = synth_images(400, 14);
    let real_all = images_to_tensor(&imgs, Kind::Float);
    let fake_batch = |seed: u64, n: usize| {
        let mut rng = rng_for(seed, &[]);
        let z = normal_tensor(&mut rng, n, 4, Kind::Float);
        tch::no_grad(|| dec.decode(&z.narrow(1, 0, 2), &z.narrow(1, 2, 2), false))
    };
    let b = 8;
    for step in 0..500u64 {
        let start = (step as i64 * b) % 320;
        let real = real_all.narrow(0, start, b);
        d_train_step(&d, &mut opt, &real, &fake_batch(step, b as usize));
    }
    let acc = d_accuracy(&d, &real_all.narrow(0, 320, 80), &fake_batch(10_000, 80));
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn cd_accuracy_is_batch_invariant() {
    let t = toy(Kind::Float);
    let pairs = generate_change_pairs(&SynthConfig::default(), 40, 3).unwrap();
    let pt = PairTensors::from_pairs(&pairs, Kind::Float);
    let by_row: f64 = (0..pairs.len() as i64)
        .map(|i| {
            let p = t.cd.predict(&pt.a.narrow(0, i, 1), &pt.b.narrow(0, i, 1)).double_value(&[0]);
            ((p >= 0.5) == pairs[i as usize].label) as u8 as f64
        })
        .sum::<f64>()
        / pairs.len() as f64;
    assert_eq!(cd_accuracy(&t.cd, &pt, 7), by_row);
    assert_eq!(cd_accuracy(&t.cd, &pt, 64), by_row);
}

#[test]
fn cd_checkpoint_round_trip() {
    let t = toy(Kind::Float);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cd.ot");
    t.cd.save(&path, 17, 5, None).unwrap();
    let (back, step) = CdModel::load(&path, Device::Cpu).unwrap();
    assert_eq!(step, 17);
    let a = Tensor::rand([3, 1, 32, 32], (Kind::Float, Device::Cpu));
    let b = Tensor::rand([3, 1, 32, 32], (Kind::Float, Device::Cpu));
    assert!(t.cd.predict(&a, &b).equal(&back.predict(&a, &b)));
}

#[test]
fn cd_training_reduces_pair_loss() {
    tch::manual_seed(5);
    let cd = CdModel::build(Device::Cpu, Architecture::toy(10), 4, CDTrainParams::default()).unwrap();
    let mut opt = Adam::new(&cd.vs, AdamConfig::default());
    let (imgs, ys) = synth_images(64, 15);
    let pairs = generate_change_pairs(&SynthConfig::default(), 64, 4).unwrap();
    let pt = PairTensors::from_pairs(&pairs, Kind::Float);
    let cfg = CdTrainConfig { steps: 60, batch: 16, pair_batch: 8, seed: 1 };
    let mut curve = Vec::new();
    train_cd(&cd, &mut opt, &images_to_tensor(&imgs, Kind::Float), &Tensor::from_slice(&ys), &pt, &cfg, |_, b| {
        curve.push(b.total)
    })
    .unwrap();
    assert_eq!(curve.len(), 60);
    let head: f64 = curve[..10].iter().sum();
    let tail: f64 = curve[50..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

proptest! {
    #[test]
    fn mixes_differ_in_at_most_one_dimension(
        a in prop::collection::vec(-3.0f64..3.0, 1..9),
        b in prop::collection::vec(-3.0f64..3.0, 9),
        seed in any::<u64>(),
    ) {
        let b = &b[..a.len()];
        let m = build_mixed_pair(&a, b, &mut rng_for(seed, &[])).unwrap();
        let differ = m.z_pa.iter().zip(&m.z_pb).filter(|(x, y)| x != y).count();
        prop_assert!(differ <= 1);
    }

    #[test]
    fn scale_stays_in_range(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
        seed in any::<u64>(),
    ) {
        let ta = Tensor::from_slice(&a).reshape([1, 8]);
        let tb = Tensor::from_slice(&b).reshape([1, 8]);
        let plans = [MixPlan::draw(&mut rng_for(seed, &[]), 8)];
        let (pa, pb) = mix_latents(&ta, &tb, &plans);
        let s = scale_factor(&pa, &pb, &ta, &tb, 8).double_value(&[0]);
        prop_assert!((0.0..=8.0 + 1e-9).contains(&s));
    }
}
