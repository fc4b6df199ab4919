use super::*;
use crate::nn::{check_gradients, cross_entropy, grad_reverse_scaled, AdamConfig};
use crate::seed::rng_for;
use crate::synthgen::{generate_split, SynthConfig};
use tch::nn::VarStore;

fn toy(params: DVAEParams, kind: Kind) -> (VarStore, Dvae) {
    tch::manual_seed(3);
    let mut vs = VarStore::new(Device::Cpu);
    let m = Dvae::build(&vs.root(), Architecture::toy(10), params).unwrap();
    if kind == Kind::Double {
        vs.double();
    }
    (vs, m)
}

fn toy_batch(n: usize, kind: Kind) -> (Tensor, Tensor) {
    let cfg = SynthConfig::default();
    let ds = generate_split(&cfg, 7, 1, 11).unwrap();
    let imgs: Vec<Image> = ds.iter().cycle().take(n).map(|d| d.image.clone()).collect();
    let ys: Vec<i64> = ds.iter().cycle().take(n).map(|d| d.class_id as i64).collect();
    (images_to_tensor(&imgs, kind), Tensor::from_slice(&ys))
}

fn two_dim() -> DVAEParams {
    DVAEParams {
        beta_y: 1.5,
        beta_x: 0.7,
        alpha: 3.0,
        n_y: 2,
        n_x: 2,
    }
}

#[test]
fn standard_widths() {
    let arch = Architecture::standard(10);
    assert_eq!(arch.decoder.layers[0], Layer::Dense { width: 32768 });
    let vs = VarStore::new(Device::Cpu);
    let m = Dvae::build(&vs.root(), arch, DVAEParams::default()).unwrap();
    let x = Tensor::rand([2, 1, 32, 32], (Kind::Float, Device::Cpu));
    let (qy, qx) = m.encode(&x, false);
    assert_eq!(qy.mean.size(), vec![2, 8]);
    assert_eq!(qx.logvar.size(), vec![2, 8]);
    let z = Tensor::randn([3, 8], (Kind::Float, Device::Cpu)) * 5.0;
    let out = m.decode(&z, &(-&z), false);
    assert_eq!(out.size(), vec![3, 1, 32, 32]);
    assert!(out.min().double_value(&[]) >= 0.0 && out.max().double_value(&[]) <= 1.0);
}

#[test]
fn change_discriminator_architecture_builds() {
    let vs = VarStore::new(Device::Cpu);
    let p = DVAEParams { n_y: 16, n_x: 16, ..Default::default() };
    let m = Dvae::build(&vs.root(), Architecture::change_discriminator(10), p).unwrap();
    let (qy, _) = m.encode(&Tensor::rand([2, 1, 32, 32], (Kind::Float, Device::Cpu)), false);
    assert_eq!(qy.mean.size(), vec![2, 16]);
}

#[test]
fn zero_alpha_leaves_elbo() {
    let p = DVAEParams { alpha: 0.0, ..two_dim() };
    let (_vs, m) = toy(p, Kind::Float);
    let (x, y) = toy_batch(8, Kind::Float);
    let noise = Noise::draw(&mut rng_for(1, &[]), 8, &p, Kind::Float);
    let b = m.forward_loss(&x, &y, &noise, true).breakdown();
    let expect = p.beta_y * b.kl_y + p.beta_x * b.kl_x + b.rec;
    assert!((b.total - expect).abs() < 1e-4 * expect.abs().max(1.0));
}

#[test]
fn total_matches_weighted_terms() {
    let p = two_dim();
    let (_vs, m) = toy(p, Kind::Double);
    let (x, y) = toy_batch(8, Kind::Double);
    let noise = Noise::draw(&mut rng_for(2, &[]), 8, &p, Kind::Double);
    let out = m.forward_loss(&x, &y, &noise, true);
    let b = out.breakdown();
    let expect = p.beta_y * b.kl_y + p.beta_x * b.kl_x + b.rec + p.alpha * b.cls_y - p.alpha * b.cls_x_adv;
    assert!((b.total - expect).abs() < 1e-10, "{b:?} {expect}");
}

#[test]
fn certain_classifier_has_zero_loss() {
    let p = two_dim();
    let (vs, m) = toy(p, Kind::Double);
    let (x, _) = toy_batch(4, Kind::Double);
    let y = Tensor::from_slice(&[3i64; 4]);
    tch::no_grad(|| {
        for (name, mut t) in vs.variables() {
            if name.starts_with("cls_y") {
                let _ = t.zero_();
                if name.ends_with("bias") {
                    let _ = t.get(3).fill_(1e4);
                }
            }
        }
    });
    let noise = Noise::draw(&mut rng_for(2, &[]), 4, &p, Kind::Double);
    assert_eq!(m.forward_loss(&x, &y, &noise, true).breakdown().cls_y, 0.0);
}

#[test]
fn reversal_negates_adversary_gradient_on_encoder() {
    let p = two_dim();
    let (vs, m) = toy(p, Kind::Double);
    let (x, y) = toy_batch(6, Kind::Double);
    let eps = normal_tensor(&mut rng_for(4, &[]), 6, 2, Kind::Double);
    let enc_params: Vec<Tensor> = vs
        .variables()
        .into_iter()
        .filter(|(n, t)| n.starts_with("enc_x") && t.requires_grad())
        .map(|(_, t)| t)
        .collect();
    let grads = |reverse: bool| -> Vec<Tensor> {
        let z = m.enc_x.forward_t(&x, true).sample(&eps);
        let z = if reverse { grad_reverse_scaled(&z, 1.0) } else { z };
        let ce = cross_entropy(&m.cls_x.logits_t(&z, true), &y);
        Tensor::run_backward(&[ce], &enc_params, false, false)
    };
    for (a, b) in grads(true).iter().zip(grads(false)) {
        assert!(a.equal(&(-b)));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let p = two_dim();
    let (vs, m) = toy(p, Kind::Double);
    let (x, y) = toy_batch(6, Kind::Double);
    let noise = Noise::draw(&mut rng_for(9, &[]), 6, &p, Kind::Double);
    let mut named: Vec<(String, Tensor)> = vs
        .variables()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let (adv, main): (Vec<_>, Vec<_>) = named.into_iter().partition(|(n, _)| n.starts_with("cls_x"));
    let adv: Vec<Tensor> = adv.into_iter().map(|x| x.1).collect();
    let main: Vec<Tensor> = main.into_iter().map(|x| x.1).collect();

    let mut opt = Adam::new(&vs, AdamConfig::default());
    opt.zero_grad();
    m.forward_loss(&x, &y, &noise, true).surrogate.backward();
    let mut rng = rng_for(10, &[]);
    let gc = check_gradients(
        &main,
        || tch::no_grad(|| m.forward_loss(&x, &y, &noise, true).total.double_value(&[])),
        4,
        1e-6,
        &mut rng,
    );
    assert!(gc.rel_error() < 1e-3, "main {}", gc.rel_error());
    let gc = check_gradients(
        &adv,
        || tch::no_grad(|| m.forward_loss(&x, &y, &noise, true).cls_x_adv.double_value(&[])),
        4,
        1e-6,
        &mut rng,
    );
    assert!(gc.rel_error() < 1e-3, "adversary {}", gc.rel_error());
}

#[test]
fn non_finite_loss_reports_breakdown() {
    let p = two_dim();
    let (vs, m) = toy(p, Kind::Float);
    let (x, y) = toy_batch(4, Kind::Float);
    let _ = x.get(0).fill_(f64::NAN);
    let mut opt = Adam::new(&vs, AdamConfig::default());
    let noise = Noise::draw(&mut rng_for(1, &[]), 4, &p, Kind::Float);
    match train_step(&m, &mut opt, &x, &y, &noise) {
        Err(Error::Diverged { step, breakdown }) => {
            assert_eq!(step, 1);
            assert!(breakdown.contains("rec="));
        }
        other => panic!("{:?}", other.map(|b| b.total)),
    }
}

#[test]
fn eval_means_are_deterministic() {
    let (_vs, m) = toy(two_dim(), Kind::Float);
    let cfg = SynthConfig::default();
    let imgs: Vec<Image> = generate_split(&cfg, 8, 2, 3).unwrap().into_iter().map(|d| d.image).collect();
    let (a, _) = m.encode_means(&imgs, 7);
    let (b, _) = m.encode_means(&imgs, 20);
    assert!(a.allclose(&b, 1e-6, 1e-6, false));
    let pa = m.class_probs(&a);
    assert!(pa.equal(&m.class_probs(&a)));
}
