use autograd::{AdamW, GradCheck, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tencdm::corpus::TokenSeq;
use tencdm::denoiser::{train_denoiser, Denoise, DenoiserConfig, DenoiserModel};
use tencdm::schedule::NoiseSchedule;

fn config(layers: usize, self_condition: bool) -> DenoiserConfig {
    let mut c = DenoiserConfig {
        layers,
        heads: 2,
        ff_mult: 2,
        self_condition,
        cond_layers: 1,
        ..DenoiserConfig::default()
    };
    c.train.batch = 4;
    c.train.warmup = 10;
    c.train.ema = 0.99;
    c
}

fn source(ids: &[usize]) -> TokenSeq {
    TokenSeq::from_ids(ids.to_vec())
}

#[test]
fn two_layer_denoiser_matches_finite_differences() {
    for seed in 0..10 {
        let model = DenoiserModel::new(config(2, true), 4, 3, None, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let z0 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let z_t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let sc = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let ts = [0.3, 0.8];
        let report = GradCheck::default()
            .check_params(&model.params, |g| {
                let x = g.constant(z_t.clone().reshape(&[6, 4]).unwrap());
                let s = g.constant(sc.clone());
                let pred = model.forward(g, x, &ts, Some(s), None);
                let target = g.constant(z0.clone().reshape(&[6, 4]).unwrap());
                g.mse(pred, target)
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn conditional_denoiser_matches_finite_differences() {
    let model = DenoiserModel::new(config(2, false), 4, 3, Some((12, 4)), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z0 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let z_t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let src = [source(&[1, 7, 2, 0]), source(&[1, 9, 11, 2])];
    let report = GradCheck::default()
        .check_params(&model.params, |g| model.loss(g, &z0, &z_t, &[0.1, 0.6], false, Some(&src)))
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// The self-conditioned loss must produce exactly the gradients of a second
/// pass whose estimate is a plain constant holding the first prediction.
#[test]
fn stop_gradient_matches_constant_estimate() {
    let model = DenoiserModel::new(config(2, true), 4, 3, None, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let z_t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let ts = [0.25, 0.5];

    let mut g = Graph::new(&model.params);
    let loss = model.loss(&mut g, &z0, &z_t, &ts, true, None);
    let with_sg = g.backward(loss).unwrap();
    let sg_value = g.value(loss).item().unwrap();

    let first = {
        let mut g = Graph::inference(&model.params);
        let x = g.constant(z_t.clone().reshape(&[6, 4]).unwrap());
        let p = model.forward(&mut g, x, &ts, None, None);
        g.value(p).clone()
    };
    let mut g = Graph::new(&model.params);
    let x = g.constant(z_t.clone().reshape(&[6, 4]).unwrap());
    let sc = g.constant(first);
    let pred = model.forward(&mut g, x, &ts, Some(sc), None);
    let target = g.constant(z0.clone().reshape(&[6, 4]).unwrap());
    let loss = g.mse(pred, target);
    let reference = g.backward(loss).unwrap();

    assert_eq!(sg_value, g.value(loss).item().unwrap());
    for id in model.params.ids() {
        assert_eq!(with_sg.param(id), reference.param(id), "{}", model.params.name(id));
    }
}

#[test]
fn zero_estimate_equals_no_estimate() {
    let model = DenoiserModel::new(config(2, true), 4, 3, None, 4).unwrap();
    let z = Tensor::randn(&[3, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let ts = [0.1, 0.5, 0.9];
    let none = model.denoise(&z, &ts, None, None).unwrap();
    let zero = model.denoise(&z, &ts, Some(&Tensor::zeros(&[3, 3, 4])), None).unwrap();
    assert_eq!(none, zero);
}

#[test]
fn self_conditioning_branch_is_a_fair_coin() {
    let mut model = DenoiserModel::new(config(1, true), 2, 2, None, 0).unwrap();
    let mut opt = AdamW::new(model.config.train.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let z0 = Tensor::randn(&[1, 2, 2], 1.0, &mut rng);
    let schedule = NoiseSchedule::tan(9.0);
    let steps = 10_000;
    let mut sc = 0;
    for _ in 0..steps {
        let out = model.train_step(&mut opt, &z0, None, &schedule, &mut rng).unwrap();
        sc += usize::from(out.self_cond);
    }
    let freq = sc as f64 / steps as f64;
    assert!((0.48..=0.52).contains(&freq), "self-conditioned share {freq}");
}

#[test]
fn disabled_self_conditioning_never_takes_the_branch() {
    let mut model = DenoiserModel::new(config(1, false), 2, 2, None, 0).unwrap();
    let mut opt = AdamW::new(model.config.train.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
    for _ in 0..200 {
        let out = model.train_step(&mut opt, &z0, None, &NoiseSchedule::cosine(), &mut rng).unwrap();
        assert!(!out.self_cond);
    }
}

#[test]
fn short_training_reduces_the_loss_and_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Two prototype latents; the model only has to learn which one it sees.
    let protos = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
    let z = Tensor::from_fn(&[64, 4, 8], |i| protos.data()[(i / 32 % 2) * 32 + i % 32]);
    let mut cfg = config(2, true);
    cfg.heads = 2;
    cfg.train.steps = 200;
    cfg.train.batch = 16;
    cfg.train.lr = 3e-3;
    let schedule = NoiseSchedule::cosine();
    let (model, _, curve) = train_denoiser(&z, None, &schedule, cfg.clone(), 8).unwrap();
    let mean = |c: &[tencdm::denoiser::CurvePoint]| c.iter().map(|p| p.loss).sum::<f64>() / c.len() as f64;
    assert!(mean(&curve[180..]) < 0.6 * mean(&curve[..20]), "{} vs {}", mean(&curve[180..]), mean(&curve[..20]));

    let (again, _, curve2) = train_denoiser(&z, None, &schedule, cfg, 8).unwrap();
    assert_eq!(curve, curve2);
    assert_eq!(model.params.tensors(), again.params.tensors());
}
