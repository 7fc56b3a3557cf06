use autograd::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tencdm::schedule::{uniform_grid, NoiseSchedule, ALPHA_EPS};

fn all() -> Vec<NoiseSchedule> {
    vec![
        NoiseSchedule::cosine(),
        NoiseSchedule::sqrt(),
        NoiseSchedule::tan(1.0),
        NoiseSchedule::tan(3.0),
        NoiseSchedule::tan(9.0),
    ]
}

#[test]
fn tan_quarter_point_matches_closed_form() {
    // tan(π/8) = √2 − 1
    let r = 2f64.sqrt() - 1.0;
    for d in [1.0, 3.0, 9.0, 20.0] {
        let expected = 1.0 / (1.0 + r * r * d * d);
        let got = NoiseSchedule::tan(d).alpha(0.25).unwrap();
        assert!((got - expected).abs() < 1e-12, "d = {d}: {got} vs {expected}");
    }
    assert!((NoiseSchedule::tan(9.0).alpha(0.5).unwrap() - 1.0 / 82.0).abs() < 1e-9);
}

#[test]
fn cosine_midpoint_is_near_half() {
    let a = NoiseSchedule::cosine().alpha(0.5).unwrap();
    assert!((a - 0.5).abs() < 1e-3, "{a}");
}

#[test]
fn larger_d_means_more_noise() {
    for t in uniform_grid(21).into_iter().filter(|t| *t > 0.01 && *t < 0.99) {
        let a: Vec<f64> = [1.0, 3.0, 7.0, 9.0].iter().map(|&d| NoiseSchedule::tan(d).alpha(t).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[1] < w[0]), "t = {t}: {a:?}");
    }
}

#[test]
fn forward_process_preserves_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z0 = Tensor::randn(&[100_000], 1.0, &mut rng);
    let eps = Tensor::randn(&[100_000], 1.0, &mut rng);
    for s in all() {
        for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let z = s.forward_sample(&z0, t, &eps).unwrap();
            let mean = z.sum() / z.numel() as f64;
            let var = z.mean_sq() - mean * mean;
            assert!((0.97..=1.03).contains(&var), "{s} t = {t}: variance {var}");
        }
    }
}

#[test]
fn batched_forward_matches_single_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
    let eps = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
    let ts = [0.05, 0.5, 0.95];
    let s = NoiseSchedule::tan(9.0);
    let batch = s.forward_sample_batch(&z0, &ts, &eps).unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let one = s
            .forward_sample(&z0.slice_outer(i, i + 1).unwrap(), t, &eps.slice_outer(i, i + 1).unwrap())
            .unwrap();
        assert_eq!(batch.slice_outer(i, i + 1).unwrap(), one);
    }
}

proptest! {
    #[test]
    fn alpha_is_monotone_and_clamped(a in 0.0f64..=1.0, b in 0.0f64..=1.0, which in 0usize..5) {
        let s = all()[which];
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (s.alpha(lo).unwrap(), s.alpha(hi).unwrap());
        prop_assert!(y <= x);
        prop_assert!((ALPHA_EPS..=1.0 - ALPHA_EPS).contains(&x));
        prop_assert!((ALPHA_EPS..=1.0 - ALPHA_EPS).contains(&y));
    }

    #[test]
    fn endpoints_hit_the_clamp(which in 0usize..5) {
        let s = all()[which];
        prop_assert!(s.alpha(0.0).unwrap() > 0.98);
        prop_assert!(s.alpha(1.0).unwrap() <= 2.0 * ALPHA_EPS);
    }

    #[test]
    fn name_round_trips(d in 0.5f64..20.0) {
        let s = NoiseSchedule::tan((d * 4.0).round() / 4.0);
        let back: NoiseSchedule = s.to_string().parse().unwrap();
        prop_assert_eq!(back.alpha(0.3).unwrap(), s.alpha(0.3).unwrap());
    }
}
