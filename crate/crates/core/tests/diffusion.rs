use cdiffdet::diffusion::{
    ddim_timesteps, denormalize, epsilon_from_x0, normalize, Diffusion, NoiseSchedule,
    COSINE_OFFSET, DEFAULT_SCALE, MAX_BETA,
};
use cdiffdet::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unclamped() -> Diffusion {
    let mut d = Diffusion::new(
        NoiseSchedule::cosine(1000, COSINE_OFFSET).unwrap(),
        DEFAULT_SCALE,
    );
    d.clamp = false;
    d
}

#[test]
fn schedule_matches_closed_form() {
    let s = NoiseSchedule::cosine(1000, COSINE_OFFSET).unwrap();
    let f = |t: f64| {
        (((t / 1000.0) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    for t in [1, 10, 500, 900] {
        assert!(
            (s.alpha_bar(t).unwrap() - f(t as f64) / f(0.0)).abs() < 1e-12,
            "t = {t}"
        );
    }
    assert!(s.alpha_bar(1000).unwrap() < 1e-3);
    for w in s.alpha_bars().windows(2) {
        assert!(w[1] < w[0]);
    }
    for t in 1..=1000 {
        let b = s.beta(t).unwrap();
        assert!(b > 0.0 && b <= MAX_BETA);
    }
    assert!(matches!(
        NoiseSchedule::cosine(0, COSINE_OFFSET),
        Err(Error::Config(_))
    ));
    assert!(s.alpha_bar(1001).is_err());
}

#[test]
fn q_sample_endpoints() {
    let d = Diffusion::new(NoiseSchedule::cosine(1000, COSINE_OFFSET).unwrap(), 2.0);
    let x0 = Tensor::new(&[1, 1, 4], vec![0.5, -1.0, 1.5, 0.0]).unwrap();
    let noise = Tensor::new(&[1, 1, 4], vec![3.0, -3.0, 0.1, 0.2]).unwrap();
    assert_eq!(d.q_sample(&x0, 0, &noise).unwrap(), x0);
    let wrong = Tensor::zeros(&[1, 2, 4]);
    assert!(d.q_sample(&x0, 10, &wrong).is_err());
    assert!(d.q_sample(&x0, 1001, &noise).is_err());
    // Clamped to the signal range.
    let far = d.q_sample(&x0, 1000, &noise).unwrap();
    assert!(far.data().iter().all(|v| v.abs() <= 2.0));
}

#[test]
fn q_sample_moments_monte_carlo() {
    let d = unclamped();
    let t = 400;
    let ab = d.schedule.alpha_bar(t).unwrap();
    let n = 100_000;
    let x0 = Tensor::full(&[n], 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Tensor::randn(&[n], &mut rng);
    let xt = d.q_sample(&x0, t, &noise).unwrap();
    let mean = xt.data().iter().sum::<f64>() / n as f64;
    let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want_mean = ab.sqrt() * 0.7;
    let want_var = 1.0 - ab;
    // Three standard errors of the mean and of the variance estimate.
    assert!((mean - want_mean).abs() < 3.0 * (want_var / n as f64).sqrt());
    assert!((var - want_var).abs() < 3.0 * want_var * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn epsilon_examples() {
    let x = Tensor::new(&[2], vec![0.3, -1.2]).unwrap();
    assert_eq!(epsilon_from_x0(&x, &x, 0.0).unwrap(), x);
    assert!(matches!(
        epsilon_from_x0(&x, &x, 1.0),
        Err(Error::Domain(_))
    ));
}

#[test]
fn round_trips_over_ten_thousand_cases() {
    let d = unclamped();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let t = rng.random_range(2..=1000);
        let t_prev = rng.random_range(1..t);
        let x0 = Tensor::uniform(&[4], -2.0, 2.0, &mut rng);
        let eps = Tensor::randn(&[4], &mut rng);
        let xt = d.q_sample(&x0, t, &eps).unwrap();
        let ab = d.schedule.alpha_bar(t).unwrap();
        let back = epsilon_from_x0(&xt, &x0, ab).unwrap();
        let step = d.ddim_step(&xt, &x0, &eps, t, t_prev).unwrap();
        let direct = d.q_sample(&x0, t_prev, &eps).unwrap();
        for i in 0..4 {
            worst = worst.max((back.data()[i] - eps.data()[i]).abs());
            worst = worst.max((step.data()[i] - direct.data()[i]).abs());
        }
    }
    assert!(worst < 1e-10, "worst {worst:e}");
}

#[test]
fn ddim_examples() {
    let d = unclamped();
    let x0 = Tensor::new(&[3], vec![0.5, -0.25, 1.0]).unwrap();
    let eps = Tensor::new(&[3], vec![0.1, 0.2, -0.3]).unwrap();
    let xt = Tensor::zeros(&[3]);
    assert_eq!(d.ddim_step(&xt, &x0, &eps, 10, 0).unwrap(), x0);
    let zero = Tensor::zeros(&[3]);
    let r = d.ddim_step(&xt, &x0, &zero, 500, 250).unwrap();
    let a = d.schedule.alpha_bar(250).unwrap().sqrt();
    for i in 0..3 {
        assert_eq!(r.data()[i], a * x0.data()[i]);
    }
    assert!(matches!(
        d.ddim_step(&xt, &x0, &eps, 5, 5),
        Err(Error::Contract(_))
    ));
}

#[test]
fn renewal_mixed_case() {
    let d = Diffusion::new(NoiseSchedule::cosine(1000, COSINE_OFFSET).unwrap(), 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[1, 5, 4], -1.0, 1.0, &mut rng);
    let scores = Tensor::new(
        &[1, 5, 2],
        vec![0.9, 0.1, 0.2, 0.3, 0.1, 0.7, 0.4, 0.5, 0.6, 0.0],
    )
    .unwrap();
    let (out, keep) = d.renew(&x, &scores, 0.5, &mut rng).unwrap();
    assert_eq!(keep, vec![true, false, true, false, true]);
    assert_eq!(out.shape(), x.shape());
    for r in 0..5 {
        let (a, b) = (&out.data()[r * 4..r * 4 + 4], &x.data()[r * 4..r * 4 + 4]);
        if keep[r] {
            assert_eq!(a, b);
        } else {
            assert_ne!(a, b);
            assert!(a.iter().all(|v| v.abs() <= 2.0));
        }
    }
    let all = Tensor::full(&[1, 5, 2], 0.9);
    assert_eq!(d.renew(&x, &all, 0.5, &mut rng).unwrap().0, x);
    assert!(d.renew(&x, &all, 1.0, &mut rng).is_err());
}

#[test]
fn strided_timesteps() {
    assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999, 0]);
    let ts = ddim_timesteps(1000, 4).unwrap();
    assert_eq!(ts.len(), 5);
    assert_eq!((ts[0], ts[4]), (999, 0));
    assert!(ddim_timesteps(1000, 0).is_err());
}

proptest! {
    #[test]
    fn normalize_round_trip(v in prop::collection::vec(0.0..=1.0f64, 4)) {
        let b = Tensor::new(&[1, 1, 4], v.clone()).unwrap();
        let s = normalize(&b, 2.0);
        prop_assert!(s.data().iter().all(|x| x.abs() <= 2.0));
        let back = denormalize(&s, 2.0);
        for i in 0..4 {
            prop_assert!((back.data()[i] - v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn renewal_preserves_count_and_kept_rows(seed in any::<u64>(), thr in 0.05..0.95f64) {
        let d = Diffusion::new(NoiseSchedule::cosine(100, COSINE_OFFSET).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[2, 6, 4], -2.0, 2.0, &mut rng);
        let scores = Tensor::uniform(&[2, 6, 3], 0.0, 1.0, &mut rng);
        let (out, keep) = d.renew(&x, &scores, thr, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert_eq!(keep.len(), 12);
        for r in 0..12 {
            let best = scores.data()[r * 3..r * 3 + 3].iter().copied().fold(0.0, f64::max);
            prop_assert_eq!(keep[r], best > thr);
            if keep[r] {
                prop_assert_eq!(&out.data()[r * 4..r * 4 + 4], &x.data()[r * 4..r * 4 + 4]);
            }
        }
    }
}
