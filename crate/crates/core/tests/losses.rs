use lpstream::loss::LossKind;
use lpstream::special::{ln_phi_p_cdf, phi_p_cdf};

#[test]
fn laplace_cdf_closed_form() {
    for k in 0..=200 {
        let t = -20.0 + 0.2 * k as f64;
        let want = if t >= 0.0 { 1.0 - 0.5 * (-t).exp() } else { 0.5 * t.exp() };
        assert!((phi_p_cdf(1.0, t) - want).abs() < 1e-13, "t={t}");
    }
}

#[test]
fn cdf_matches_integrated_density() {
    // Simpson on exp(-|x|^p/p) normalised numerically
    for p in [1.0, 1.5, 2.0, 3.0] {
        let f = |x: f64| (-x.abs().powf(p) / p).exp();
        let simpson = |a: f64, b: f64| {
            let m = 20_000;
            let h = (b - a) / m as f64;
            let mut s = f(a) + f(b);
            for i in 1..m {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let total = 2.0 * simpson(-40.0, 0.0);
        for t in [-3.0, -1.0, -0.2, 0.5, 2.0] {
            let want = if t < 0.0 { simpson(-40.0, t) } else { simpson(-40.0, 0.0) + simpson(0.0, t) } / total;
            assert!((phi_p_cdf(p, t) - want).abs() < 1e-8, "p={p} t={t}");
        }
    }
}

#[test]
fn log_cdf_is_finite_far_in_the_tail() {
    for p in [1.0, 1.5, 2.0] {
        let v = ln_phi_p_cdf(p, -60.0);
        assert!(v.is_finite() && v < -20.0, "p={p}: {v}");
        assert!((ln_phi_p_cdf(p, 0.7) - phi_p_cdf(p, 0.7).ln()).abs() < 1e-13);
    }
}

#[test]
fn losses_are_convex_and_nonnegative() {
    for p in [1.0, 1.5, 2.0] {
        for loss in [LossKind::Lp { p }, LossKind::Relu { p }, LossKind::Logistic, LossKind::Probit { p }] {
            let mut prev_g = f64::NEG_INFINITY;
            for k in 0..=400 {
                let t = -20.0 + 0.1 * k as f64;
                let g = loss.grad(t);
                assert!(loss.value(t) >= 0.0, "{loss} at {t}");
                assert!(g >= prev_g - 1e-12, "{loss} gradient decreases at {t}");
                prev_g = g;
            }
        }
    }
}

#[test]
fn parse_rejects_bad_exponents() {
    assert!(LossKind::parse("lp", 0.5).is_err());
    assert!(LossKind::parse("relu", 3.0).is_err());
    assert!(LossKind::parse("huber", 1.0).is_err());
    assert_eq!(LossKind::parse("probit", 1.5).unwrap(), LossKind::Probit { p: 1.5 });
}

#[test]
fn cdf_strictly_increasing_before_saturation() {
    for p in [1.0, 1.5, 2.0] {
        let mut prev = 0.0;
        for k in 0..10_000 {
            let t = -5.0 + 10.0 * k as f64 / 9999.0;
            let v = phi_p_cdf(p, t);
            assert!(v > prev, "p={p} t={t}");
            assert!((v + phi_p_cdf(p, -t) - 1.0).abs() <= 1e-12);
            prev = v;
        }
    }
}

#[test]
fn convexity_probe() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    for p in [1.0, 1.5, 2.0] {
        for loss in [LossKind::Lp { p }, LossKind::Relu { p }, LossKind::Logistic, LossKind::Probit { p }] {
            for _ in 0..1000 {
                let (a, b, l): (f64, f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random());
                let mid = loss.value(l * a + (1.0 - l) * b);
                let chord = l * loss.value(a) + (1.0 - l) * loss.value(b);
                assert!(mid <= chord + 1e-12 * (1.0 + chord), "{loss}: {a} {b} {l}");
            }
        }
    }
}
