use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lpstream::coreset::{approximation_ratio, Coreset, CoresetBuilder, CoresetConfig};
use lpstream::loss::LossKind;
use lpstream::solver::SolverOptions;
use lpstream::synth::{SynthKind, SynthSpec};

fn build(loss: LossKind, n: u64, d: usize, k: usize, seed: u64) -> (lpstream::synth::Generated, Coreset) {
    let spec = SynthSpec::new(SynthKind::Gaussian { fold: Some(loss), tail: Some(3.0) }, n, d, seed);
    let g = spec.generate().unwrap();
    let mut b = CoresetBuilder::new(CoresetConfig::new(loss, n, g.matrix.ncols(), k, seed)).unwrap();
    for u in &g.updates {
        b.update(u).unwrap();
    }
    (g, b.finish().unwrap())
}

#[test]
fn l1_coreset_tracks_the_loss_at_random_points() {
    let loss = LossKind::Lp { p: 1.0 };
    let (g, c) = build(loss, 3000, 3, 200, 21);
    let full = Coreset::full(&g.matrix, loss);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = g.matrix.ncols();
    for _ in 0..50 {
        let mut z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        z[dim - 1] = 1.0;
        let (f, e) = (full.loss_at(&z), c.loss_at(&z));
        assert!((e / f - 1.0).abs() <= 0.5, "coreset {e} vs full {f}");
    }
}

#[test]
fn logistic_coreset_minimiser_is_near_optimal() {
    let (g, c) = build(LossKind::Logistic, 3000, 3, 500, 8);
    let rep = approximation_ratio(&g.matrix, &c, &SolverOptions::default()).unwrap();
    assert!(rep.ratio <= 1.2 && rep.ratio >= 1.0 - 1e-9, "ratio {}", rep.ratio);
}

#[test]
fn probit_builder_records_two_conditioned_arms() {
    let (_, c) = build(LossKind::Probit { p: 1.5 }, 2000, 3, 100, 2);
    let prov = c.provenance.as_ref().unwrap();
    assert_eq!(prov.conditioned, vec![true, true]);
    assert_eq!(c.conditioners.len(), 2);
    assert!(c.weights.iter().all(|&w| w >= 1.0));
}

#[test]
fn exact_probability_weights_are_unbiased() {
    use lpstream::experiment::offline_leverage_sample;
    let g = SynthSpec::new(SynthKind::Gaussian { fold: Some(LossKind::Logistic), tail: Some(2.0) }, 50, 3, 4)
        .generate()
        .unwrap();
    let z = [0.4, -0.3, 0.8];
    for loss in [LossKind::Logistic, LossKind::Lp { p: 1.5 }, LossKind::Probit { p: 1.0 }] {
        let want = Coreset::full(&g.matrix, loss).loss_at(&z);
        let draws: Vec<f64> = (0..20_000u64)
            .map(|t| {
                let s = offline_leverage_sample(&g.matrix, loss.p(), 10, t).unwrap();
                s.entries
                    .iter()
                    .map(|e| e.weight * loss.value(e.row.iter().zip(&z).map(|(a, b)| a * b).sum()))
                    .sum()
            })
            .collect();
        let m = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / m;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        assert!((mean - want).abs() <= 3.0 * sd / m.sqrt(), "{loss}: {mean} vs {want}");
    }
}

#[test]
fn small_row_perturbations_move_the_loss_proportionally() {
    let eps = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (loss, fold) in [
        (LossKind::Lp { p: 1.0 }, LossKind::Lp { p: 1.0 }),
        (LossKind::Relu { p: 1.5 }, LossKind::Lp { p: 1.5 }),
        (LossKind::Logistic, LossKind::Logistic),
        (LossKind::Probit { p: 2.0 }, LossKind::Probit { p: 2.0 }),
    ] {
        let g = SynthSpec::new(SynthKind::Gaussian { fold: Some(fold), tail: None }, 500, 3, 3).generate().unwrap();
        let full = Coreset::full(&g.matrix, loss);
        let z = full.solve(&SolverOptions::default()).unwrap().z;
        let mut b = g.matrix.clone();
        let p = loss.p();
        for i in 0..b.nrows() {
            let norm = b.row(i).iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p);
            let dir: Vec<f64> = (0..b.ncols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dn = dir.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p);
            for (c, v) in dir.iter().enumerate() {
                b[(i, c)] += eps / 3.0 * norm * v / dn;
            }
        }
        let (f, fb) = (full.loss_at(&z), Coreset::full(&b, loss).loss_at(&z));
        let c = (fb - f).abs() / (eps * f);
        eprintln!("{loss}: perturbation constant {c:.3}");
        assert!(c.is_finite() && c < 5.0, "{loss}: {c}");
    }
}
