//! Weighted empirical risk minimisation `min_z Σ w_i g(a_i z)`.
//!
//! Damped Newton with Armijo backtracking. Nonsmooth losses are replaced by a
//! smooth surrogate whose parameter is annealed towards zero with warm starts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::numeric::KahanSum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub mu_start: f64,
    pub mu_end: f64,
    pub mu_factor: f64,
    /// Fix the last coordinate of `z` to 1 (regression with `A = [X, -y]`).
    /// `None` picks it from the loss: homogeneous losses are pinned.
    pub pin_last: Option<bool>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-9,
            mu_start: 1e-2,
            mu_end: 1e-8,
            mu_factor: 0.1,
            pin_last: None,
        }
    }
}

impl SolverOptions {
    pub fn pins(&self, loss: &LossKind) -> bool {
        self.pin_last
            .unwrap_or(matches!(loss, LossKind::Lp { .. } | LossKind::Relu { .. }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub z: Vec<f64>,
    /// Unsmoothed weighted loss at `z`.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective of the working (possibly smoothed) problem after each step.
    pub history: Vec<f64>,
}

struct Problem<'a> {
    a: &'a DMatrix<f64>,
    w: &'a [f64],
    loss: LossKind,
    pinned: bool,
}

impl Problem<'_> {
    fn free(&self) -> usize {
        self.a.ncols() - usize::from(self.pinned)
    }

    fn full_z(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.pinned {
            let mut z = DVector::zeros(self.a.ncols());
            z.rows_mut(0, x.len()).copy_from(x);
            z[x.len()] = 1.0;
            z
        } else {
            x.clone()
        }
    }

    fn margins(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a * self.full_z(x)
    }

    fn value(&self, x: &DVector<f64>, mu: Option<f64>) -> f64 {
        let t = self.margins(x);
        let mut acc = KahanSum::default();
        for (ti, wi) in t.iter().zip(self.w) {
            let g = match mu {
                Some(mu) => self.loss.smoothed(*ti, mu).value,
                None => self.loss.value(*ti),
            };
            acc.add(wi * g);
        }
        acc.sum()
    }

    fn derivatives(&self, x: &DVector<f64>, mu: Option<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let m = self.free();
        let t = self.margins(x);
        let mut f = KahanSum::default();
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for (i, (ti, wi)) in t.iter().zip(self.w).enumerate() {
            let e = match mu {
                Some(mu) => self.loss.smoothed(*ti, mu),
                None => self.loss.eval(*ti),
            };
            f.add(wi * e.value);
            let hess = if e.hess.is_finite() { e.hess } else { 0.0 };
            for c in 0..m {
                let ac = self.a[(i, c)];
                if ac == 0.0 {
                    continue;
                }
                g[c] += wi * e.grad * ac;
                let hc = wi * hess * ac;
                for c2 in 0..=c {
                    h[(c, c2)] += hc * self.a[(i, c2)];
                }
            }
        }
        for c in 0..m {
            for c2 in 0..c {
                h[(c2, c)] = h[(c, c2)];
            }
        }
        (f.sum(), g, h)
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let m = g.len();
    let scale = (0..m).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut lambda = 0.0;
    loop {
        let mut hd = h.clone();
        for i in 0..m {
            hd[(i, i)] += lambda;
        }
        if let Some(ch) = hd.cholesky() {
            let s = ch.solve(&(-g));
            if s.iter().all(|v| v.is_finite()) {
                return s;
            }
        }
        lambda = if lambda == 0.0 { 1e-12 * scale } else { lambda * 10.0 };
        if lambda > 1e12 * scale {
            return -g.clone();
        }
    }
}

/// One Newton run on a fixed (smoothed) problem. Returns whether the gradient
/// tolerance was met.
fn newton(prob: &Problem<'_>, x: &mut DVector<f64>, mu: Option<f64>, opts: &SolverOptions, out: &mut Solution) -> bool {
    for _ in 0..opts.max_iter {
        let (f, g, h) = prob.derivatives(x, mu);
        let gn = g.amax();
        out.grad_norm = gn;
        if gn <= opts.grad_tol * (1.0 + f.abs()) {
            return true;
        }
        let mut s = newton_direction(&h, &g);
        let mut slope = g.dot(&s);
        if !(slope < 0.0) {
            s = -g.clone();
            slope = -g.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &*x + step * &s;
            let fc = prob.value(&cand, mu);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        out.iterations += 1;
        match accepted {
            Some((cand, fc)) => {
                let tiny = (f - fc).abs() <= 1e-16 * f.abs().max(1e-300)
                    && (&cand - &*x).amax() <= 1e-15 * (1.0 + x.amax());
                *x = cand;
                out.history.push(fc);
                if tiny {
                    return true;
                }
            }
            None => return gn <= 1e-6 * (1.0 + f.abs()),
        }
    }
    false
}

/// Moves to the vertex through the rows with the smallest residuals when that
/// lowers the objective; exact for piecewise-linear losses.
fn vertex_polish(prob: &Problem<'_>, x: &mut DVector<f64>) {
    let m = prob.free();
    if m == 0 {
        return;
    }
    let z = prob.full_z(x);
    let t = prob.a * &z;
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&i, &j| t[i].abs().total_cmp(&t[j].abs()).then(i.cmp(&j)));
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for &i in &order {
        let mut cand = chosen.clone();
        cand.push(i);
        let sub = DMatrix::from_fn(cand.len(), m, |r, c| prob.a[(cand[r], c)]);
        if sub.clone().svd(false, false).singular_values.min() > 1e-12 * sub.amax().max(1e-300) {
            chosen = cand;
        }
        if chosen.len() == m {
            break;
        }
    }
    if chosen.len() < m {
        return;
    }
    let sys = DMatrix::from_fn(m, m, |r, c| prob.a[(chosen[r], c)]);
    let rhs = DVector::from_fn(m, |r, _| if prob.pinned { -prob.a[(chosen[r], m)] } else { 0.0 });
    if let Some(v) = sys.lu().solve(&rhs) {
        if v.iter().all(|e| e.is_finite()) && prob.value(&v, None) <= prob.value(x, None) {
            *x = v;
        }
    }
}

pub fn solve(a: &DMatrix<f64>, weights: &[f64], loss: &LossKind, opts: &SolverOptions) -> Result<Solution> {
    solve_from(a, weights, loss, opts, None)
}

/// Like [`solve`] with an optional starting point for the free coordinates.
pub fn solve_from(
    a: &DMatrix<f64>,
    weights: &[f64],
    loss: &LossKind,
    opts: &SolverOptions,
    start: Option<&[f64]>,
) -> Result<Solution> {
    loss.validate()?;
    if a.nrows() == 0 {
        return Err(Error::InvalidConfig("empty problem".into()));
    }
    if weights.len() != a.nrows() {
        return Err(Error::Mismatch(format!("{} weights for {} rows", weights.len(), a.nrows())));
    }
    if a.iter().chain(weights).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("solver input"));
    }
    let pinned = opts.pins(loss);
    if pinned && a.ncols() < 2 {
        return Err(Error::InvalidConfig("pinned regression needs at least two columns".into()));
    }
    let prob = Problem { a, w: weights, loss: *loss, pinned };
    let m = prob.free();
    let mut x = match start {
        Some(s) if s.len() == m => DVector::from_column_slice(s),
        Some(s) => return Err(Error::Mismatch(format!("start of length {} for {m} unknowns", s.len()))),
        None => DVector::zeros(m),
    };
    let mut out = Solution {
        z: Vec::new(),
        objective: 0.0,
        converged: false,
        iterations: 0,
        grad_norm: f64::INFINITY,
        history: Vec::new(),
    };
    let converged = if loss.needs_smoothing() {
        let mut mu = opts.mu_start;
        let ok = loop {
            let ok = newton(&prob, &mut x, Some(mu), opts, &mut out);
            if mu <= opts.mu_end {
                break ok;
            }
            mu = (mu * opts.mu_factor).max(opts.mu_end);
        };
        if loss.p() == 1.0 {
            vertex_polish(&prob, &mut x);
        }
        ok
    } else {
        newton(&prob, &mut x, None, opts, &mut out)
    };
    out.converged = converged;
    out.objective = prob.value(&x, None);
    out.z = prob.full_z(&x).iter().copied().collect();
    Ok(out)
}

/// `Σ w_i g(a_i z)`.
pub fn objective(a: &DMatrix<f64>, weights: &[f64], loss: &LossKind, z: &[f64]) -> f64 {
    let zv = DVector::from_column_slice(z);
    let t = a * zv;
    crate::loss::weighted_loss(loss, t.iter().copied().zip(weights.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn regression(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = DVector::from_fn(d, |i, _| i as f64 - 1.0);
        let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x * &beta + noise;
        let mut a = x.clone().resize_horizontally(d + 1, 0.0);
        a.set_column(d, &(-&y));
        (a, x, y)
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let (a, x, y) = regression(200, 3, 1);
        let sol = solve(&a, &vec![1.0; 200], &LossKind::Lp { p: 2.0 }, &SolverOptions::default()).unwrap();
        let xt = x.transpose();
        let ols = (&xt * &x).lu().solve(&(&xt * &y)).unwrap();
        for c in 0..3 {
            assert!((sol.z[c] - ols[c]).abs() <= 1e-6 * ols[c].abs().max(1.0));
        }
        assert_eq!(sol.z[3], 1.0);
        assert!(sol.converged);
    }

    #[test]
    fn l1_in_one_dimension_is_a_weighted_median() {
        let ys = [3.0, -1.0, 7.0, 2.5, 10.0, 0.5];
        let ws = [1.0, 2.0, 0.5, 1.5, 1.0, 0.25];
        let a = DMatrix::from_fn(6, 2, |i, c| if c == 0 { 1.0 } else { -ys[i] });
        let sol = solve(&a, &ws, &LossKind::Lp { p: 1.0 }, &SolverOptions::default()).unwrap();
        // sorted: -1(2) 0.5(.25) 2.5(1.5) 3(1) 7(.5) 10(1); total 6.25, half 3.125
        assert_eq!(sol.z[0], 2.5);
    }

    #[test]
    fn logistic_separable_decreases_monotonically() {
        let a = DMatrix::from_row_slice(4, 2, &[-1.0, -0.5, -2.0, -1.0, -1.5, 0.2, -0.3, -2.0]);
        let sol = solve(&a, &[1.0; 4], &LossKind::Logistic, &SolverOptions::default()).unwrap();
        for w in sol.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(sol.grad_norm < 1e-6 || sol.iterations >= 200);
    }

    #[test]
    fn unit_weights_match_direct_evaluation() {
        let (a, _, _) = regression(50, 2, 3);
        let sol = solve(&a, &[1.0; 50], &LossKind::Lp { p: 1.5 }, &SolverOptions::default()).unwrap();
        let f = objective(&a, &[1.0; 50], &LossKind::Lp { p: 1.5 }, &sol.z);
        assert_eq!(f, sol.objective);
        // small perturbations do not improve the optimum
        for c in 0..2 {
            for h in [-1e-4, 1e-4] {
                let mut z = sol.z.clone();
                z[c] += h;
                assert!(objective(&a, &[1.0; 50], &LossKind::Lp { p: 1.5 }, &z) >= f * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn probit_has_finite_optimum_on_overlapping_data() {
        let a = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 2.0, -0.5]);
        let sol = solve(&a, &[1.0; 4], &LossKind::Probit { p: 1.5 }, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.z[0].is_finite());
    }
}
