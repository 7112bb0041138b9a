//! Subspace-embedding sketches and the QR-based conditioner `R`.
//!
//! `A R^{-1}` is a well-conditioned basis for the column space of `A`, so the
//! row norms `‖a_i R^{-1}‖_p^p` bound the p-leverage scores up to a factor.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{SeedKeys, SeedSet};
use crate::numeric::{norm_pp, Compensated, KahanSum};
use crate::stream::TurnstileUpdate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// One signed nonzero per column.
    CountSketch,
    /// Dense i.i.d. p-stable entries.
    PStable,
}

impl EmbeddingKind {
    pub fn for_p(p: f64) -> Self {
        if p >= 2.0 {
            EmbeddingKind::CountSketch
        } else {
            EmbeddingKind::PStable
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingKind::CountSketch => "countsketch",
            EmbeddingKind::PStable => "pstable",
        }
    }
}

/// Default embedding rows: `c d^2` for CountSketch, `c d ln d` otherwise.
pub fn default_embed_rows(d: usize, kind: EmbeddingKind, c: f64) -> usize {
    let df = d as f64;
    let r = match kind {
        EmbeddingKind::CountSketch => c * df * df,
        EmbeddingKind::PStable => c * df * df.ln().max(1.0),
    };
    (r.ceil() as usize).max(2 * d)
}

/// Symmetric p-stable variate from two uniforms (Chambers-Mallows-Stuck).
pub fn stable_from_uniforms(p: f64, u1: f64, u2: f64) -> f64 {
    let v = std::f64::consts::PI * (u1 - 0.5);
    if p == 1.0 {
        return v.tan();
    }
    let w = -u2.ln();
    if p == 2.0 {
        return 2.0 * v.sin() * w.sqrt();
    }
    (p * v).sin() / v.cos().powf(1.0 / p) * (((1.0 - p) * v).cos() / w).powf((1.0 - p) / p)
}

/// Median of `|X|` for a standard symmetric p-stable `X`; estimated once per
/// `p` from 10^6 draws (exactly 1 for the Cauchy case).
pub fn stable_abs_median(p: f64) -> f64 {
    if p == 1.0 {
        return 1.0;
    }
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&p.to_bits()) {
        return *v;
    }
    let keys = SeedSet::new(0x5ab1e, 0xff).keys();
    let mut draws: Vec<f64> = (0..1_000_000u64)
        .map(|i| stable_from_uniforms(p, keys.uniform_aux(i, 0, 0), keys.uniform_aux(i, 0, 1)).abs())
        .collect();
    let mid = draws.len() / 2;
    let (_, m, _) = draws.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let m = *m;
    cache.lock().unwrap().insert(p.to_bits(), m);
    m
}

/// Linear sketch `Π A` with `Π` regenerated from seeds.
#[derive(Clone, Debug)]
pub struct EmbeddingSketch {
    kind: EmbeddingKind,
    p: f64,
    rows: usize,
    n: u64,
    d: usize,
    seeds: SeedSet,
    keys: SeedKeys,
    scale: f64,
    matrix: Vec<Compensated>,
}

impl EmbeddingSketch {
    pub fn new(n: u64, d: usize, p: f64, kind: EmbeddingKind, rows: usize, seeds: SeedSet) -> Result<Self> {
        if n == 0 || d == 0 || rows == 0 {
            return Err(Error::InvalidConfig("embedding needs positive n, d and rows".into()));
        }
        if !(1.0..=2.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("p = {p} outside [1, 2]")));
        }
        let scale = match kind {
            EmbeddingKind::CountSketch => 1.0,
            EmbeddingKind::PStable => 1.0 / (stable_abs_median(p) * (rows as f64).powf(1.0 / p)),
        };
        Ok(Self {
            kind,
            p,
            rows,
            n,
            d,
            seeds,
            keys: seeds.keys(),
            scale,
            matrix: vec![Compensated::ZERO; rows * d],
        })
    }

    /// Kind and row count from the defaults for `p` with constant `c`.
    pub fn with_defaults(n: u64, d: usize, p: f64, c: f64, seeds: SeedSet) -> Result<Self> {
        let kind = EmbeddingKind::for_p(p);
        Self::new(n, d, p, kind, default_embed_rows(d, kind, c), seeds)
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seeds(&self) -> SeedSet {
        self.seeds
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Entry `Π[k, i]`.
    pub fn entry(&self, k: usize, i: u64) -> f64 {
        match self.kind {
            EmbeddingKind::CountSketch => {
                if self.keys.bucket_of(i, 0, self.rows) == k {
                    self.keys.sign_of(i, 0)
                } else {
                    0.0
                }
            }
            EmbeddingKind::PStable => {
                let u1 = self.keys.uniform_aux(k as u64, i, 0);
                let u2 = self.keys.uniform_aux(k as u64, i, 1);
                stable_from_uniforms(self.p, u1, u2) * self.scale
            }
        }
    }

    fn check(&self, row: u64, col: usize) -> Result<()> {
        if row >= self.n || col >= self.d {
            return Err(Error::IndexOutOfRange { row, col, n: self.n, d: self.d });
        }
        Ok(())
    }

    pub fn update(&mut self, u: &TurnstileUpdate) -> Result<()> {
        self.check(u.row, u.col)?;
        if !u.value.is_finite() {
            return Err(Error::NonFinite("update value"));
        }
        match self.kind {
            EmbeddingKind::CountSketch => {
                let k = self.keys.bucket_of(u.row, 0, self.rows);
                let sg = self.keys.sign_of(u.row, 0);
                self.matrix[k * self.d + u.col].add(sg * u.value);
            }
            EmbeddingKind::PStable => {
                for k in 0..self.rows {
                    let e = self.entry(k, u.row);
                    self.matrix[k * self.d + u.col].add(e * u.value);
                }
            }
        }
        Ok(())
    }

    pub fn update_row(&mut self, row: u64, x: &[f64]) -> Result<()> {
        self.check(row, x.len().saturating_sub(1))?;
        if x.len() != self.d {
            return Err(Error::Mismatch(format!("row of length {} for d = {}", x.len(), self.d)));
        }
        let targets: Vec<(usize, f64)> = match self.kind {
            EmbeddingKind::CountSketch => {
                vec![(self.keys.bucket_of(row, 0, self.rows), self.keys.sign_of(row, 0))]
            }
            EmbeddingKind::PStable => (0..self.rows).map(|k| (k, self.entry(k, row))).collect(),
        };
        for (k, e) in targets {
            for (c, v) in x.iter().enumerate() {
                self.matrix[k * self.d + c].add(e * v);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EmbeddingSketch) -> Result<()> {
        if self.kind != other.kind
            || self.rows != other.rows
            || self.d != other.d
            || self.n != other.n
            || self.seeds != other.seeds
            || self.p.to_bits() != other.p.to_bits()
        {
            return Err(Error::Mismatch("embedding sketches differ".into()));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            a.add_compensated(b);
        }
        Ok(())
    }

    /// Current `Π A` as a dense `rows x d` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.d, |k, c| self.matrix[k * self.d + c].value())
    }

    pub fn finalize(&self) -> Result<Conditioner> {
        let mut c = Conditioner::from_embedded(self.matrix(), self.p)?;
        c.meta = ConditionerMeta {
            seed: Some(self.seeds.master_seed),
            tag: Some(self.seeds.instance_tag),
            kind: Some(self.kind),
            embed_rows: self.rows,
        };
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionerMeta {
    pub seed: Option<u64>,
    pub tag: Option<u32>,
    pub kind: Option<EmbeddingKind>,
    pub embed_rows: usize,
}

/// Upper-triangular `R` with positive diagonal and its inverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioner {
    pub p: f64,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    /// Orthonormal factor of the embedded matrix (empty when loaded from disk).
    pub q: DMatrix<f64>,
    pub alpha_emp: Option<f64>,
    pub beta_emp: Option<f64>,
    pub meta: ConditionerMeta,
}

impl Conditioner {
    /// QR of an already embedded (or exact) matrix.
    pub fn from_embedded(m: DMatrix<f64>, p: f64) -> Result<Self> {
        let (rows, d) = m.shape();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedded matrix"));
        }
        if rows < d {
            return Err(Error::RankDeficient { deficient: d - rows, d });
        }
        let qr = m.qr();
        let mut q = qr.q();
        let mut r = qr.r();
        for i in 0..d {
            if r[(i, i)] < 0.0 {
                r.row_mut(i).neg_mut();
                q.column_mut(i).neg_mut();
            }
        }
        let top = (0..d).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let tol = top * 1e-12 * rows.max(d) as f64;
        let deficient = (0..d).filter(|&i| !(r[(i, i)].abs() > tol)).count();
        if deficient > 0 {
            return Err(Error::RankDeficient { deficient, d });
        }
        let r_inv = r
            .solve_upper_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Singular("triangular factor".into()))?;
        Ok(Self {
            p,
            r,
            r_inv,
            q,
            alpha_emp: None,
            beta_emp: None,
            meta: ConditionerMeta { embed_rows: rows, ..Default::default() },
        })
    }

    pub fn d(&self) -> usize {
        self.r.nrows()
    }

    /// `A R^{-1}`.
    pub fn basis(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        a * &self.r_inv
    }

    /// Measures `α̂ = ‖A R^{-1}‖_p` and a lower estimate `β̂` of
    /// `max_z ‖z‖_q / ‖A R^{-1} z‖_p`, storing both.
    pub fn measure(&mut self, a: &DMatrix<f64>, seed: u64) -> (f64, f64) {
        let u = self.basis(a);
        let alpha = norm_pp(u.as_slice(), self.p).powf(1.0 / self.p);
        let beta = if self.p == 2.0 {
            let sv = u.singular_values();
            1.0 / sv.min()
        } else {
            estimate_beta(&u, self.p, seed, 10_000)
        };
        self.alpha_emp = Some(alpha);
        self.beta_emp = Some(beta);
        (alpha, beta)
    }

    /// `β̂^p ‖a_i R^{-1}‖_p^p` per row (β̂ taken as 1 when not measured).
    pub fn leverage_bounds(&self, rows: &DMatrix<f64>) -> Vec<f64> {
        let bp = self.beta_emp.unwrap_or(1.0).powf(self.p);
        let u = self.basis(rows);
        (0..u.nrows())
            .map(|i| {
                let r: Vec<f64> = u.row(i).iter().copied().collect();
                bp * norm_pp(&r, self.p)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        writeln!(
            w,
            "# conditioner p={} seed={} tag={} kind={} d={} embed_rows={} alpha={} beta={}",
            self.p,
            opt(self.meta.seed.map(|s| s.to_string())),
            opt(self.meta.tag.map(|s| s.to_string())),
            opt(self.meta.kind.map(|k| k.name().to_string())),
            self.d(),
            self.meta.embed_rows,
            opt(self.alpha_emp.map(|s| s.to_string())),
            opt(self.beta_emp.map(|s| s.to_string())),
        )?;
        for (name, m) in [("R", &self.r), ("R_inv", &self.r_inv)] {
            for i in 0..m.nrows() {
                let vals: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{name},{i},{}", vals.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut meta: HashMap<String, String> = HashMap::new();
        let mut rmat: Vec<Vec<f64>> = Vec::new();
        let mut rinv: Vec<Vec<f64>> = Vec::new();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            let mut it = t.split(',');
            let name = it.next().unwrap_or("");
            let _idx = it.next();
            let vals = it
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse { line: no + 1, msg: "non-numeric conditioner entry".into() })?;
            match name {
                "R" => rmat.push(vals),
                "R_inv" => rinv.push(vals),
                other => return Err(Error::Parse { line: no + 1, msg: format!("unknown block `{other}`") }),
            }
        }
        let d = rmat.len();
        if d == 0 || rinv.len() != d || rmat.iter().chain(&rinv).any(|r| r.len() != d) {
            return Err(Error::Format("conditioner needs d rows of R and R_inv with d entries".into()));
        }
        let to_m = |rows: &[Vec<f64>]| DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        let get = |k: &str| meta.get(k).filter(|v| v.as_str() != "-");
        let p = get("p")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("conditioner header lacks p".into()))?;
        Ok(Self {
            p,
            r: to_m(&rmat),
            r_inv: to_m(&rinv),
            q: DMatrix::zeros(0, d),
            alpha_emp: get("alpha").and_then(|v| v.parse().ok()),
            beta_emp: get("beta").and_then(|v| v.parse().ok()),
            meta: ConditionerMeta {
                seed: get("seed").and_then(|v| v.parse().ok()),
                tag: get("tag").and_then(|v| v.parse().ok()),
                kind: get("kind").and_then(|v| match v.as_str() {
                    "countsketch" => Some(EmbeddingKind::CountSketch),
                    "pstable" => Some(EmbeddingKind::PStable),
                    _ => None,
                }),
                embed_rows: get("embed_rows").and_then(|v| v.parse().ok()).unwrap_or(0),
            },
        })
    }
}

fn dual_norm(z: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        z.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        let q = p / (p - 1.0);
        norm_pp(z, q).powf(1.0 / q)
    }
}

fn ratio(u: &DMatrix<f64>, z: &[f64], p: f64) -> f64 {
    let mut acc = KahanSum::default();
    for i in 0..u.nrows() {
        let t: f64 = (0..u.ncols()).map(|c| u[(i, c)] * z[c]).sum();
        acc.add(t.abs().powf(p));
    }
    let den = acc.sum().powf(1.0 / p);
    if den == 0.0 {
        f64::INFINITY
    } else {
        dual_norm(z, p) / den
    }
}

/// Random search over Gaussian, coordinate and sign directions, then a local
/// refinement of the best one.
fn estimate_beta(u: &DMatrix<f64>, p: f64, seed: u64, tries: usize) -> f64 {
    let d = u.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (0.0f64, vec![0.0; d]);
    let consider = |z: Vec<f64>, best: &mut (f64, Vec<f64>)| {
        let r = ratio(u, &z, p);
        if r > best.0 {
            *best = (r, z);
        }
    };
    for c in 0..d {
        let mut z = vec![0.0; d];
        z[c] = 1.0;
        consider(z, &mut best);
    }
    for t in 0..tries.saturating_sub(d) {
        let z: Vec<f64> = if t % 2 == 0 {
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        consider(z, &mut best);
    }
    let mut step = 0.5;
    let mut z = best.1.clone();
    let scale = z.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    z.iter_mut().for_each(|v| *v /= scale);
    let mut cur = best.0;
    for _ in 0..400 {
        let mut cand = z.clone();
        for v in cand.iter_mut() {
            *v += step * rng.sample::<f64, _>(StandardNormal);
        }
        let r = ratio(u, &cand, p);
        if r > cur {
            cur = r;
            z = cand;
        } else {
            step *= 0.98;
        }
    }
    cur.max(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    fn sketch_matrix(a: &DMatrix<f64>, p: f64, c: f64, seed: u64) -> EmbeddingSketch {
        let mut sk = EmbeddingSketch::with_defaults(a.nrows() as u64, a.ncols(), p, c, SeedSet::new(seed, 0x40)).unwrap();
        for i in 0..a.nrows() {
            let r: Vec<f64> = a.row(i).iter().copied().collect();
            sk.update_row(i as u64, &r).unwrap();
        }
        sk
    }

    #[test]
    fn cauchy_median_is_one() {
        let keys = SeedSet::new(1, 2).keys();
        let mut v: Vec<f64> = (0..200_000u64)
            .map(|i| stable_from_uniforms(1.0, keys.uniform_aux(i, 0, 0), keys.uniform_aux(i, 0, 1)).abs())
            .collect();
        v.sort_by(|a, b| a.total_cmp(b));
        assert!((v[v.len() / 2] - 1.0).abs() < 0.02);
        // Gaussian with variance 2: median |X| = sqrt(2) * 0.6745
        assert!((stable_abs_median(2.0) - std::f64::consts::SQRT_2 * 0.674_489_75).abs() < 0.01);
    }

    #[test]
    fn single_update_is_a_column_of_pi() {
        for kind in [EmbeddingKind::CountSketch, EmbeddingKind::PStable] {
            let mut sk = EmbeddingSketch::new(10, 3, 1.5, kind, 8, SeedSet::new(3, 0x40)).unwrap();
            sk.update(&TurnstileUpdate::new(4, 2, 2.5)).unwrap();
            let m = sk.matrix();
            for k in 0..8 {
                assert_eq!(m[(k, 2)], 2.5 * sk.entry(k, 4));
                assert_eq!(m[(k, 0)], 0.0);
            }
        }
    }

    #[test]
    fn identity_gives_orthonormal_basis() {
        let a = DMatrix::<f64>::identity(4, 4);
        let c = Conditioner::from_embedded(a.clone(), 2.0).unwrap();
        let u = c.basis(&a);
        assert_relative_eq!(u.transpose() * &u, DMatrix::identity(4, 4), epsilon = 1e-14);
    }

    #[test]
    fn qr_factors_are_valid() {
        let a = gaussian(300, 5, 1);
        let sk = sketch_matrix(&a, 1.0, 10.0, 2);
        let c = sk.finalize().unwrap();
        let m = sk.matrix();
        assert!((&m - &c.q * &c.r).norm() <= 1e-9 * m.norm());
        assert_relative_eq!(c.q.transpose() * &c.q, DMatrix::identity(5, 5), epsilon = 1e-10);
        assert!((&c.r * &c.r_inv - DMatrix::identity(5, 5)).norm() < 1e-10);
        for i in 0..5 {
            assert!(c.r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(c.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let mut a = gaussian(50, 3, 4);
        for i in 0..50 {
            a[(i, 2)] = a[(i, 0)] * 2.0;
        }
        let err = Conditioner::from_embedded(a, 2.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { deficient: 1, d: 3 }), "{err}");
    }

    #[test]
    fn countsketch_embedding_has_small_distortion() {
        let a = gaussian(500, 5, 7);
        let sk = sketch_matrix(&a, 2.0, 10.0, 8);
        let pa = sk.matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for _ in 0..100 {
            let x = DMatrix::from_fn(5, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r = (&pa * &x).norm() / (&a * &x).norm();
            lo = lo.min(r);
            hi = hi.max(r);
        }
        assert!(hi / lo <= 4.0, "{lo} {hi}");
    }

    #[test]
    fn csv_round_trip() {
        let a = gaussian(100, 3, 5);
        let mut c = sketch_matrix(&a, 1.0, 10.0, 6).finalize().unwrap();
        c.measure(&a, 1);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = Conditioner::read_csv(&buf[..]).unwrap();
        assert_eq!(back.r, c.r);
        assert_eq!(back.r_inv, c.r_inv);
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.beta_emp, c.beta_emp);
    }

    #[test]
    fn measured_beta_bounds_exact_l2_leverage() {
        let a = gaussian(20, 3, 11);
        let mut c = sketch_matrix(&a, 2.0, 10.0, 12).finalize().unwrap();
        c.measure(&a, 3);
        let svd = a.clone().svd(true, false);
        let u = svd.u.unwrap();
        let bounds = c.leverage_bounds(&a);
        for i in 0..20 {
            let lev = u.row(i).norm_squared();
            assert!(bounds[i] >= lev * (1.0 - 1e-10), "row {i}: {} < {lev}", bounds[i]);
        }
    }
}
