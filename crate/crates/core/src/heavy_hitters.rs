//! CountSketch over d-dimensional rows with percentile-threshold extraction.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{SeedKeys, SeedSet};
use crate::numeric::{ceil_rank, dist_pp, lower_median, norm_pp, order_statistic, Compensated};
use crate::stream::TurnstileUpdate;

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"LPTS1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub n: u64,
    pub d: usize,
    pub r: usize,
    pub s: usize,
    pub p: f64,
    pub eps: f64,
    /// Multiple of `M0` a median estimate must reach; `(12/eps)^p` by default.
    pub threshold_factor: f64,
}

impl SketchConfig {
    pub fn new(n: u64, d: usize, r: usize, s: usize, p: f64, eps: f64) -> Result<Self> {
        let cfg = Self {
            n,
            d,
            r,
            s,
            p,
            eps,
            threshold_factor: (12.0 / eps).powf(p),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_threshold_factor(mut self, factor: f64) -> Result<Self> {
        self.threshold_factor = factor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 || self.d == 0 || self.r == 0 || self.s == 0 {
            return bad(format!(
                "n, d, r, s must be positive (got n={}, d={}, r={}, s={})",
                self.n, self.d, self.r, self.s
            ));
        }
        if !(1.0..=2.0).contains(&self.p) {
            return bad(format!("p = {} outside [1, 2]", self.p));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps = {} outside (0, 1)", self.eps));
        }
        if !(self.threshold_factor.is_finite() && self.threshold_factor >= 0.0) {
            return bad(format!("threshold factor {} must be finite and non-negative", self.threshold_factor));
        }
        Ok(())
    }

    fn same_as(&self, o: &SketchConfig) -> bool {
        self.n == o.n
            && self.d == o.d
            && self.r == o.r
            && self.s == o.s
            && self.p.to_bits() == o.p.to_bits()
            && self.eps.to_bits() == o.eps.to_bits()
            && self.threshold_factor.to_bits() == o.threshold_factor.to_bits()
    }
}

/// Which row indices extraction inspects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Candidates {
    /// Rows that received at least one update.
    #[default]
    Touched,
    /// Every index in `0..n`.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeavyEntry {
    pub index: u64,
    pub row: Vec<f64>,
    /// Median over repetitions of the per-repetition norm estimate.
    pub median_estimate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeavyList {
    pub entries: Vec<HeavyEntry>,
    pub threshold_m0: f64,
    /// Candidates with a positive estimate that fell below the threshold.
    pub rejected_nonzero: usize,
}

impl HeavyList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&HeavyEntry> {
        self.entries
            .binary_search_by_key(&index, |e| e.index)
            .ok()
            .map(|k| &self.entries[k])
    }
}

/// `s` repetitions of `r` buckets, each a d-dimensional accumulator.
#[derive(Clone, Debug)]
pub struct SketchState {
    config: SketchConfig,
    seeds: SeedSet,
    keys: SeedKeys,
    buckets: Vec<Compensated>,
    update_count: u64,
    touched: BTreeSet<u64>,
}

impl SketchState {
    pub fn new(config: SketchConfig, seeds: SeedSet) -> Result<Self> {
        config.validate()?;
        let len = config
            .s
            .checked_mul(config.r)
            .and_then(|x| x.checked_mul(config.d))
            .ok_or_else(|| Error::InvalidConfig("s * r * d overflows".into()))?;
        Ok(Self {
            config,
            seeds,
            keys: seeds.keys(),
            buckets: vec![Compensated::ZERO; len],
            update_count: 0,
            touched: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn seeds(&self) -> SeedSet {
        self.seeds
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn touched(&self) -> &BTreeSet<u64> {
        &self.touched
    }

    #[inline]
    fn offset(&self, j: usize, b: usize) -> usize {
        (j * self.config.r + b) * self.config.d
    }

    fn check_row(&self, row: u64, col: usize) -> Result<()> {
        if row >= self.config.n || col >= self.config.d {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                n: self.config.n,
                d: self.config.d,
            });
        }
        Ok(())
    }

    pub fn update(&mut self, u: &TurnstileUpdate) -> Result<()> {
        self.update_entry(u.row, u.col, u.value)
    }

    pub fn update_entry(&mut self, row: u64, col: usize, value: f64) -> Result<()> {
        self.check_row(row, col)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("update value"));
        }
        for j in 0..self.config.s {
            let b = self.keys.bucket_of(row, j, self.config.r);
            let sg = self.keys.sign_of(row, j);
            let o = self.offset(j, b) + col;
            self.buckets[o].add(sg * value);
        }
        self.update_count += 1;
        self.touched.insert(row);
        Ok(())
    }

    /// Adds a whole row increment `x` to row `row`.
    pub fn update_row(&mut self, row: u64, x: &[f64]) -> Result<()> {
        self.check_row(row, 0)?;
        if x.len() != self.config.d {
            return Err(Error::Mismatch(format!("row of length {} for d = {}", x.len(), self.config.d)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("row increment"));
        }
        for j in 0..self.config.s {
            let b = self.keys.bucket_of(row, j, self.config.r);
            let sg = self.keys.sign_of(row, j);
            let o = self.offset(j, b);
            for (acc, v) in self.buckets[o..o + self.config.d].iter_mut().zip(x) {
                acc.add(sg * v);
            }
        }
        self.update_count += 1;
        self.touched.insert(row);
        Ok(())
    }

    pub fn merge(&mut self, other: &SketchState) -> Result<()> {
        if !self.config.same_as(&other.config) {
            return Err(Error::Mismatch(format!("configs differ: {:?} vs {:?}", self.config, other.config)));
        }
        if self.seeds != other.seeds {
            return Err(Error::Mismatch(format!("seeds differ: {:?} vs {:?}", self.seeds, other.seeds)));
        }
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            a.add_compensated(b);
        }
        self.update_count += other.update_count;
        self.touched.extend(other.touched.iter().copied());
        Ok(())
    }

    pub fn merged(a: &SketchState, b: &SketchState) -> Result<SketchState> {
        let mut out = a.clone();
        out.merge(b)?;
        Ok(out)
    }

    /// Replaces every bucket vector `b` by `b P`.
    pub fn post_multiply(&mut self, p: &DMatrix<f64>) -> Result<()> {
        let d = self.config.d;
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::Mismatch(format!("{}x{} matrix for d = {d}", p.nrows(), p.ncols())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("post-multiplication matrix"));
        }
        let mut tmp = vec![Compensated::ZERO; d];
        for chunk in self.buckets.chunks_mut(d) {
            for (c, out) in tmp.iter_mut().enumerate() {
                *out = Compensated::ZERO;
                for (l, b) in chunk.iter().enumerate() {
                    out.add_product(b, p[(l, c)]);
                }
            }
            chunk.copy_from_slice(&tmp);
        }
        Ok(())
    }

    /// Rounded contents of bucket `b` in repetition `j`.
    pub fn bucket(&self, j: usize, b: usize) -> Vec<f64> {
        let o = self.offset(j, b);
        self.buckets[o..o + self.config.d].iter().map(Compensated::value).collect()
    }

    /// All rounded bucket values in (repetition, bucket, column) order.
    pub fn bucket_values(&self) -> Vec<f64> {
        self.buckets.iter().map(Compensated::value).collect()
    }

    /// Order statistic at rank `ceil(0.65 s)` of the first-bucket norms.
    pub fn compute_m0(&self) -> f64 {
        let mut norms: Vec<f64> = (0..self.config.s)
            .map(|j| norm_pp(&self.bucket(j, 0), self.config.p))
            .collect();
        order_statistic(&mut norms, ceil_rank(65, 100, self.config.s))
    }

    /// Signed bucket contents `σ(i,j) B[j, h(i,j)]` for every repetition.
    pub fn row_estimates(&self, row: u64) -> Vec<Vec<f64>> {
        (0..self.config.s)
            .map(|j| {
                let b = self.keys.bucket_of(row, j, self.config.r);
                let sg = self.keys.sign_of(row, j);
                let o = self.offset(j, b);
                self.buckets[o..o + self.config.d].iter().map(|c| sg * c.value()).collect()
            })
            .collect()
    }

    /// Lower median of the per-repetition norm estimates of `row`.
    pub fn median_estimate(&self, row: u64) -> f64 {
        let mut v: Vec<f64> = self
            .row_estimates(row)
            .iter()
            .map(|x| norm_pp(x, self.config.p))
            .collect();
        lower_median(&mut v)
    }

    pub fn extract_heavy(&self) -> HeavyList {
        self.extract(Candidates::Touched)
    }

    pub fn extract(&self, which: Candidates) -> HeavyList {
        let m0 = self.compute_m0();
        let threshold = self.config.threshold_factor * m0;
        let cand: Vec<u64> = match which {
            Candidates::Touched => self.touched.iter().copied().collect(),
            Candidates::All => (0..self.config.n).collect(),
        };
        let p = self.config.p;
        let found: Vec<(Option<HeavyEntry>, bool)> = cand
            .par_iter()
            .map(|&i| {
                let est = self.row_estimates(i);
                let mut norms: Vec<f64> = est.iter().map(|x| norm_pp(x, p)).collect();
                let v = lower_median(&mut norms);
                if v <= 0.0 {
                    return (None, false);
                }
                if v < threshold {
                    return (None, true);
                }
                let j = representative(&est, p);
                let entry = HeavyEntry {
                    index: i,
                    row: est[j].clone(),
                    median_estimate: v,
                };
                (Some(entry), false)
            })
            .collect();
        let rejected_nonzero = found.iter().filter(|(_, r)| *r).count();
        let entries = found.into_iter().filter_map(|(e, _)| e).collect();
        HeavyList {
            entries,
            threshold_m0: m0,
            rejected_nonzero,
        }
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        let u32_of = |x: usize, what: &str| {
            u32::try_from(x).map_err(|_| Error::Format(format!("{what} = {x} does not fit the snapshot header")))
        };
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&c.n.to_le_bytes())?;
        w.write_all(&u32_of(c.d, "d")?.to_le_bytes())?;
        w.write_all(&u32_of(c.r, "r")?.to_le_bytes())?;
        w.write_all(&u32_of(c.s, "s")?.to_le_bytes())?;
        w.write_all(&c.p.to_le_bytes())?;
        w.write_all(&c.eps.to_le_bytes())?;
        w.write_all(&c.threshold_factor.to_le_bytes())?;
        w.write_all(&self.seeds.master_seed.to_le_bytes())?;
        w.write_all(&self.seeds.instance_tag.to_le_bytes())?;
        w.write_all(&self.update_count.to_le_bytes())?;
        for b in &self.buckets {
            w.write_all(&b.hi.to_le_bytes())?;
        }
        for b in &self.buckets {
            w.write_all(&b.lo.to_le_bytes())?;
        }
        w.write_all(&(self.touched.len() as u64).to_le_bytes())?;
        for i in &self.touched {
            w.write_all(&i.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a sketch snapshot (bad magic)".into()));
        }
        let n = read_u64(&mut r)?;
        let d = read_u32(&mut r)? as usize;
        let rr = read_u32(&mut r)? as usize;
        let s = read_u32(&mut r)? as usize;
        let p = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let threshold_factor = read_f64(&mut r)?;
        let master_seed = read_u64(&mut r)?;
        let tag = read_u32(&mut r)?;
        let update_count = read_u64(&mut r)?;
        let config = SketchConfig {
            n,
            d,
            r: rr,
            s,
            p,
            eps,
            threshold_factor,
        };
        let mut st = SketchState::new(config, SeedSet::new(master_seed, tag))?;
        for b in st.buckets.iter_mut() {
            b.hi = read_f64(&mut r)?;
        }
        for b in st.buckets.iter_mut() {
            b.lo = read_f64(&mut r)?;
        }
        let t = read_u64(&mut r)?;
        for _ in 0..t {
            let i = read_u64(&mut r)?;
            if i >= n {
                return Err(Error::Format(format!("touched index {i} out of range")));
            }
            st.touched.insert(i);
        }
        st.update_count = update_count;
        Ok(st)
    }
}

/// Index `j` minimising the lower median over `j'` of `‖x_j - x_j'‖_p^p`;
/// ties go to the smallest `j`.
pub fn representative(est: &[Vec<f64>], p: f64) -> usize {
    let s = est.len();
    let mut best = (f64::INFINITY, 0usize);
    let mut dists = vec![0.0; s];
    for (j, x) in est.iter().enumerate() {
        for (dj, y) in dists.iter_mut().zip(est) {
            *dj = dist_pp(x, y, p);
        }
        let m = lower_median(&mut dists);
        if m < best.0 {
            best = (m, j);
            if m == 0.0 {
                break;
            }
        }
    }
    best.1
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: u64, d: usize, r: usize, s: usize) -> SketchConfig {
        SketchConfig::new(n, d, r, s, 1.0, 0.05).unwrap()
    }

    #[test]
    fn single_update_lands_in_one_bucket_per_repetition() {
        let seeds = SeedSet::new(3, 1);
        let mut st = SketchState::new(cfg(10, 2, 8, 5), seeds).unwrap();
        st.update_entry(0, 0, 1.0).unwrap();
        for j in 0..5 {
            let h = seeds.bucket_of(0, j, 8);
            for b in 0..8 {
                let want = if b == h { vec![seeds.sign_of(0, j), 0.0] } else { vec![0.0, 0.0] };
                assert_eq!(st.bucket(j, b), want);
            }
        }
    }

    #[test]
    fn additive_inverse_clears() {
        let mut st = SketchState::new(cfg(10, 2, 8, 5), SeedSet::new(1, 1)).unwrap();
        st.update_entry(4, 1, 0.3).unwrap();
        st.update_entry(4, 1, -0.3).unwrap();
        assert!(st.bucket_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_updates() {
        let mut st = SketchState::new(cfg(10, 2, 8, 5), SeedSet::new(1, 1)).unwrap();
        assert!(matches!(st.update_entry(10, 0, 1.0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(st.update_entry(0, 2, 1.0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(st.update_entry(0, 0, f64::INFINITY), Err(Error::NonFinite(_))));
        assert_eq!(st.update_count(), 0);
    }

    #[test]
    fn merge_checks_compatibility() {
        let a = SketchState::new(cfg(10, 2, 8, 5), SeedSet::new(1, 1)).unwrap();
        let b = SketchState::new(cfg(10, 2, 8, 5), SeedSet::new(2, 1)).unwrap();
        let c = SketchState::new(cfg(10, 2, 9, 5), SeedSet::new(1, 1)).unwrap();
        assert!(SketchState::merged(&a, &b).is_err());
        assert!(SketchState::merged(&a, &c).is_err());
    }

    #[test]
    fn m0_is_order_statistic() {
        let mut st = SketchState::new(cfg(10, 1, 1, 4), SeedSet::new(1, 1)).unwrap();
        for (j, v) in [4.0, 1.0, 3.0, 2.0].into_iter().enumerate() {
            st.buckets[j].add(v);
        }
        assert_eq!(st.compute_m0(), 3.0);
    }

    #[test]
    fn lone_row_is_recovered_exactly() {
        let mut st = SketchState::new(cfg(50, 3, 4, 7), SeedSet::new(11, 1)).unwrap();
        st.update_row(0, &[1.5, -2.0, 0.25]).unwrap();
        let l = st.extract_heavy();
        assert_eq!(l.len(), 1);
        assert_eq!(l.entries[0].index, 0);
        assert_eq!(l.entries[0].row, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn post_multiply_identity_and_scalar() {
        let mut st = SketchState::new(cfg(20, 2, 4, 3), SeedSet::new(5, 1)).unwrap();
        for i in 0..20 {
            st.update_row(i, &[i as f64 * 0.1, 1.0 / (i as f64 + 1.0)]).unwrap();
        }
        let before = st.bucket_values();
        let mut id = st.clone();
        id.post_multiply(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(id.bucket_values(), before);
        st.post_multiply(&(DMatrix::identity(2, 2) * 2.0)).unwrap();
        let doubled: Vec<f64> = before.iter().map(|v| 2.0 * v).collect();
        assert_eq!(st.bucket_values(), doubled);
    }

    #[test]
    fn representative_prefers_majority() {
        let est = vec![vec![5.0], vec![1.0], vec![1.0], vec![9.0], vec![1.0]];
        assert_eq!(representative(&est, 1.0), 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut st = SketchState::new(cfg(30, 2, 4, 3), SeedSet::new(5, 7)).unwrap();
        for i in 0..30 {
            st.update_entry(i, (i % 2) as usize, 0.1 * i as f64).unwrap();
        }
        let mut buf = Vec::new();
        st.write_snapshot(&mut buf).unwrap();
        let back = SketchState::read_snapshot(&buf[..]).unwrap();
        assert_eq!(back.bucket_values(), st.bucket_values());
        assert_eq!(back.touched(), st.touched());
        assert_eq!(back.update_count(), st.update_count());
        assert_eq!(back.seeds(), st.seeds());
        assert!(SketchState::read_snapshot(&b"LPTSX"[..]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(vals in proptest::collection::vec((0u64..40, 0usize..3, -1e3f64..1e3), 1..120), seed in any::<u64>()) {
            let seeds = SeedSet::new(seed, 1);
            let mut a = SketchState::new(cfg(40, 3, 8, 5), seeds).unwrap();
            let mut b = a.clone();
            for &(i, c, v) in &vals { a.update_entry(i, c, v).unwrap(); }
            for &(i, c, v) in vals.iter().rev() { b.update_entry(i, c, v).unwrap(); }
            prop_assert_eq!(a.bucket_values(), b.bucket_values());
        }

        #[test]
        fn merge_commutes(vals in proptest::collection::vec((0u64..40, 0usize..3, -1e3f64..1e3), 1..80), cut in 0usize..80) {
            let seeds = SeedSet::new(9, 1);
            let cut = cut.min(vals.len());
            let mut a = SketchState::new(cfg(40, 3, 8, 5), seeds).unwrap();
            let mut b = a.clone();
            for &(i, c, v) in &vals[..cut] { a.update_entry(i, c, v).unwrap(); }
            for &(i, c, v) in &vals[cut..] { b.update_entry(i, c, v).unwrap(); }
            let ab = SketchState::merged(&a, &b).unwrap();
            let ba = SketchState::merged(&b, &a).unwrap();
            prop_assert_eq!(ab.bucket_values(), ba.bucket_values());
            prop_assert_eq!(ab.update_count(), vals.len() as u64);
        }
    }
}
