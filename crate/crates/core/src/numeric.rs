//! Small numeric helpers: error-free accumulation, p-norms, order statistics.

use std::cmp::Ordering;

/// Double-double accumulator.
///
/// `hi` is always the f64 rounding of `hi + lo`, so reading `hi` gives the
/// correctly rounded value of the represented sum in all but pathological
/// cases. Regrouping a sequence of additions (sharding, merging) leaves the
/// rounded value unchanged unless the exact sum lies within ~2^-100 relative
/// of an f64 rounding boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Compensated {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Compensated {
    pub const ZERO: Compensated = Compensated { hi: 0.0, lo: 0.0 };

    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        Self { hi, lo }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = two_sum(s, e + self.lo);
        self.hi = hi;
        self.lo = lo;
    }

    #[inline]
    pub fn add_compensated(&mut self, other: &Compensated) {
        let (s, e) = two_sum(self.hi, other.hi);
        let (hi, lo) = two_sum(s, e + (self.lo + other.lo));
        self.hi = hi;
        self.lo = lo;
    }

    /// Adds `self_before * m` where the product of the high part is exact.
    #[inline]
    pub fn add_product(&mut self, x: &Compensated, m: f64) {
        let (p, pe) = two_prod(x.hi, m);
        let (s, e) = two_sum(self.hi, p);
        let (hi, lo) = two_sum(s, e + (self.lo + (pe + x.lo * m)));
        self.hi = hi;
        self.lo = lo;
    }

    #[inline]
    pub fn negate(&self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

/// `Σ |x_c|^p` with Neumaier summation.
pub fn norm_pp(x: &[f64], p: f64) -> f64 {
    let mut acc = KahanSum::default();
    if p == 2.0 {
        x.iter().for_each(|v| acc.add(v * v));
    } else if p == 1.0 {
        x.iter().for_each(|v| acc.add(v.abs()));
    } else {
        x.iter().for_each(|v| acc.add(v.abs().powf(p)));
    }
    acc.sum()
}

/// `Σ |x_c - y_c|^p`.
pub fn dist_pp(x: &[f64], y: &[f64], p: f64) -> f64 {
    let mut acc = KahanSum::default();
    for (a, b) in x.iter().zip(y) {
        let t = (a - b).abs();
        acc.add(if p == 1.0 {
            t
        } else if p == 2.0 {
            t * t
        } else {
            t.powf(p)
        });
    }
    acc.sum()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::default();
        iter.into_iter().for_each(|x| k.add(x));
        k
    }
}

/// 1-based rank `ceil(num/den * s)` computed in integers.
#[inline]
pub fn ceil_rank(num: usize, den: usize, s: usize) -> usize {
    ((num * s).div_ceil(den)).clamp(1, s.max(1))
}

/// Lower median rank `ceil(s/2)`.
#[inline]
pub fn median_rank(s: usize) -> usize {
    s.div_ceil(2).max(1)
}

/// Value of 1-based rank `rank` in ascending order. Reorders `values`.
pub fn order_statistic(values: &mut [f64], rank: usize) -> f64 {
    assert!(!values.is_empty() && rank >= 1 && rank <= values.len());
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    *v
}

pub fn lower_median(values: &mut [f64]) -> f64 {
    let r = median_rank(values.len());
    order_statistic(values, r)
}

pub fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Median of a non-empty slice (average of the two middle values for even
/// lengths), used for reporting.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(cmp_f64);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks() {
        assert_eq!(ceil_rank(65, 100, 4), 3);
        assert_eq!(ceil_rank(65, 100, 20), 13);
        assert_eq!(ceil_rank(65, 100, 200), 130);
        assert_eq!(ceil_rank(65, 100, 1), 1);
        assert_eq!(median_rank(10), 5);
        assert_eq!(median_rank(7), 4);
    }

    #[test]
    fn percentile_of_small_set() {
        let mut v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(order_statistic(&mut v, ceil_rank(65, 100, 4)), 3.0);
        let mut v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(lower_median(&mut v), 2.0);
    }

    #[test]
    fn norms() {
        assert_eq!(norm_pp(&[3.0, -4.0], 2.0), 25.0);
        assert_eq!(norm_pp(&[3.0, -4.0], 1.0), 7.0);
        assert!((norm_pp(&[-2.0], 1.5) - 2f64.powf(1.5)).abs() < 1e-15);
        assert_eq!(dist_pp(&[1.0, 1.0], &[1.0, 1.0], 1.3), 0.0);
    }

    #[test]
    fn cancellation_is_exact() {
        let mut c = Compensated::default();
        c.add(1e16);
        c.add(1.0);
        c.add(-1e16);
        assert_eq!(c.value(), 1.0);
    }

    proptest! {
        #[test]
        fn regrouping_keeps_rounded_value(xs in proptest::collection::vec(-1e6f64..1e6, 1..60), cut in 0usize..60) {
            let cut = cut.min(xs.len());
            let mut seq = Compensated::default();
            xs.iter().for_each(|&x| seq.add(x));
            let mut left = Compensated::default();
            let mut right = Compensated::default();
            xs[..cut].iter().for_each(|&x| left.add(x));
            xs[cut..].iter().rev().for_each(|&x| right.add(x));
            left.add_compensated(&right);
            prop_assert_eq!(seq.value().to_bits(), left.value().to_bits());
        }
    }
}
