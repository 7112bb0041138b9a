//! Sketch size presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Constants from the worst-case guarantees. Very large.
    Theory,
    /// `r = ceil(k max(30, ln n))`, `s = 2 ceil(max(5, ln(n)/2))`.
    #[default]
    Practical,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Theory => "theory",
            Mode::Practical => "practical",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theory" => Ok(Mode::Theory),
            "practical" => Ok(Mode::Practical),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

/// Buckets and repetitions of one sketch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSize {
    pub r: usize,
    pub s: usize,
}

fn ln_n(n: u64) -> f64 {
    (n.max(2) as f64).ln()
}

fn ceil_usize(x: f64) -> usize {
    if x >= usize::MAX as f64 {
        usize::MAX
    } else {
        x.ceil().max(1.0) as usize
    }
}

const MEDIAN_SLACK: f64 = 0.025 * 0.025 * 0.025;

pub fn practical(n: u64, k: usize) -> SketchSize {
    let l = ln_n(n);
    SketchSize {
        r: ceil_usize(k as f64 * l.max(30.0)),
        s: 2 * ceil_usize((l / 2.0).max(5.0)),
    }
}

/// Heavy-hitter sizes for recovering rows with `‖a‖_p^p ≥ γ M`.
pub fn theory_heavy_hitters(n: u64, p: f64, eps: f64, gamma: f64, delta: f64) -> SketchSize {
    SketchSize {
        r: ceil_usize(8.0 / gamma * (12.0 / eps).powf(p)),
        s: ceil_usize(3.0 * (6.0 * n as f64 / delta).ln() / MEDIAN_SLACK),
    }
}

/// Sampler sizes for a sample of about `k` rows.
pub fn theory_sampler(n: u64, k: usize, p: f64, eps: f64, delta: f64) -> SketchSize {
    SketchSize {
        r: ceil_usize(32.0 * k as f64 * ln_n(n) * (72.0 / eps).powf(p)),
        s: ceil_usize(3.0 * (36.0 * n as f64 / delta).ln() / MEDIAN_SLACK),
    }
}

/// Conditioning quality `(αβ)^p` of the embedding, hidden constants set to 1.
pub fn conditioning_product(d: usize, p: f64) -> f64 {
    let d = d.max(2) as f64;
    if p >= 2.0 {
        d
    } else {
        let ld = d.ln();
        d.powf(3.0 - p / 2.0) * ld.powf(2.0 - p / 2.0) * ld.ln().max(1.0)
    }
}

/// Coreset sizes per loss; `ab_p` is `(αβ)^p` (see [`conditioning_product`]).
pub fn theory_coreset(loss: &LossKind, n: u64, k: usize, eps: f64, delta: f64, mu: f64, ab_p: f64) -> SketchSize {
    let base = k as f64 * ln_n(n);
    let r = match *loss {
        LossKind::Lp { p } => base * (ab_p / eps).powf(p),
        LossKind::Relu { p } => base * (mu * ab_p / eps).powf(p),
        LossKind::Logistic => base * (mu * ab_p / eps),
        LossKind::Probit { p } => base * (p * mu * mu * ab_p / eps).powf(p),
    };
    SketchSize {
        r: ceil_usize(r),
        s: ceil_usize(3.0 * (36.0 * n as f64 / delta).ln()),
    }
}
