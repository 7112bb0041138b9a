//! Scalar losses `g(t)` applied to `t = a_i z`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_phi_p_cdf, ln_phi_p_density};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `|t|^p`
    Lp { p: f64 },
    /// `max(0, t)^p`
    Relu { p: f64 },
    /// `ln(1 + e^t)`
    Logistic,
    /// `-ln Φ_p(-t)` with `Φ_p` the p-generalized normal CDF.
    Probit { p: f64 },
}

/// Value, first and second derivative at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: f64,
    pub hess: f64,
}

impl LossKind {
    pub fn parse(name: &str, p: f64) -> Result<Self> {
        let k = match name {
            "lp" => LossKind::Lp { p },
            "relu" | "relu_p" => LossKind::Relu { p },
            "logistic" => LossKind::Logistic,
            "probit" | "probit_p" => LossKind::Probit { p },
            other => return Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Lp { p } | LossKind::Relu { p } | LossKind::Probit { p } if !(1.0..=2.0).contains(&p) => {
                Err(Error::InvalidConfig(format!("loss exponent p = {p} outside [1, 2]")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Lp { .. } => "lp",
            LossKind::Relu { .. } => "relu",
            LossKind::Logistic => "logistic",
            LossKind::Probit { .. } => "probit",
        }
    }

    /// Exponent of the primary row sampler; logistic uses 1.
    pub fn p(&self) -> f64 {
        match *self {
            LossKind::Lp { p } | LossKind::Relu { p } | LossKind::Probit { p } => p,
            LossKind::Logistic => 1.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            LossKind::Lp { p } => pow_abs(t, p),
            LossKind::Relu { p } => {
                if t > 0.0 {
                    pow_abs(t, p)
                } else {
                    0.0
                }
            }
            LossKind::Logistic => t.max(0.0) + (-t.abs()).exp().ln_1p(),
            LossKind::Probit { p } => -ln_phi_p_cdf(p, -t),
        }
    }

    /// Derivative; at kinks the midpoint of the subdifferential.
    pub fn grad(&self, t: f64) -> f64 {
        match *self {
            LossKind::Lp { p } => {
                if t == 0.0 {
                    0.0
                } else {
                    p * pow_abs(t, p - 1.0) * t.signum()
                }
            }
            LossKind::Relu { p } => {
                if t > 0.0 {
                    p * pow_abs(t, p - 1.0)
                } else if t == 0.0 && p == 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            LossKind::Logistic => sigmoid(t),
            LossKind::Probit { p } => probit_ratio(p, t),
        }
    }

    /// Second derivative where it exists; `0` at the kink of `p = 1` losses and
    /// `+inf` where it blows up.
    pub fn hess(&self, t: f64) -> f64 {
        match *self {
            LossKind::Lp { p } => {
                if p == 1.0 {
                    0.0
                } else if t == 0.0 && p < 2.0 {
                    f64::INFINITY
                } else {
                    p * (p - 1.0) * pow_abs(t, p - 2.0)
                }
            }
            LossKind::Relu { p } => {
                if t > 0.0 && p > 1.0 {
                    p * (p - 1.0) * pow_abs(t, p - 2.0)
                } else {
                    0.0
                }
            }
            LossKind::Logistic => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            LossKind::Probit { p } => {
                let g = probit_ratio(p, t);
                let sg = if t == 0.0 { 0.0 } else { t.signum() };
                g * (g - sg * pow_abs(t, p - 1.0))
            }
        }
    }

    /// Whether the solver should smooth this loss.
    pub fn needs_smoothing(&self) -> bool {
        match *self {
            LossKind::Lp { p } => p < 2.0,
            LossKind::Relu { .. } => true,
            LossKind::Logistic | LossKind::Probit { .. } => false,
        }
    }

    /// Smooth convex surrogate with parameter `mu > 0`; equals the loss itself
    /// when no smoothing is needed.
    pub fn smoothed(&self, t: f64, mu: f64) -> LossEval {
        match *self {
            LossKind::Lp { p } if p < 2.0 => {
                let q2 = t * t + mu * mu;
                let q = q2.sqrt();
                let qp = q.powf(p);
                LossEval {
                    value: qp,
                    grad: p * qp / q2 * t,
                    hess: p * qp / (q2 * q2) * ((p - 1.0) * t * t + mu * mu),
                }
            }
            LossKind::Relu { p } => {
                let q = (t * t + mu * mu).sqrt();
                let h = if t >= 0.0 { 0.5 * (t + q) } else { 0.5 * mu * mu / (q - t) };
                let hp = h.powf(p);
                LossEval {
                    value: hp,
                    grad: p * hp / q,
                    hess: p * hp * (p * q - t) / (q * q * q),
                }
            }
            _ => self.eval(t),
        }
    }

    pub fn eval(&self, t: f64) -> LossEval {
        LossEval {
            value: self.value(t),
            grad: self.grad(t),
            hess: self.hess(t),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Logistic => write!(f, "logistic"),
            other => write!(f, "{}(p={})", other.name(), other.p()),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `logistic` or `name:p`, e.g. `lp:1.5`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((name, p)) => {
                let p = p
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad exponent in `{s}`")))?;
                LossKind::parse(name, p)
            }
            None => LossKind::parse(s, 2.0),
        }
    }
}

#[inline]
fn pow_abs(t: f64, e: f64) -> f64 {
    let a = t.abs();
    if e == 1.0 {
        a
    } else if e == 0.0 {
        1.0
    } else if e == 2.0 {
        a * a
    } else {
        a.powf(e)
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `φ_p(t) / Φ_p(-t)`, the derivative of the probit loss.
fn probit_ratio(p: f64, t: f64) -> f64 {
    (ln_phi_p_density(p, t) - ln_phi_p_cdf(p, -t)).exp()
}

/// `Σ_i w_i g(a_i z)`.
pub fn weighted_loss(loss: &LossKind, margins: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut acc = crate::numeric::KahanSum::default();
    margins.for_each(|(t, w)| acc.add(w * loss.value(t)));
    acc.sum()
}
