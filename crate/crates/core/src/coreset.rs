//! Weighted coresets from turnstile streams.
//!
//! A builder runs the conditioning embedding, one or two conditioned samplers
//! and a uniform sampler side by side over the same stream. `finish` turns
//! them into one weighted row set whose weights are inverse combined
//! inclusion probabilities.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Conditioner, EmbeddingSketch};
use crate::error::{Error, Result};
use crate::hashing::{SeedSet, TAG_EMBED_ONE, TAG_EMBED_P, TAG_ONE_SAMPLER, TAG_P_SAMPLER, TAG_UNIFORM};
use crate::loss::LossKind;
use crate::params::{self, Mode, SketchSize};
use crate::sampler::{union_mixture, LpSampler, Preconditioner, SamplerConfig, SamplerMode, UniformSampler, WeightedSample};
use crate::solver::{self, Solution, SolverOptions};
use crate::stream::TurnstileUpdate;

/// Largest number of bucket entries a builder will allocate.
pub const MAX_BUCKET_ENTRIES: u128 = 1 << 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub loss: LossKind,
    pub n: u64,
    pub d: usize,
    pub k: usize,
    pub eps: f64,
    pub delta: f64,
    pub mu: f64,
    pub mode: Mode,
    pub sampler_mode: SamplerMode,
    pub seed: u64,
    /// Row constant of the conditioning embedding.
    pub embed_c: f64,
    /// Adds the uniform component.
    pub uniform: bool,
}

impl CoresetConfig {
    pub fn new(loss: LossKind, n: u64, d: usize, k: usize, seed: u64) -> Self {
        Self {
            loss,
            n,
            d,
            k,
            eps: 0.25,
            delta: 0.05,
            mu: 1.0,
            mode: Mode::Practical,
            sampler_mode: SamplerMode::Modified,
            seed,
            embed_c: 10.0,
            uniform: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.n == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("n, d and k must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig("eps and delta must lie in (0, 1)".into()));
        }
        if !(self.mu >= 1.0) {
            return Err(Error::InvalidConfig(format!("mu = {} must be at least 1", self.mu)));
        }
        Ok(())
    }

    /// Sampler sizes for exponent `p`.
    pub fn sketch_size(&self, p: f64) -> SketchSize {
        match self.mode {
            Mode::Practical => params::practical(self.n, self.k),
            Mode::Theory => params::theory_coreset(
                &self.loss,
                self.n,
                self.k,
                self.eps,
                self.delta,
                self.mu,
                params::conditioning_product(self.d, p),
            ),
        }
    }

    fn sampler_config(&self, p: f64) -> Result<SamplerConfig> {
        let size = self.sketch_size(p);
        let copies = if self.sampler_mode == SamplerMode::Modified { 2 } else { 1 };
        let cells = size.r as u128 * size.s as u128 * self.d as u128 * copies;
        if cells > MAX_BUCKET_ENTRIES {
            return Err(Error::InvalidConfig(format!(
                "sketch of r = {}, s = {} needs {cells} buckets entries; use practical mode",
                size.r, size.s
            )));
        }
        let mut cfg = SamplerConfig::new(self.n, self.d, self.k, p, self.eps, size).with_mode(self.sampler_mode);
        cfg.delta = self.delta;
        if self.mode == Mode::Practical {
            cfg = cfg.with_threshold_factor(1.0);
        }
        Ok(cfg)
    }

    pub fn uniform_rate(&self) -> f64 {
        (self.k as f64 / self.n as f64).min(1.0)
    }

    /// Exponents of the row samplers for this loss.
    pub fn sampler_exponents(&self) -> Vec<f64> {
        match self.loss {
            LossKind::Lp { p } | LossKind::Relu { p } => vec![p],
            LossKind::Logistic => vec![1.0],
            LossKind::Probit { p } => vec![p, 1.0],
        }
    }
}

struct Arm {
    embed: EmbeddingSketch,
    sampler: LpSampler,
}

/// Streaming state of a coreset construction.
pub struct CoresetBuilder {
    config: CoresetConfig,
    arms: Vec<Arm>,
    uniform: Option<UniformSampler>,
    updates: u64,
}

impl CoresetBuilder {
    pub fn new(config: CoresetConfig) -> Result<Self> {
        config.validate()?;
        let mut arms = Vec::new();
        for (slot, p) in config.sampler_exponents().into_iter().enumerate() {
            let (etag, stag) = if slot == 0 && config.loss != LossKind::Logistic {
                (TAG_EMBED_P, TAG_P_SAMPLER)
            } else {
                (TAG_EMBED_ONE, TAG_ONE_SAMPLER)
            };
            let embed = EmbeddingSketch::with_defaults(config.n, config.d, p, config.embed_c, SeedSet::new(config.seed, etag))?;
            let sampler = LpSampler::new(config.sampler_config(p)?, SeedSet::new(config.seed, stag))?;
            arms.push(Arm { embed, sampler });
        }
        let uniform = if config.uniform {
            Some(UniformSampler::new(config.n, config.d, config.uniform_rate(), SeedSet::new(config.seed, TAG_UNIFORM))?)
        } else {
            None
        };
        Ok(Self { config, arms, uniform, updates: 0 })
    }

    pub fn config(&self) -> &CoresetConfig {
        &self.config
    }

    pub fn update(&mut self, u: &TurnstileUpdate) -> Result<()> {
        for arm in &mut self.arms {
            arm.embed.update(u)?;
            arm.sampler.update(u)?;
        }
        if let Some(un) = &mut self.uniform {
            un.update(u)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn update_row(&mut self, row: u64, x: &[f64]) -> Result<()> {
        for arm in &mut self.arms {
            arm.embed.update_row(row, x)?;
            arm.sampler.update_row(row, x)?;
        }
        if let Some(un) = &mut self.uniform {
            un.update_row(row, x)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CoresetBuilder) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Mismatch("coreset configs differ".into()));
        }
        for (a, b) in self.arms.iter_mut().zip(&other.arms) {
            a.embed.merge(&b.embed)?;
            a.sampler.merge(&b.sampler)?;
        }
        if let (Some(a), Some(b)) = (&mut self.uniform, &other.uniform) {
            a.merge(b)?;
        }
        self.updates += other.updates;
        Ok(())
    }

    pub fn finish(&self) -> Result<Coreset> {
        let mut conditioners = Vec::new();
        let mut combined: Option<WeightedSample> = None;
        let mut sizes = Vec::new();
        for arm in &self.arms {
            let mut sampler = arm.sampler.clone();
            match arm.embed.finalize() {
                Ok(cond) => {
                    sampler.set_preconditioner(Some(Preconditioner::with_inverse(cond.r_inv.clone(), cond.r.clone())?))?;
                    conditioners.push(Some(cond));
                }
                // sample unconditioned rows instead
                Err(Error::RankDeficient { .. }) => conditioners.push(None),
                Err(e) => return Err(e),
            }
            let sample = sampler.finish()?;
            sizes.push(sampler.config().size);
            combined = Some(match combined {
                None => sample,
                Some(prev) => union_mixture(&prev, &sample)?,
            });
        }
        let mut sample = combined.expect("at least one sampler");
        if let Some(un) = &self.uniform {
            // uniform rows are exact, so they go first
            sample = union_mixture(&un.finish(self.config.loss.p()), &sample)?;
        }
        let provenance = Provenance {
            seed: self.config.seed,
            config: self.config.clone(),
            sizes,
            embed_rows: self.arms.iter().map(|a| a.embed.rows()).collect(),
            conditioned: conditioners.iter().map(Option::is_some).collect(),
            updates: self.updates,
        };
        let mut core = Coreset::from_sample(&sample, self.config.loss)?;
        core.provenance = Some(provenance);
        core.conditioners = conditioners.into_iter().flatten().collect();
        core.sample = sample;
        Ok(core)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config: CoresetConfig,
    pub sizes: Vec<SketchSize>,
    pub embed_rows: Vec<usize>,
    /// Per sampler: false when the embedding was rank deficient.
    pub conditioned: Vec<bool>,
    pub updates: u64,
}

/// Weighted rows `(A', w)`.
#[derive(Clone, Debug)]
pub struct Coreset {
    pub indices: Vec<u64>,
    pub rows: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub loss: LossKind,
    pub sample: WeightedSample,
    pub conditioners: Vec<Conditioner>,
    pub provenance: Option<Provenance>,
}

impl Coreset {
    pub fn from_sample(sample: &WeightedSample, loss: LossKind) -> Result<Self> {
        let d = sample.d;
        let k = sample.entries.len();
        let rows = DMatrix::from_fn(k, d, |i, c| sample.entries[i].row[c]);
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coreset row"));
        }
        Ok(Self {
            indices: sample.entries.iter().map(|e| e.index).collect(),
            rows,
            weights: sample.entries.iter().map(|e| e.weight).collect(),
            loss,
            sample: sample.clone(),
            conditioners: Vec::new(),
            provenance: None,
        })
    }

    /// Every row with weight 1.
    pub fn full(a: &DMatrix<f64>, loss: LossKind) -> Self {
        Self {
            indices: (0..a.nrows() as u64).collect(),
            rows: a.clone(),
            weights: vec![1.0; a.nrows()],
            loss,
            sample: WeightedSample {
                entries: Vec::new(),
                alpha: 0.0,
                p: loss.p(),
                d: a.ncols(),
                inclusion: crate::sampler::InclusionKind::Uniform { rate: 1.0 },
            },
            conditioners: Vec::new(),
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `Σ w_i g(a'_i z)`.
    pub fn loss_at(&self, z: &[f64]) -> f64 {
        solver::objective(&self.rows, &self.weights, &self.loss, z)
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<Solution> {
        if self.is_empty() {
            return Err(Error::InvalidConfig("empty coreset".into()));
        }
        solver::solve(&self.rows, &self.weights, &self.loss, opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub ratio: f64,
    pub full_objective: f64,
    pub reduced_objective: f64,
    pub z_reduced: Vec<f64>,
    pub converged: bool,
}

/// `f(z̃) / f(z*)` on the full data, `z̃` the coreset optimum and `f(z*)`
/// given.
pub fn ratio_against(a: &DMatrix<f64>, loss: &LossKind, best_full: f64, coreset: &Coreset, opts: &SolverOptions) -> Result<RatioReport> {
    let sol = coreset.solve(opts)?;
    let f = solver::objective(a, &vec![1.0; a.nrows()], loss, &sol.z);
    Ok(RatioReport {
        ratio: f / best_full,
        full_objective: best_full,
        reduced_objective: f,
        z_reduced: sol.z,
        converged: sol.converged,
    })
}

pub fn approximation_ratio(a: &DMatrix<f64>, coreset: &Coreset, opts: &SolverOptions) -> Result<RatioReport> {
    let full = solver::solve(a, &vec![1.0; a.nrows()], &coreset.loss, opts)?;
    ratio_against(a, &coreset.loss, full.objective, coreset, opts)
}
