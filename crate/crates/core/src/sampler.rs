//! Row sampling proportional to (conditioned) p-norms over a turnstile stream.
//!
//! Rows are scaled by `t_i^{-1/p}` on the way into a heavy-hitter sketch; the
//! rows whose scaled norm clears a threshold `α` form the sample. In the
//! default two-copy mode `α` is read off an independent copy, so it does not
//! depend on the randomness that selects the sample.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{SeedKeys, SeedSet};
use crate::heavy_hitters::{HeavyList, SketchConfig, SketchState};
use crate::numeric::{norm_pp, Compensated, KahanSum};
use crate::params::SketchSize;
use crate::stream::TurnstileUpdate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Threshold and sample from the same sketch.
    Plain,
    /// Threshold from one copy, sample from an independent second copy.
    #[default]
    Modified,
}

/// Invertible right factor applied inside the sketch, with its inverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
}

impl Preconditioner {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Mismatch(format!("{}x{} preconditioner", matrix.nrows(), matrix.ncols())));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("preconditioner"));
        }
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("preconditioner is not invertible".into()))?;
        Ok(Self { matrix, inverse })
    }

    /// Uses a known inverse instead of computing one.
    pub fn with_inverse(matrix: DMatrix<f64>, inverse: DMatrix<f64>) -> Result<Self> {
        if matrix.shape() != inverse.shape() || !matrix.is_square() {
            return Err(Error::Mismatch("preconditioner and inverse shapes differ".into()));
        }
        Ok(Self { matrix, inverse })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n: u64,
    pub d: usize,
    pub k: usize,
    pub p: f64,
    pub eps: f64,
    pub delta: f64,
    pub mode: SamplerMode,
    pub size: SketchSize,
    pub threshold_factor: f64,
}

impl SamplerConfig {
    /// Config with the default `(12/eps)^p` extraction threshold.
    pub fn new(n: u64, d: usize, k: usize, p: f64, eps: f64, size: SketchSize) -> Self {
        Self {
            n,
            d,
            k,
            p,
            eps,
            delta: 0.05,
            mode: SamplerMode::Modified,
            size,
            threshold_factor: (12.0 / eps).powf(p),
        }
    }

    pub fn with_mode(mut self, mode: SamplerMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_threshold_factor(mut self, f: f64) -> Self {
        self.threshold_factor = f;
        self
    }

    /// Rank of the threshold in the first copy's list.
    pub fn alpha_rank(&self) -> usize {
        match self.mode {
            SamplerMode::Plain => self.k,
            SamplerMode::Modified => (3 * self.k).div_ceil(2),
        }
    }

    fn sketch_config(&self) -> Result<SketchConfig> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("sample size k must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta = {} outside (0, 1)", self.delta)));
        }
        SketchConfig::new(self.n, self.d, self.size.r, self.size.s, self.p, self.eps)?
            .with_threshold_factor(self.threshold_factor)
    }
}

/// How an index could have entered a sample; used to recompute inclusion
/// probabilities of rows that another sample found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InclusionKind {
    /// `min(1, ‖a P‖_p^p / α)`; `α = 0` means everything was taken.
    Lp {
        alpha: f64,
        p: f64,
        conditioner: Option<DMatrix<f64>>,
    },
    Uniform { rate: f64 },
    Mixture(Vec<InclusionKind>),
}

impl InclusionKind {
    pub fn probability(&self, row: &[f64]) -> f64 {
        match self {
            InclusionKind::Lp { alpha, p, conditioner } => {
                if *alpha <= 0.0 {
                    return 1.0;
                }
                let np = match conditioner {
                    Some(m) => norm_pp(&row_times(row, m), *p),
                    None => norm_pp(row, *p),
                };
                (np / alpha).min(1.0)
            }
            InclusionKind::Uniform { rate } => *rate,
            InclusionKind::Mixture(parts) => {
                let miss: f64 = parts.iter().map(|c| 1.0 - c.probability(row)).product();
                1.0 - miss
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: u64,
    /// Recovered row in the original coordinates.
    pub row: Vec<f64>,
    pub weight: f64,
    pub prob_estimate: f64,
    /// `‖ã‖_p^p` of the recovered (conditioned) row.
    pub norm_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub entries: Vec<SampleEntry>,
    pub alpha: f64,
    pub p: f64,
    pub d: usize,
    pub inclusion: InclusionKind,
}

impl WeightedSample {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&SampleEntry> {
        self.entries
            .binary_search_by_key(&index, |e| e.index)
            .ok()
            .map(|k| &self.entries[k])
    }

    /// `Σ w_i ‖ã_i‖_p^p`.
    pub fn estimate_total_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.weight * e.norm_pp)
            .collect::<KahanSum>()
            .sum()
    }

    /// Sample as a CSV table: comment line with `meta`, a header, then
    /// `index, weight, prob_estimate, x0 .. x{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> Result<()> {
        let mut line = format!("# p={} alpha={} d={}", self.p, self.alpha, self.d);
        for (k, v) in meta {
            line.push_str(&format!(" {k}={v}"));
        }
        writeln!(w, "{line}")?;
        let mut cw = csv::Writer::from_writer(w);
        let mut header = vec!["index".to_string(), "weight".into(), "prob_estimate".into()];
        header.extend((0..self.d).map(|c| format!("x{c}")));
        cw.write_record(&header).map_err(csv_err)?;
        for e in &self.entries {
            let mut rec = vec![e.index.to_string(), e.weight.to_string(), e.prob_estimate.to_string()];
            rec.extend(e.row.iter().map(|v| v.to_string()));
            cw.write_record(&rec).map_err(csv_err)?;
        }
        cw.flush()?;
        Ok(())
    }

    /// Reads rows and weights back. The inclusion model is not stored, so the
    /// result carries a uniform placeholder.
    pub fn read_csv<R: BufRead>(r: R) -> Result<WeightedSample> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 4 || &headers[0] != "index" {
            return Err(Error::Format("sample csv needs columns index, weight, prob_estimate, x0..".into()));
        }
        let d = headers.len() - 3;
        let mut entries = Vec::new();
        for (rec_no, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Csv { record: rec_no + 1, column: c, msg: "not a number".into() })
            };
            let index = rec
                .get(0)
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| Error::Csv { record: rec_no + 1, column: 0, msg: "bad index".into() })?;
            let row = (0..d).map(|c| num(c + 3)).collect::<Result<Vec<_>>>()?;
            entries.push(SampleEntry {
                index,
                weight: num(1)?,
                prob_estimate: num(2)?,
                norm_pp: 0.0,
                row,
            });
        }
        Ok(WeightedSample {
            entries,
            alpha: f64::NAN,
            p: f64::NAN,
            d,
            inclusion: InclusionKind::Uniform { rate: f64::NAN },
        })
    }
}

/// Reads only the `key=value` pairs from the first comment line of a sample file.
pub fn parse_sample_meta(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .map(|l| {
            l.split_whitespace()
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    let (record, column) = e
        .position()
        .map(|p| (p.record() as usize, 0))
        .unwrap_or((0, 0));
    Error::Csv { record, column, msg: e.to_string() }
}

fn row_times(row: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|c| row.iter().enumerate().map(|(l, v)| v * m[(l, c)]).sum())
        .collect()
}

/// `p + q - pq`.
pub fn combine_probabilities(p: f64, q: f64) -> f64 {
    p + q - p * q
}

/// Update value forwarded to the scaled sketch.
#[inline]
pub fn scale_value(v: f64, t: f64, p: f64) -> f64 {
    if t == 1.0 {
        v
    } else if p == 1.0 {
        v / t
    } else {
        v * t.powf(-1.0 / p)
    }
}

/// `(i, j, v)` becomes `(i, j, v t_i^{-1/p})`.
pub fn scaled_update(u: &TurnstileUpdate, seeds: &SeedSet, p: f64) -> TurnstileUpdate {
    TurnstileUpdate {
        value: scale_value(u.value, seeds.scale_of(u.row), p),
        ..*u
    }
}

/// Threshold: the `needed`-th largest positive norm. If there are at most
/// `needed` positive norms and the list is known to contain every nonzero
/// row, returns 0 (take everything with probability 1).
pub fn select_alpha(norms: &[f64], needed: usize, exhaustive: bool) -> Result<f64> {
    let mut pos: Vec<f64> = norms.iter().copied().filter(|&v| v > 0.0).collect();
    if exhaustive && pos.len() <= needed {
        return Ok(0.0);
    }
    if pos.len() < needed {
        return Err(Error::InsufficientHeavyHitters {
            found: pos.len(),
            needed,
        });
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    Ok(pos[needed - 1])
}

#[derive(Clone, Debug)]
struct ScaledCopy {
    sketch: SketchState,
    keys: SeedKeys,
}

impl ScaledCopy {
    fn new(cfg: SketchConfig, seeds: SeedSet) -> Result<Self> {
        Ok(Self {
            sketch: SketchState::new(cfg, seeds)?,
            keys: seeds.keys(),
        })
    }

    fn factor(&self, row: u64, p: f64) -> f64 {
        scale_value(1.0, self.keys.scale_of(row), p)
    }

    fn update(&mut self, u: &TurnstileUpdate, p: f64) -> Result<()> {
        let t = self.keys.scale_of(u.row);
        self.sketch.update_entry(u.row, u.col, scale_value(u.value, t, p))
    }

    fn update_row(&mut self, row: u64, x: &[f64], p: f64) -> Result<()> {
        let f = self.factor(row, p);
        let scaled: Vec<f64> = x.iter().map(|v| if f == 1.0 { *v } else { v * f }).collect();
        self.sketch.update_row(row, &scaled)
    }

    fn extract(&self, pre: Option<&Preconditioner>) -> Result<HeavyList> {
        match pre {
            None => Ok(self.sketch.extract_heavy()),
            Some(c) => {
                let mut sk = self.sketch.clone();
                sk.post_multiply(&c.matrix)?;
                Ok(sk.extract_heavy())
            }
        }
    }
}

/// Turnstile p-norm sampler.
#[derive(Clone, Debug)]
pub struct LpSampler {
    config: SamplerConfig,
    seeds: SeedSet,
    threshold_copy: ScaledCopy,
    sample_copy: Option<ScaledCopy>,
    preconditioner: Option<Preconditioner>,
}

impl LpSampler {
    /// `seeds.instance_tag` names the threshold copy; the sample copy uses the
    /// next tag.
    pub fn new(config: SamplerConfig, seeds: SeedSet) -> Result<Self> {
        let cfg = config.sketch_config()?;
        let threshold_copy = ScaledCopy::new(cfg, seeds)?;
        let sample_copy = match config.mode {
            SamplerMode::Plain => None,
            SamplerMode::Modified => Some(ScaledCopy::new(cfg, seeds.with_tag(seeds.instance_tag + 1))?),
        };
        Ok(Self {
            config,
            seeds,
            threshold_copy,
            sample_copy,
            preconditioner: None,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn seeds(&self) -> SeedSet {
        self.seeds
    }

    /// Sets the matrix applied to every bucket before extraction.
    pub fn set_preconditioner(&mut self, pre: Option<Preconditioner>) -> Result<()> {
        if let Some(c) = &pre {
            if c.dim() != self.config.d {
                return Err(Error::Mismatch(format!("{}-dim preconditioner for d = {}", c.dim(), self.config.d)));
            }
        }
        self.preconditioner = pre;
        Ok(())
    }

    pub fn update(&mut self, u: &TurnstileUpdate) -> Result<()> {
        let p = self.config.p;
        self.threshold_copy.update(u, p)?;
        if let Some(c) = &mut self.sample_copy {
            c.update(u, p)?;
        }
        Ok(())
    }

    pub fn update_row(&mut self, row: u64, x: &[f64]) -> Result<()> {
        let p = self.config.p;
        self.threshold_copy.update_row(row, x, p)?;
        if let Some(c) = &mut self.sample_copy {
            c.update_row(row, x, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &LpSampler) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Mismatch("sampler configs differ".into()));
        }
        self.threshold_copy.sketch.merge(&other.threshold_copy.sketch)?;
        if let (Some(a), Some(b)) = (&mut self.sample_copy, &other.sample_copy) {
            a.sketch.merge(&b.sketch)?;
        }
        Ok(())
    }

    pub fn threshold_sketch(&self) -> &SketchState {
        &self.threshold_copy.sketch
    }

    pub fn sample_sketch(&self) -> &SketchState {
        self.sample_copy.as_ref().map_or(&self.threshold_copy.sketch, |c| &c.sketch)
    }

    /// Threshold `α` from the threshold copy.
    pub fn select_alpha(&self) -> Result<f64> {
        let list = self.threshold_copy.extract(self.preconditioner.as_ref())?;
        let norms: Vec<f64> = list.entries.iter().map(|e| norm_pp(&e.row, self.config.p)).collect();
        select_alpha(&norms, self.config.alpha_rank(), list.rejected_nonzero == 0)
    }

    /// Rows of the sample copy whose scaled norm reaches `alpha`.
    pub fn draw_sample(&self, alpha: f64) -> Result<WeightedSample> {
        let copy = self.sample_copy.as_ref().unwrap_or(&self.threshold_copy);
        let list = copy.extract(self.preconditioner.as_ref())?;
        let p = self.config.p;
        let mut entries = Vec::new();
        for e in &list.entries {
            let scaled = norm_pp(&e.row, p);
            if scaled <= 0.0 || scaled < alpha {
                continue;
            }
            let t = copy.keys.scale_of(e.index);
            let back = if p == 1.0 { t } else { t.powf(1.0 / p) };
            let descaled: Vec<f64> = e.row.iter().map(|v| v * back).collect();
            let np = norm_pp(&descaled, p);
            let prob = if alpha > 0.0 { (np / alpha).min(1.0) } else { 1.0 };
            if prob <= 0.0 {
                continue;
            }
            let row = match &self.preconditioner {
                Some(c) => row_times(&descaled, &c.inverse),
                None => descaled,
            };
            entries.push(SampleEntry {
                index: e.index,
                row,
                weight: 1.0 / prob,
                prob_estimate: prob,
                norm_pp: np,
            });
        }
        Ok(WeightedSample {
            entries,
            alpha,
            p,
            d: self.config.d,
            inclusion: InclusionKind::Lp {
                alpha,
                p,
                conditioner: self.preconditioner.as_ref().map(|c| c.matrix.clone()),
            },
        })
    }

    pub fn finish(&self) -> Result<WeightedSample> {
        let alpha = self.select_alpha()?;
        self.draw_sample(alpha)
    }
}

/// Keeps exact rows of a hash-selected subset of indices.
#[derive(Clone, Debug)]
pub struct UniformSampler {
    rate: f64,
    d: usize,
    n: u64,
    keys: SeedKeys,
    rows: BTreeMap<u64, Vec<Compensated>>,
}

impl UniformSampler {
    pub fn new(n: u64, d: usize, rate: f64, seeds: SeedSet) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("uniform rate {rate} outside (0, 1]")));
        }
        Ok(Self {
            rate,
            d,
            n,
            keys: seeds.keys(),
            rows: BTreeMap::new(),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_member(&self, row: u64) -> bool {
        self.keys.scale_of(row) < self.rate
    }

    pub fn update(&mut self, u: &TurnstileUpdate) -> Result<()> {
        if u.row >= self.n || u.col >= self.d {
            return Err(Error::IndexOutOfRange { row: u.row, col: u.col, n: self.n, d: self.d });
        }
        if self.is_member(u.row) {
            let d = self.d;
            self.rows.entry(u.row).or_insert_with(|| vec![Compensated::ZERO; d])[u.col].add(u.value);
        }
        Ok(())
    }

    pub fn update_row(&mut self, row: u64, x: &[f64]) -> Result<()> {
        if row >= self.n || x.len() != self.d {
            return Err(Error::IndexOutOfRange { row, col: x.len(), n: self.n, d: self.d });
        }
        if self.is_member(row) {
            let d = self.d;
            let acc = self.rows.entry(row).or_insert_with(|| vec![Compensated::ZERO; d]);
            for (a, v) in acc.iter_mut().zip(x) {
                a.add(*v);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &UniformSampler) -> Result<()> {
        if self.keys != other.keys || self.rate.to_bits() != other.rate.to_bits() || self.d != other.d {
            return Err(Error::Mismatch("uniform samplers differ".into()));
        }
        for (i, row) in &other.rows {
            let acc = self.rows.entry(*i).or_insert_with(|| vec![Compensated::ZERO; row.len()]);
            for (a, b) in acc.iter_mut().zip(row) {
                a.add_compensated(b);
            }
        }
        Ok(())
    }

    /// Nonzero member rows, each with weight `1/rate`; `p` sets `norm_pp`.
    pub fn finish(&self, p: f64) -> WeightedSample {
        let entries = self
            .rows
            .iter()
            .filter_map(|(i, acc)| {
                let row: Vec<f64> = acc.iter().map(Compensated::value).collect();
                if row.iter().all(|&v| v == 0.0) {
                    return None;
                }
                Some(SampleEntry {
                    index: *i,
                    norm_pp: norm_pp(&row, p),
                    row,
                    weight: 1.0 / self.rate,
                    prob_estimate: self.rate,
                })
            })
            .collect();
        WeightedSample {
            entries,
            alpha: f64::NAN,
            p,
            d: self.d,
            inclusion: InclusionKind::Uniform { rate: self.rate },
        }
    }
}

/// Union of two independently drawn samples with combined inclusion
/// probabilities `p + p' - p p'`. Duplicates keep the first sample's row.
pub fn union_mixture(s1: &WeightedSample, s2: &WeightedSample) -> Result<WeightedSample> {
    if s1.d != s2.d {
        return Err(Error::Mismatch(format!("sample dimensions {} and {}", s1.d, s2.d)));
    }
    let mut by_index: BTreeMap<u64, (Option<&SampleEntry>, Option<&SampleEntry>)> = BTreeMap::new();
    for e in &s1.entries {
        by_index.entry(e.index).or_default().0 = Some(e);
    }
    for e in &s2.entries {
        by_index.entry(e.index).or_default().1 = Some(e);
    }
    let entries = by_index
        .into_values()
        .map(|pair| {
            let base = pair.0.or(pair.1).expect("at least one side present");
            let p1 = pair.0.map_or_else(|| s1.inclusion.probability(&base.row), |e| e.prob_estimate);
            let p2 = pair.1.map_or_else(|| s2.inclusion.probability(&base.row), |e| e.prob_estimate);
            let prob = combine_probabilities(p1, p2).clamp(f64::MIN_POSITIVE, 1.0);
            SampleEntry {
                index: base.index,
                row: base.row.clone(),
                weight: 1.0 / prob,
                prob_estimate: prob,
                norm_pp: base.norm_pp,
            }
        })
        .collect();
    Ok(WeightedSample {
        entries,
        alpha: if s1.alpha.is_nan() { s2.alpha } else { s1.alpha },
        p: s1.p,
        d: s1.d,
        inclusion: InclusionKind::Mixture(vec![s1.inclusion.clone(), s2.inclusion.clone()]),
    })
}
