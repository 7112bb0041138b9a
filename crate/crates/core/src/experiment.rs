//! Approximation-ratio experiments over a grid of sample sizes.
//!
//! `results.csv` and `reps.csv` depend only on the configuration; wall-clock
//! numbers go to `timings.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::Conditioner;
use crate::coreset::{ratio_against, Coreset, CoresetBuilder, CoresetConfig};
use crate::error::{Error, Result};
use crate::hashing::{mix64, SeedSet};
use crate::loss::LossKind;
use crate::numeric::{norm_pp, quantile};
use crate::params::Mode;
use crate::sampler::{InclusionKind, SampleEntry, WeightedSample};
use crate::solver::{self, SolverOptions};
use crate::stream::{read_stream, replay_dense, StreamHeader, TurnstileUpdate};
use crate::synth::SynthSpec;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Turnstile,
    OfflineLeverage,
    /// Row hashing into `k` signed buckets. Not a faithful baseline.
    ObliviousStub,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Turnstile => "turnstile",
            Method::OfflineLeverage => "offline-leverage",
            Method::ObliviousStub => "oblivious-stub",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turnstile" => Ok(Method::Turnstile),
            "offline-leverage" | "offline" => Ok(Method::OfflineLeverage),
            "oblivious-stub" | "oblivious" => Ok(Method::ObliviousStub),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Stream { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub loss: LossKind,
    pub ks: Vec<usize>,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub mode: Mode,
    pub eps: f64,
    pub mu: f64,
    pub solver: SolverOptions,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, loss: LossKind, ks: Vec<usize>, reps: usize, seed: u64) -> Self {
        Self {
            data,
            loss,
            ks,
            reps,
            methods: vec![Method::Turnstile, Method::OfflineLeverage],
            seed,
            mode: Mode::Practical,
            eps: 0.25,
            mu: 1.0,
            solver: SolverOptions::default(),
        }
    }

    pub fn rep_seed(&self, k: usize, rep: usize) -> u64 {
        mix64(self.seed ^ mix64((k as u64) << 20 ^ rep as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub k: usize,
    pub method: Method,
    pub rep: usize,
    pub seed: u64,
    /// NaN when the repetition failed.
    pub ratio: f64,
    pub size: usize,
    pub converged: bool,
    pub error: Option<String>,
    pub sampling_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub k: usize,
    pub method: Method,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub median_size: f64,
    pub failures: usize,
    pub sampling_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub full_objective: f64,
    pub reps: Vec<RepResult>,
    pub summary: Vec<Summary>,
}

impl ExperimentOutput {
    pub fn summary_for(&self, k: usize, method: Method) -> Option<&Summary> {
        self.summary.iter().find(|s| s.k == k && s.method == method)
    }
}

/// Stream and exact matrix of a data source.
pub fn load_data(src: &DataSource) -> Result<(StreamHeader, Vec<TurnstileUpdate>, DMatrix<f64>)> {
    match src {
        DataSource::Synthetic(spec) => {
            let g = spec.generate()?;
            Ok((g.header, g.updates, g.matrix))
        }
        DataSource::Stream { path } => {
            let (h, ups) = read_stream(path)?;
            let a = replay_dense(&h, &ups);
            Ok((h, ups, a))
        }
    }
}

/// Bernoulli sample with `π_i = min(1, k q_i / Σq)`, `q_i = s_i / Σs + 1/n`,
/// `s_i = ‖a_i R^{-1}‖_p^p` and `R` from a QR of the exact matrix. `k ≥ n`
/// keeps every row.
pub fn offline_leverage_sample(a: &DMatrix<f64>, p: f64, k: usize, seed: u64) -> Result<WeightedSample> {
    let n = a.nrows();
    let cond = Conditioner::from_embedded(a.clone(), p)?;
    let u = cond.basis(a);
    let scores: Vec<f64> = (0..n)
        .map(|i| norm_pp(&u.row(i).iter().copied().collect::<Vec<_>>(), p))
        .collect();
    let total: f64 = scores.iter().sum();
    let q: Vec<f64> = scores.iter().map(|s| s / total + 1.0 / n as f64).collect();
    let qsum: f64 = q.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..n {
        let pi = if k >= n { 1.0 } else { (k as f64 * q[i] / qsum).min(1.0) };
        let draw: f64 = rng.random();
        if draw < pi {
            let row: Vec<f64> = a.row(i).iter().copied().collect();
            entries.push(SampleEntry {
                index: i as u64,
                norm_pp: norm_pp(&row, p),
                row,
                weight: 1.0 / pi,
                prob_estimate: pi,
            });
        }
    }
    Ok(WeightedSample {
        entries,
        alpha: f64::NAN,
        p,
        d: a.ncols(),
        inclusion: InclusionKind::Uniform { rate: f64::NAN },
    })
}

/// `k` buckets, each the signed sum of the rows hashed to it, weight 1.
pub fn oblivious_stub(a: &DMatrix<f64>, k: usize, seed: u64) -> DMatrix<f64> {
    let keys = SeedSet::new(seed, 0x50).keys();
    let mut out = DMatrix::zeros(k, a.ncols());
    for i in 0..a.nrows() {
        let b = keys.bucket_of(i as u64, 0, k);
        let s = keys.sign_of(i as u64, 0);
        for c in 0..a.ncols() {
            out[(b, c)] += s * a[(i, c)];
        }
    }
    out
}

fn run_one(
    cfg: &ExperimentConfig,
    header: &StreamHeader,
    updates: &[TurnstileUpdate],
    a: &DMatrix<f64>,
    best: f64,
    k: usize,
    method: Method,
    rep: usize,
) -> RepResult {
    let seed = cfg.rep_seed(k, rep);
    let start = Instant::now();
    let built: Result<Coreset> = match method {
        Method::Turnstile => {
            let mut cc = CoresetConfig::new(cfg.loss, header.n, header.d, k, seed);
            cc.mode = cfg.mode;
            cc.eps = cfg.eps;
            cc.mu = cfg.mu;
            CoresetBuilder::new(cc).and_then(|mut b| {
                for u in updates {
                    b.update(u)?;
                }
                b.finish()
            })
        }
        Method::OfflineLeverage => offline_leverage_sample(a, cfg.loss.p(), k, seed)
            .and_then(|s| Coreset::from_sample(&s, cfg.loss)),
        Method::ObliviousStub => {
            let rows = oblivious_stub(a, k.min(a.nrows()), seed);
            let mut c = Coreset::full(&rows, cfg.loss);
            c.indices.clear();
            Ok(c)
        }
    };
    let sampling_secs = start.elapsed().as_secs_f64();
    let res = built.and_then(|core| {
        let size = core.len();
        ratio_against(a, &cfg.loss, best, &core, &cfg.solver).map(|r| (r, size))
    });
    let total_secs = start.elapsed().as_secs_f64();
    match res {
        Ok((r, size)) => RepResult {
            k,
            method,
            rep,
            seed,
            ratio: r.ratio,
            size,
            converged: r.converged,
            error: None,
            sampling_secs,
            total_secs,
        },
        Err(e) => RepResult {
            k,
            method,
            rep,
            seed,
            ratio: f64::NAN,
            size: 0,
            converged: false,
            error: Some(e.to_string()),
            sampling_secs,
            total_secs,
        },
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.loss.validate()?;
    if cfg.ks.is_empty() || cfg.reps == 0 || cfg.methods.is_empty() {
        return Err(Error::InvalidConfig("experiment needs k values, repetitions and methods".into()));
    }
    let (header, updates, a) = load_data(&cfg.data)?;
    let full = solver::solve(&a, &vec![1.0; a.nrows()], &cfg.loss, &cfg.solver)?;
    let best = full.objective;
    let jobs: Vec<(usize, Method, usize)> = cfg
        .ks
        .iter()
        .flat_map(|&k| cfg.methods.iter().flat_map(move |&m| (0..cfg.reps).map(move |r| (k, m, r))))
        .collect();
    let reps: Vec<RepResult> = jobs
        .par_iter()
        .map(|&(k, m, r)| run_one(cfg, &header, &updates, &a, best, k, m, r))
        .collect();
    let mut summary = Vec::new();
    for &k in &cfg.ks {
        for &m in &cfg.methods {
            let group: Vec<&RepResult> = reps.iter().filter(|r| r.k == k && r.method == m).collect();
            let ok: Vec<f64> = group.iter().filter(|r| r.error.is_none()).map(|r| r.ratio).collect();
            let sizes: Vec<f64> = group.iter().filter(|r| r.error.is_none()).map(|r| r.size as f64).collect();
            let q = |v: &[f64], t: f64| if v.is_empty() { f64::NAN } else { quantile(v, t) };
            let st: Vec<f64> = group.iter().map(|r| r.sampling_secs).collect();
            let tt: Vec<f64> = group.iter().map(|r| r.total_secs).collect();
            summary.push(Summary {
                k,
                method: m,
                median: q(&ok, 0.5),
                q1: q(&ok, 0.25),
                q3: q(&ok, 0.75),
                median_size: q(&sizes, 0.5),
                failures: group.len() - ok.len(),
                sampling_secs: q(&st, 0.5),
                total_secs: q(&tt, 0.5),
            });
        }
    }
    Ok(ExperimentOutput { config: cfg.clone(), full_objective: best, reps, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("manifest format {} (expected {FORMAT_VERSION})", m.format_version)));
        }
        Ok(m)
    }
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

pub fn results_csv(out: &ExperimentOutput) -> String {
    let mut s = String::from("k,method,median_ratio,q1,q3,median_size,failures\n");
    for r in &out.summary {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.k,
            r.method.name(),
            fmt(r.median),
            fmt(r.q1),
            fmt(r.q3),
            fmt(r.median_size),
            r.failures
        );
    }
    s
}

pub fn reps_csv(out: &ExperimentOutput) -> String {
    let mut s = String::from("k,method,rep,seed,ratio,size,converged,error\n");
    for r in &out.reps {
        s += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.k,
            r.method.name(),
            r.rep,
            r.seed,
            fmt(r.ratio),
            r.size,
            r.converged,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

pub fn timings_csv(out: &ExperimentOutput) -> String {
    let mut s = String::from("k,method,sampling_secs,total_secs\n");
    for r in &out.summary {
        s += &format!("{},{},{},{}\n", r.k, r.method.name(), r.sampling_secs, r.total_secs);
    }
    s
}

/// Writes `results.csv`, `reps.csv`, `timings.csv` and `manifest.json`.
pub fn write_outputs(dir: &Path, out: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("results.csv"), results_csv(out).as_bytes())?;
    write_atomic(&dir.join("reps.csv"), reps_csv(out).as_bytes())?;
    write_atomic(&dir.join("timings.csv"), timings_csv(out).as_bytes())?;
    Manifest {
        format_version: FORMAT_VERSION,
        command: "experiment".into(),
        experiment: Some(out.config.clone()),
        extra: serde_json::json!({ "full_objective": out.full_objective }),
        outputs: vec!["results.csv".into(), "reps.csv".into(), "timings.csv".into()],
    }
    .write(&dir.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthKind;

    fn small(loss: LossKind) -> ExperimentConfig {
        let fold = Some(loss);
        let spec = SynthSpec::new(SynthKind::Gaussian { fold, tail: None }, 200, 2, 5);
        ExperimentConfig::new(DataSource::Synthetic(spec), loss, vec![200], 3, 11)
    }

    #[test]
    fn k_equal_n_gives_unit_ratio() {
        let out = run_experiment(&small(LossKind::Logistic)).unwrap();
        for r in &out.reps {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert!((r.ratio - 1.0).abs() < 1e-6, "{} {}", r.method.name(), r.ratio);
        }
    }

    #[test]
    fn outputs_are_deterministic() {
        let cfg = small(LossKind::Lp { p: 1.0 });
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(results_csv(&a), results_csv(&b));
        assert_eq!(reps_csv(&a), reps_csv(&b));
    }

    #[test]
    fn offline_sample_probabilities_sum_to_k() {
        let spec = SynthSpec::new(SynthKind::Gaussian { fold: None, tail: Some(3.0) }, 500, 3, 1);
        let a = spec.matrix().unwrap().0;
        let mut total = 0.0;
        for seed in 0..20 {
            total += offline_leverage_sample(&a, 1.0, 50, seed).unwrap().len() as f64;
        }
        assert!((total / 20.0 - 50.0).abs() < 10.0);
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::Turnstile, Method::OfflineLeverage, Method::ObliviousStub] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
