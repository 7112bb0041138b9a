use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lpstream::conditioning::{Conditioner, EmbeddingSketch};
use lpstream::coreset::{Coreset, CoresetBuilder, CoresetConfig};
use lpstream::experiment::{self, DataSource, ExperimentConfig, Manifest, Method, FORMAT_VERSION};
use lpstream::hashing::{TAG_EMBED_P, TAG_HEAVY_HITTERS, TAG_P_SAMPLER};
use lpstream::heavy_hitters::Candidates;
use lpstream::ingest::{ingest_csv, LabelColumn};
use lpstream::loss::LossKind;
use lpstream::params::{self, Mode};
use lpstream::sampler::{parse_sample_meta, LpSampler, Preconditioner, SamplerConfig, SamplerMode, WeightedSample};
use lpstream::solver::{self, SolverOptions};
use lpstream::stream::{open_stream, replay_dense, write_stream, StreamFormat};
use lpstream::synth::{write_matrix_csv, SynthKind, SynthSpec};
use lpstream::{SeedSet, SketchConfig, SketchState};

#[derive(Parser)]
#[command(name = "lpstream", version, about = "Turnstile lp sampling and coresets")]
struct Cli {
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Practical)]
    mode: ModeArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Theory,
    Practical,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Theory => Mode::Theory,
            ModeArg::Practical => Mode::Practical,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    PlantedHeavy,
    IdenticalRows,
    Gaussian,
    HarmonicDemo,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic stream and its exact matrix.
    Gen(GenArgs),
    /// Turn a numeric CSV into a label-folded stream.
    Ingest(IngestArgs),
    /// Sketch a stream (or one shard of it) into a snapshot file.
    Sketch(SketchArgs),
    /// Sum snapshot files built with identical parameters.
    Merge(MergeArgs),
    /// Extract heavy rows from a snapshot.
    Extract(ExtractArgs),
    /// Draw a weighted lp sample from a stream.
    Sample(SampleArgs),
    /// Build a coreset for a loss from a stream.
    Coreset(CoresetArgs),
    /// Minimise the weighted loss of a coreset or a full stream.
    Solve(SolveArgs),
    /// Approximation-ratio experiment over a grid of k.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    /// Planted row mass as a fraction of the background mass.
    #[arg(long, default_value_t = 0.05)]
    heavy_ratio: f64,
    #[arg(long, default_value_t = 1)]
    planted: usize,
    #[arg(long, default_value_t = 1.0)]
    value: f64,
    /// Fold labels for this loss, e.g. `logistic` or `lp:1`.
    #[arg(long)]
    fold: Option<LossKind>,
    /// Student-t degrees of freedom for row scales.
    #[arg(long)]
    tail: Option<f64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Label column name, or index when `--no-header`.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    fold: Option<LossKind>,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SketchArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 0.25)]
    eps: f64,
    /// Sample size used to size the sketch in practical mode.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Only updates with position `i mod m`, given as `i/m`.
    #[arg(long)]
    shard: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Examine every row index instead of touched ones.
    #[arg(long)]
    scan_all: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0.25)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Single-copy sampler.
    #[arg(long)]
    plain: bool,
    /// Conditioner CSV exported by `coreset`.
    #[arg(long, conflicts_with = "condition")]
    conditioner: Option<PathBuf>,
    /// Run a conditioning embedding alongside the sampler.
    #[arg(long)]
    condition: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Lp,
    Relu,
    Logistic,
    Probit,
}

impl LossArg {
    fn with_p(self, p: f64) -> Result<LossKind> {
        let name = match self {
            LossArg::Lp => "lp",
            LossArg::Relu => "relu",
            LossArg::Logistic => "logistic",
            LossArg::Probit => "probit",
        };
        Ok(LossKind::parse(name, p)?)
    }
}

#[derive(Args)]
struct CoresetArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, value_enum)]
    loss: LossArg,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0.25)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Also measure conditioning on the replayed matrix.
    #[arg(long)]
    measure: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Weighted sample or coreset CSV.
    #[arg(long, conflicts_with = "stream")]
    coreset: Option<PathBuf>,
    /// Solve on the full stream instead.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Loss; read from the coreset file when omitted.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Rerun the experiment recorded in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Stream file; omit to use a synthetic instance.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LossArg::Logistic)]
    loss: LossArg,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 5000)]
    n: u64,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long)]
    tail: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 21)]
    reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "turnstile,offline-leverage")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0.25)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed;
    let mode: Mode = cli.mode.into();
    match cli.cmd {
        Cmd::Gen(a) => gen(a, seed, mode),
        Cmd::Ingest(a) => ingest(a, seed, mode),
        Cmd::Sketch(a) => sketch(a, seed, mode),
        Cmd::Merge(a) => merge(a, seed, mode),
        Cmd::Extract(a) => extract(a, seed, mode),
        Cmd::Sample(a) => sample(a, seed, mode),
        Cmd::Coreset(a) => coreset(a, seed, mode),
        Cmd::Solve(a) => solve(a, seed, mode),
        Cmd::Experiment(a) => run_experiment(a, seed, mode),
    }
}

fn stream_format(f: FormatArg) -> (StreamFormat, &'static str) {
    match f {
        FormatArg::Text => (StreamFormat::Text, "stream.txt"),
        FormatArg::Binary => (StreamFormat::Binary, "stream.bin"),
    }
}

fn manifest(out: &Path, command: &str, seed: u64, mode: Mode, extra: serde_json::Value, outputs: &[&str]) -> Result<()> {
    let mut extra = extra;
    extra["seed"] = json!(seed);
    extra["mode"] = json!(mode.to_string());
    Manifest {
        format_version: FORMAT_VERSION,
        command: command.into(),
        experiment: None,
        extra,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
    .write(&out.join("manifest.json"))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen(a: GenArgs, seed: u64, mode: Mode) -> Result<()> {
    let kind = match a.kind {
        KindArg::PlantedHeavy => SynthKind::PlantedHeavy { p: a.p, heavy_ratio: a.heavy_ratio, planted: a.planted },
        KindArg::IdenticalRows => SynthKind::IdenticalRows { value: a.value },
        KindArg::Gaussian => SynthKind::Gaussian { fold: a.fold, tail: a.tail },
        KindArg::HarmonicDemo => SynthKind::HarmonicDemo,
    };
    let spec = SynthSpec::new(kind, a.n, a.d, seed);
    let g = spec.generate()?;
    fs::create_dir_all(&a.out)?;
    let (fmt, name) = stream_format(a.format);
    write_stream(&a.out.join(name), &g.header, &g.updates, fmt)?;
    write_matrix_csv(create(&a.out.join("matrix.csv"))?, &g.matrix)?;
    manifest(
        &a.out,
        "gen",
        seed,
        mode,
        json!({ "spec": spec, "n": g.header.n, "d": g.header.d, "updates": g.updates.len(), "heavy_rows": g.heavy_rows }),
        &[name, "matrix.csv"],
    )?;
    println!("{} updates, {} x {} -> {}", g.updates.len(), g.header.n, g.header.d, a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs, seed: u64, mode: Mode) -> Result<()> {
    let label = match (&a.label, a.no_header) {
        (None, _) => LabelColumn::None,
        (Some(l), true) => LabelColumn::Index(l.parse().context("--label must be a column index with --no-header")?),
        (Some(l), false) => LabelColumn::Name(l.clone()),
    };
    let file = File::open(&a.csv).with_context(|| format!("opening {}", a.csv.display()))?;
    let ing = ingest_csv(BufReader::new(file), !a.no_header, &label, a.fold.as_ref())?;
    fs::create_dir_all(&a.out)?;
    let (fmt, name) = stream_format(a.format);
    write_stream(&a.out.join(name), &ing.header, &ing.updates, fmt)?;
    write_matrix_csv(create(&a.out.join("matrix.csv"))?, &ing.matrix)?;
    manifest(
        &a.out,
        "ingest",
        seed,
        mode,
        json!({ "source": a.csv, "fold": a.fold, "columns": ing.columns, "n": ing.header.n, "d": ing.header.d }),
        &[name, "matrix.csv"],
    )?;
    println!("{} x {} matrix, {} updates", ing.header.n, ing.header.d, ing.updates.len());
    Ok(())
}

fn parse_shard(s: &str) -> Result<(usize, usize)> {
    let (i, m) = s.split_once('/').context("--shard takes i/m")?;
    let (i, m): (usize, usize) = (i.parse()?, m.parse()?);
    if m == 0 || i >= m {
        bail!("--shard {s}: need 0 <= i < m");
    }
    Ok((i, m))
}

fn sketch(a: SketchArgs, seed: u64, mode: Mode) -> Result<()> {
    let reader = open_stream(&a.stream)?;
    let h = reader.header();
    let preset = match mode {
        Mode::Practical => params::practical(h.n, a.k),
        Mode::Theory => params::theory_heavy_hitters(h.n, a.p, a.eps, a.gamma, a.delta),
    };
    let (r, s) = (a.r.unwrap_or(preset.r), a.s.unwrap_or(preset.s));
    let mut cfg = SketchConfig::new(h.n, h.d, r, s, a.p, a.eps)?;
    if mode == Mode::Practical {
        cfg = cfg.with_threshold_factor(1.0)?;
    }
    let mut st = SketchState::new(cfg, SeedSet::new(seed, TAG_HEAVY_HITTERS))?;
    let shard = a.shard.as_deref().map(parse_shard).transpose()?;
    for (pos, u) in reader.enumerate() {
        let u = u?;
        if shard.is_none_or(|(i, m)| pos % m == i) {
            st.update(&u)?;
        }
    }
    fs::create_dir_all(&a.out)?;
    st.write_snapshot(create(&a.out.join("sketch.snap"))?)?;
    manifest(&a.out, "sketch", seed, mode, json!({ "config": cfg, "shard": a.shard, "updates": st.update_count() }), &["sketch.snap"])?;
    println!("sketched {} updates with r = {r}, s = {s}", st.update_count());
    Ok(())
}

fn read_snapshot(path: &Path) -> Result<SketchState> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SketchState::read_snapshot(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn merge(a: MergeArgs, seed: u64, mode: Mode) -> Result<()> {
    let mut acc = read_snapshot(&a.inputs[0])?;
    for p in &a.inputs[1..] {
        acc.merge(&read_snapshot(p)?).with_context(|| format!("merging {}", p.display()))?;
    }
    fs::create_dir_all(&a.out)?;
    acc.write_snapshot(create(&a.out.join("sketch.snap"))?)?;
    manifest(&a.out, "merge", seed, mode, json!({ "inputs": a.inputs, "updates": acc.update_count() }), &["sketch.snap"])?;
    println!("merged {} snapshots", a.inputs.len());
    Ok(())
}

fn extract(a: ExtractArgs, seed: u64, mode: Mode) -> Result<()> {
    let st = read_snapshot(&a.snapshot)?;
    let list = st.extract(if a.scan_all { Candidates::All } else { Candidates::Touched });
    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out.join("heavy.csv"))?;
    let d = st.config().d;
    let cols: Vec<String> = (0..d).map(|c| format!("x{c}")).collect();
    writeln!(w, "index,median_estimate,{}", cols.join(","))?;
    for e in &list.entries {
        let row: Vec<String> = e.row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", e.index, e.median_estimate, row.join(","))?;
    }
    w.flush()?;
    manifest(
        &a.out,
        "extract",
        seed,
        mode,
        json!({ "snapshot": a.snapshot, "m0": list.threshold_m0, "found": list.len(), "rejected_nonzero": list.rejected_nonzero }),
        &["heavy.csv"],
    )?;
    println!("{} heavy rows (M0 = {})", list.len(), list.threshold_m0);
    Ok(())
}

fn sample(a: SampleArgs, seed: u64, mode: Mode) -> Result<()> {
    let reader = open_stream(&a.stream)?;
    let h = reader.header();
    let size = match mode {
        Mode::Practical => params::practical(h.n, a.k),
        Mode::Theory => params::theory_sampler(h.n, a.k, a.p, a.eps, a.delta),
    };
    let mut cfg = SamplerConfig::new(h.n, h.d, a.k, a.p, a.eps, size)
        .with_mode(if a.plain { SamplerMode::Plain } else { SamplerMode::Modified });
    cfg.delta = a.delta;
    if mode == Mode::Practical {
        cfg = cfg.with_threshold_factor(1.0);
    }
    let mut sampler = LpSampler::new(cfg.clone(), SeedSet::new(seed, TAG_P_SAMPLER))?;
    let mut embed = if a.condition {
        Some(EmbeddingSketch::with_defaults(h.n, h.d, a.p, 10.0, SeedSet::new(seed, TAG_EMBED_P))?)
    } else {
        None
    };
    let start = Instant::now();
    for u in reader {
        let u = u?;
        sampler.update(&u)?;
        if let Some(e) = &mut embed {
            e.update(&u)?;
        }
    }
    let cond = match (&a.conditioner, &embed) {
        (Some(path), _) => Some(Conditioner::read_csv(BufReader::new(File::open(path)?))?),
        (None, Some(e)) => Some(e.finalize()?),
        _ => None,
    };
    if let Some(c) = &cond {
        sampler.set_preconditioner(Some(Preconditioner::with_inverse(c.r_inv.clone(), c.r.clone())?))?;
    }
    let out = sampler.finish()?;
    let secs = start.elapsed().as_secs_f64();
    fs::create_dir_all(&a.out)?;
    out.write_csv(create(&a.out.join("sample.csv"))?, &[("seed", seed.to_string())])?;
    let mut outputs = vec!["sample.csv"];
    if let Some(c) = &cond {
        c.write_csv(create(&a.out.join("conditioner.csv"))?)?;
        outputs.push("conditioner.csv");
    }
    manifest(
        &a.out,
        "sample",
        seed,
        mode,
        json!({ "config": cfg, "alpha": out.alpha, "size": out.len(), "norm_estimate": out.estimate_total_norm(), "secs": secs }),
        &outputs,
    )?;
    println!("{} rows, alpha = {}, norm estimate = {}", out.len(), out.alpha, out.estimate_total_norm());
    Ok(())
}

fn loss_tag(loss: &LossKind) -> String {
    format!("{}:{}", loss.name(), loss.p())
}

fn coreset(a: CoresetArgs, seed: u64, mode: Mode) -> Result<()> {
    let loss = a.loss.with_p(a.p)?;
    let reader = open_stream(&a.stream)?;
    let h = reader.header();
    let mut cfg = CoresetConfig::new(loss, h.n, h.d, a.k, seed);
    cfg.mode = mode;
    cfg.eps = a.eps;
    cfg.mu = a.mu;
    let start = Instant::now();
    let mut b = CoresetBuilder::new(cfg.clone())?;
    let mut ups = Vec::new();
    for u in reader {
        let u = u?;
        b.update(&u)?;
        if a.measure {
            ups.push(u);
        }
    }
    let mut core = b.finish()?;
    let build_secs = start.elapsed().as_secs_f64();
    let mut measured = Vec::new();
    if a.measure {
        let full = replay_dense(&h, &ups);
        for c in core.conditioners.iter_mut() {
            let (al, be) = c.measure(&full, seed);
            measured.push(json!({ "p": c.p, "alpha_hat": al, "beta_hat": be, "alpha_beta": al * be }));
        }
    }
    fs::create_dir_all(&a.out)?;
    core.sample
        .write_csv(create(&a.out.join("coreset.csv"))?, &[("loss", loss_tag(&loss)), ("seed", seed.to_string())])?;
    let mut outputs = vec!["coreset.csv".to_string()];
    for (i, c) in core.conditioners.iter().enumerate() {
        let name = format!("conditioner{i}.csv");
        c.write_csv(create(&a.out.join(&name))?)?;
        outputs.push(name);
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    manifest(
        &a.out,
        "coreset",
        seed,
        mode,
        json!({
            "config": cfg,
            "provenance": core.provenance,
            "alpha": core.sample.alpha,
            "size": core.len(),
            "conditioning": measured,
            "conditioning_note": "beta_hat is a sampled lower estimate",
            "timings": { "build_secs": build_secs },
        }),
        &outputs,
    )?;
    println!("coreset of {} rows for {loss}", core.len());
    Ok(())
}

fn solve(a: SolveArgs, seed: u64, mode: Mode) -> Result<()> {
    let (rows, weights, loss) = match (&a.coreset, &a.stream) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let meta = parse_sample_meta(&text);
            let loss = match (a.loss, meta.get("loss")) {
                (Some(l), _) => l.with_p(a.p)?,
                (None, Some(tag)) => tag.parse::<LossKind>()?,
                (None, None) => bail!("--loss is required: {} has no loss tag", path.display()),
            };
            let s = WeightedSample::read_csv(text.as_bytes())?;
            let core = Coreset::from_sample(&s, loss)?;
            (core.rows, core.weights, loss)
        }
        (None, Some(path)) => {
            let loss = a.loss.context("--loss is required with --stream")?.with_p(a.p)?;
            let (h, ups) = lpstream::stream::read_stream(path)?;
            let m = replay_dense(&h, &ups);
            let n = m.nrows();
            (m, vec![1.0; n], loss)
        }
        (None, None) => bail!("give --coreset or --stream"),
    };
    let sol = solver::solve(&rows, &weights, &loss, &SolverOptions::default())?;
    let report = json!({
        "loss": loss_tag(&loss),
        "z": sol.z,
        "objective": sol.objective,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "grad_norm": sol.grad_norm,
    });
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        experiment::write_atomic(&out.join("solution.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
        manifest(out, "solve", seed, mode, json!({ "coreset": a.coreset, "stream": a.stream }), &["solution.json"])?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_experiment(a: ExperimentArgs, seed: u64, mode: Mode) -> Result<()> {
    let cfg = match &a.manifest {
        Some(path) => Manifest::read(path)?
            .experiment
            .with_context(|| format!("{} does not describe an experiment", path.display()))?,
        None => {
            let loss = a.loss.with_p(a.p)?;
            let data = match &a.stream {
                Some(p) => DataSource::Stream { path: p.clone() },
                None => DataSource::Synthetic(SynthSpec::new(
                    SynthKind::Gaussian { fold: Some(loss), tail: a.tail },
                    a.n,
                    a.d,
                    seed,
                )),
            };
            let mut cfg = ExperimentConfig::new(data, loss, a.ks.clone(), a.reps, seed);
            cfg.methods = a.methods.iter().map(|m| m.parse::<Method>()).collect::<lpstream::Result<_>>()?;
            cfg.mode = mode;
            cfg.eps = a.eps;
            cfg.mu = a.mu;
            cfg
        }
    };
    let out = experiment::run_experiment(&cfg)?;
    experiment::write_outputs(&a.out, &out)?;
    print!("{}", experiment::results_csv(&out));
    Ok(())
}
