//! Command-line entry points: the conjugation audit, the elementwise-map
//! counterexample, single training runs, and the paired-seed sweep.
//!
//! Every setting resolves through three layers with strict precedence:
//! command-line flags beat config-file entries, which beat built-in
//! defaults. The config file is a flat `key = value` text format keyed by
//! the long flag names. Commands that write files also write a manifest
//! sidecar (`<out>.manifest.json`) recording the resolved configuration;
//! data artifacts are byte-reproducible for fixed flags and seed, so
//! volatile quantities (timestamps, wall-clock timings) live only in the
//! manifest.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical-band or gap
//! violation, 3 training divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gauge_audit::{
    check_bands, counterexample_check, default_shapes, rows_to_csv, rows_to_table,
    run_shape_audit, AuditShape, SIGN_LIMIT_EPS,
};
use crate::so3::{train, OptimizerKind, TrainConfig};

/// Version reported by `--version` and stamped into manifests: the crate
/// version plus the version of the output-file layout.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (output format 1)");

/// Keyword selecting the built-in audit shape list.
pub const BUILTIN_SHAPES_KEYWORD: &str = "appendix-d";

const DEFAULT_TRIPLES: usize = 50;
const DEFAULT_EPS_LIST: &str = "1e-3,1e-1,1,10";
const DEFAULT_SWEEP_SEEDS: u64 = 20;
const GAP_FLOOR: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(
    name = "polarlab",
    version = TOOL_VERSION,
    about = "Matrix-optimizer laboratory: polar maps, conjugation audits, and an SO(3) regression testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Conjugation-deviation audit across matrix shapes (doubles as a numerical self-test)
    Audit(AuditArgs),
    /// Scalar and matrix covariance gap of the elementwise shrink map
    Counterexample(CounterexampleArgs),
    /// One SO(3) regression training run, written as a JSON run record
    Train(TrainArgs),
    /// Paired-seed optimizer comparison over a (width x optimizer x seed) grid
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Shape list: "appendix-d" for the built-in 15 shapes, or comma-separated RxC entries like "8x8,16x4"
    #[arg(long)]
    shapes: Option<String>,
    /// Sampled (G, P, Q) triples per shape [default: 50]
    #[arg(long)]
    triples: Option<usize>,
    /// Master seed for the sampling streams [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// stdout rendering: "table" or "csv" [default: table]
    #[arg(long)]
    format: Option<String>,
    /// CSV output path; a manifest sidecar is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CounterexampleArgs {
    /// Comma-separated positive epsilon values [default: "1e-3,1e-1,1,10"]
    #[arg(long, allow_hyphen_values = true)]
    eps: Option<String>,
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Hidden channels of the model [default: 16]
    #[arg(long)]
    hc: Option<usize>,
    /// Optimizer for the matrix parameters: adamw, muon, or polaradamw
    #[arg(long)]
    optimizer: Option<String>,
    /// Master seed (dataset, init, and shuffling streams derive from it) [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate for the matrix group [default: the optimizer's own]
    #[arg(long)]
    lr: Option<f64>,
    /// Weight decay (AdamW arms only) [default: 0]
    #[arg(long)]
    wd: Option<f64>,
    /// JSON output path; a manifest sidecar is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated hidden-channel widths [default: "16"]
    #[arg(long = "hc-list")]
    hc_list: Option<String>,
    /// Comma-separated optimizer arms, or "all" [default: all three]
    #[arg(long)]
    optimizers: Option<String>,
    /// Number of paired seeds, used as seeds 0..N [default: 20]
    #[arg(long)]
    seeds: Option<u64>,
    /// Worker threads for seed-level parallelism [default: 1]
    #[arg(long)]
    parallel: Option<usize>,
    /// Training epochs per run [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// CSV output path; a manifest sidecar is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parses and dispatches; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let command_text = argv
        .iter()
        .map(|s| s.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Audit(args) => cmd_audit(args, &command_text),
        Command::Counterexample(args) => cmd_counterexample(args),
        Command::Train(args) => cmd_train(args, &command_text),
        Command::Sweep(args) => cmd_sweep(args, &command_text),
    };
    match outcome {
        Ok(code) => code,
        Err(Error::Divergence { epoch }) => {
            eprintln!("error: training diverged at epoch {epoch}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

// ---------------------------------------------------------------------------
// flat key = value config files

/// Entries of a flat `key = value` config file. Keys are the long flag
/// names of the subcommand; `#` starts a comment; blank lines are skipped.
struct FileConfig {
    map: BTreeMap<String, String>,
    source: String,
}

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig {
                map: BTreeMap::new(),
                source: String::new(),
            });
        };
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, source: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::BadFlag(format!(
                    "{source}:{}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::BadFlag(format!(
                    "{source}:{}: empty key or value in {raw:?}",
                    lineno + 1
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::BadFlag(format!(
                    "{source}:{}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
        }
        Ok(FileConfig {
            map,
            source: source.to_string(),
        })
    }

    /// Removes and parses one entry; `None` when the file has no such key.
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::BadFlag(format!("{}: key {key:?}: cannot parse {raw:?}: {e}", self.source))
            }),
        }
    }

    fn take_string(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Rejects leftover keys so typos do not silently fall back to defaults.
    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
        Err(Error::BadFlag(format!(
            "{}: unknown config keys: {}",
            self.source,
            keys.join(", ")
        )))
    }
}

// ---------------------------------------------------------------------------
// shared value parsers

#[derive(Debug, Copy, Clone, PartialEq, Eq)]
enum OutputFormat {
    Table,
    Csv,
}

impl OutputFormat {
    fn label(self) -> &'static str {
        match self {
            OutputFormat::Table => "table",
            OutputFormat::Csv => "csv",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(OutputFormat::Table),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(Error::BadFlag(format!(
                "format must be \"table\" or \"csv\", got {other:?}"
            ))),
        }
    }
}

/// Parses `--shapes`: the built-in keyword or comma-separated RxC entries.
fn parse_shapes(text: &str) -> Result<Vec<AuditShape>> {
    let trimmed = text.trim();
    if trimmed.eq_ignore_ascii_case(BUILTIN_SHAPES_KEYWORD)
        || trimmed.eq_ignore_ascii_case("builtin")
    {
        return Ok(default_shapes());
    }
    let mut shapes = Vec::new();
    for item in trimmed.split(',') {
        let item = item.trim();
        let Some((rows_text, cols_text)) = item.split_once(['x', 'X']) else {
            return Err(Error::BadFlag(format!(
                "shape {item:?} is not RxC (e.g. \"8x8\") and not the keyword {BUILTIN_SHAPES_KEYWORD:?}"
            )));
        };
        let rows: usize = rows_text.trim().parse().map_err(|_| {
            Error::BadFlag(format!("shape {item:?}: bad row count {rows_text:?}"))
        })?;
        let cols: usize = cols_text.trim().parse().map_err(|_| {
            Error::BadFlag(format!("shape {item:?}: bad column count {cols_text:?}"))
        })?;
        if rows == 0 || cols == 0 {
            return Err(Error::BadFlag(format!("shape {item:?} has a zero dimension")));
        }
        shapes.push(AuditShape::new(item, rows, cols));
    }
    if shapes.is_empty() {
        return Err(Error::BadFlag("shape list is empty".into()));
    }
    Ok(shapes)
}

/// Parses `--eps`: comma-separated strictly positive finite values.
fn parse_eps_list(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in text.split(',') {
        let item = item.trim();
        let eps: f64 = item
            .parse()
            .map_err(|_| Error::BadFlag(format!("bad epsilon {item:?}")))?;
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::BadFlag(format!(
                "epsilon must be finite and > 0, got {item}"
            )));
        }
        out.push(eps);
    }
    if out.is_empty() {
        return Err(Error::BadFlag("epsilon list is empty".into()));
    }
    Ok(out)
}

/// Parses `--optimizers`: "all" or a comma-separated subset, order kept.
fn parse_optimizers(text: &str) -> Result<Vec<OptimizerKind>> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(vec![
            OptimizerKind::AdamW,
            OptimizerKind::Muon,
            OptimizerKind::PolarAdamW,
        ]);
    }
    let mut out: Vec<OptimizerKind> = Vec::new();
    for item in text.split(',') {
        let kind: OptimizerKind = item.trim().parse()?;
        if out.contains(&kind) {
            return Err(Error::BadFlag(format!("duplicate optimizer {kind}")));
        }
        out.push(kind);
    }
    if out.is_empty() {
        return Err(Error::BadFlag("optimizer list is empty".into()));
    }
    Ok(out)
}

/// Parses `--hc-list`: comma-separated positive widths.
fn parse_hc_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in text.split(',') {
        let item = item.trim();
        let hc: usize = item
            .parse()
            .map_err(|_| Error::BadFlag(format!("bad width {item:?}")))?;
        if hc == 0 {
            return Err(Error::BadFlag("width 0 is not allowed".into()));
        }
        if out.contains(&hc) {
            return Err(Error::BadFlag(format!("duplicate width {hc}")));
        }
        out.push(hc);
    }
    if out.is_empty() {
        return Err(Error::BadFlag("width list is empty".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// manifests

/// Provenance sidecar written next to every output file.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    master_seed: u64,
    artifacts: Vec<String>,
    tool_version: String,
    unix_timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
}

fn manifest_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

fn manifest_basename(out: &Path) -> String {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| out.display().to_string());
    format!("{name}.manifest.json")
}

fn unix_timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(
    out: &Path,
    command_text: &str,
    config: serde_json::Value,
    master_seed: u64,
    wall_seconds: Option<f64>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command_text.to_string(),
        config,
        master_seed,
        artifacts: vec![out.display().to_string()],
        tool_version: TOOL_VERSION.to_string(),
        unix_timestamp: unix_timestamp(),
        wall_seconds,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path(out), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// audit

fn cmd_audit(args: AuditArgs, command_text: &str) -> Result<i32> {
    let mut file = FileConfig::load(args.config.as_ref())?;
    let shapes_text = args
        .shapes
        .or_else(|| file.take_string("shapes"))
        .unwrap_or_else(|| BUILTIN_SHAPES_KEYWORD.to_string());
    let triples = args
        .triples
        .or(file.take("triples")?)
        .unwrap_or(DEFAULT_TRIPLES);
    let seed = args.seed.or(file.take("seed")?).unwrap_or(0);
    let format: OutputFormat = match args.format {
        Some(text) => text.parse()?,
        None => file.take("format")?.unwrap_or(OutputFormat::Table),
    };
    file.finish()?;

    if triples == 0 {
        return Err(Error::BadFlag("--triples must be at least 1".into()));
    }
    let shapes = parse_shapes(&shapes_text)?;

    let rows = run_shape_audit(&shapes, triples, seed)?;
    match format {
        OutputFormat::Table => print!("{}", rows_to_table(&rows)),
        OutputFormat::Csv => print!("{}", rows_to_csv(&rows)),
    }

    if let Some(out) = &args.out {
        let csv = format!("# manifest: {}\n{}", manifest_basename(out), rows_to_csv(&rows));
        std::fs::write(out, csv)?;
        let config = serde_json::json!({
            "shapes": shapes_text,
            "triples": triples,
            "seed": seed,
            "format": format.label(),
        });
        write_manifest(out, command_text, config, seed, None)?;
        eprintln!("wrote {}", out.display());
    }

    let violations = check_bands(&rows);
    for v in &violations {
        eprintln!("band violation: {v}");
    }
    Ok(if violations.is_empty() { 0 } else { 2 })
}

// ---------------------------------------------------------------------------
// counterexample

fn cmd_counterexample(args: CounterexampleArgs) -> Result<i32> {
    let mut file = FileConfig::load(args.config.as_ref())?;
    let eps_text = args
        .eps
        .or_else(|| file.take_string("eps"))
        .unwrap_or_else(|| DEFAULT_EPS_LIST.to_string());
    file.finish()?;
    let eps_list = parse_eps_list(&eps_text)?;

    println!(
        "{:>10}  {:>12}  {:>12}  {:>12}",
        "eps", "lhs_factor", "rhs_factor", "gap"
    );
    let mut all_gaps_positive = true;
    for &eps in &eps_list {
        let report = counterexample_check(eps);
        println!(
            "{:>10}  {:>12.6}  {:>12.6}  {:>12.6e}",
            eps, report.lhs_factor, report.rhs_factor, report.gap
        );
        if report.gap <= GAP_FLOOR {
            all_gaps_positive = false;
        }
    }
    let sign_limit = counterexample_check(SIGN_LIMIT_EPS);
    println!(
        "matrix deviation at the sign limit: {:.9} (sqrt(2) - 1 = {:.9})",
        sign_limit.matrix_delta,
        std::f64::consts::SQRT_2 - 1.0
    );

    if all_gaps_positive {
        Ok(0)
    } else {
        eprintln!("gap violation: a scalar covariance gap fell below {GAP_FLOOR:e}");
        Ok(2)
    }
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(args: TrainArgs, command_text: &str) -> Result<i32> {
    let mut file = FileConfig::load(args.config.as_ref())?;
    let hc = args.hc.or(file.take("hc")?).unwrap_or(16);
    let optimizer: OptimizerKind = match args.optimizer {
        Some(text) => text.parse()?,
        None => file
            .take("optimizer")?
            .ok_or_else(|| Error::BadFlag("--optimizer is required (adamw, muon, or polaradamw)".into()))?,
    };
    let seed = args.seed.or(file.take("seed")?).unwrap_or(0);
    let epochs = args.epochs.or(file.take("epochs")?);
    let lr = args.lr.or(file.take("lr")?);
    let wd = args.wd.or(file.take("wd")?);
    file.finish()?;

    let mut config = TrainConfig::new(
        hc,
        optimizer,
        lr.unwrap_or_else(|| optimizer.default_base_lr()),
        seed,
    );
    if let Some(epochs) = epochs {
        config.epochs = epochs;
    }
    if let Some(wd) = wd {
        config.weight_decay = wd;
    }

    let record = match train(&config) {
        Ok(record) => record,
        Err(Error::Divergence { epoch }) => {
            eprintln!("error: training diverged at epoch {epoch}");
            return Ok(3);
        }
        Err(e) => return Err(e),
    };

    // The artifact must be byte-reproducible for fixed flags and seed, so
    // the measured wall time moves to the manifest and the record carries 0.
    let mut record_json = serde_json::to_value(&record)?;
    record_json["wall_seconds"] = serde_json::json!(0.0);
    if let Some(out) = &args.out {
        record_json["manifest"] = serde_json::json!(manifest_basename(out));
        let text = serde_json::to_string_pretty(&record_json)?;
        std::fs::write(out, text + "\n")?;
        write_manifest(
            out,
            command_text,
            serde_json::to_value(&config)?,
            seed,
            Some(record.wall_seconds),
        )?;
        eprintln!("wrote {}", out.display());
    } else {
        println!("{}", serde_json::to_string_pretty(&record_json)?);
    }
    eprintln!(
        "train hc={hc} optimizer={optimizer} seed={seed}: final_test_mse {:.6e}, best epoch {}, stopped after {} epochs",
        record.final_test_mse, record.best_epoch, record.stopped_epoch
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// sweep

/// Grid description for [`run_sweep`].
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub hc_list: Vec<usize>,
    pub optimizers: Vec<OptimizerKind>,
    /// Paired seeds 0..n_seeds shared across arms.
    pub n_seeds: u64,
    pub parallel: usize,
    pub epochs: usize,
}

impl SweepConfig {
    pub fn new(hc_list: Vec<usize>, optimizers: Vec<OptimizerKind>, n_seeds: u64) -> Self {
        SweepConfig {
            hc_list,
            optimizers,
            n_seeds,
            parallel: 1,
            epochs: 100,
        }
    }
}

/// One grid point's result: the final test MSE, or the failure text.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub hc: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub final_test_mse: Option<f64>,
    pub stopped_epoch: Option<usize>,
    pub error: Option<String>,
}

/// Per-(width, optimizer) aggregate over the common valid seeds.
#[derive(Debug, Clone, Serialize)]
pub struct CellStats {
    pub hc: usize,
    pub optimizer: OptimizerKind,
    pub n_common_seeds: usize,
    pub mean_test_mse: Option<f64>,
    pub std_test_mse: Option<f64>,
    pub excluded_seeds: Vec<u64>,
}

/// Paired statistics of (PolarAdamW − Muon) per-seed differences.
#[derive(Debug, Clone, Serialize)]
pub struct PairedStats {
    pub hc: usize,
    pub n_common_seeds: usize,
    pub mean_delta: Option<f64>,
    pub std_delta: Option<f64>,
    /// mean / (std / √n); absent for n < 2 or zero spread.
    pub t_stat: Option<f64>,
    /// Fraction of common seeds with a strictly positive difference.
    pub sign_consistency: Option<f64>,
    pub excluded_seeds: Vec<u64>,
}

/// Everything a sweep produces, in deterministic order.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub runs: Vec<RunOutcome>,
    pub cells: Vec<CellStats>,
    pub paired: Vec<PairedStats>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Runs the grid with seed-level parallelism. Every run is deterministic
/// in isolation, so the aggregation is independent of worker scheduling;
/// results land in an append-only sink and are sorted afterwards.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport> {
    if config.hc_list.is_empty() || config.optimizers.is_empty() {
        return Err(Error::BadFlag("sweep needs at least one width and one optimizer".into()));
    }
    if config.n_seeds == 0 {
        return Err(Error::BadFlag("--seeds must be at least 1".into()));
    }
    if config.parallel == 0 {
        return Err(Error::BadFlag("--parallel must be at least 1".into()));
    }

    let mut jobs: Vec<(usize, OptimizerKind, u64)> = Vec::new();
    for &hc in &config.hc_list {
        for &opt in &config.optimizers {
            for seed in 0..config.n_seeds {
                jobs.push((hc, opt, seed));
            }
        }
    }

    let cursor = AtomicUsize::new(0);
    let sink: Mutex<Vec<RunOutcome>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = config.parallel.min(jobs.len()).max(1);
    let epochs = config.epochs;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(&(hc, opt, seed)) = jobs.get(i) else {
                    break;
                };
                let mut train_config = TrainConfig::new(hc, opt, opt.default_base_lr(), seed);
                train_config.epochs = epochs;
                let outcome = match train(&train_config) {
                    Ok(record) => RunOutcome {
                        hc,
                        optimizer: opt,
                        seed,
                        final_test_mse: Some(record.final_test_mse),
                        stopped_epoch: Some(record.stopped_epoch),
                        error: None,
                    },
                    Err(e) => RunOutcome {
                        hc,
                        optimizer: opt,
                        seed,
                        final_test_mse: None,
                        stopped_epoch: None,
                        error: Some(e.to_string()),
                    },
                };
                sink.lock().expect("result sink poisoned").push(outcome);
            });
        }
    });

    let mut runs = sink.into_inner().expect("result sink poisoned");
    let arm_order = |opt: OptimizerKind| {
        config
            .optimizers
            .iter()
            .position(|&o| o == opt)
            .unwrap_or(usize::MAX)
    };
    runs.sort_by_key(|r| (r.hc, arm_order(r.optimizer), r.seed));

    let (cells, paired) = aggregate(config, &runs);
    Ok(SweepReport { runs, cells, paired })
}

/// A seed counts only when every requested arm finished at that width:
/// failed seeds are excluded pairwise so all aggregates compare like with
/// like.
fn aggregate(config: &SweepConfig, runs: &[RunOutcome]) -> (Vec<CellStats>, Vec<PairedStats>) {
    let mse_of = |hc: usize, opt: OptimizerKind, seed: u64| -> Option<f64> {
        runs.iter()
            .find(|r| r.hc == hc && r.optimizer == opt && r.seed == seed)
            .and_then(|r| r.final_test_mse)
    };

    let mut cells = Vec::new();
    let mut paired = Vec::new();
    for &hc in &config.hc_list {
        let mut common: Vec<u64> = Vec::new();
        let mut excluded: Vec<u64> = Vec::new();
        for seed in 0..config.n_seeds {
            if config
                .optimizers
                .iter()
                .all(|&opt| mse_of(hc, opt, seed).is_some())
            {
                common.push(seed);
            } else {
                excluded.push(seed);
            }
        }

        for &opt in &config.optimizers {
            let mses: Vec<f64> = common
                .iter()
                .map(|&s| mse_of(hc, opt, s).expect("seed vetted as common"))
                .collect();
            cells.push(CellStats {
                hc,
                optimizer: opt,
                n_common_seeds: common.len(),
                mean_test_mse: (!mses.is_empty()).then(|| mean(&mses)),
                std_test_mse: sample_std(&mses),
                excluded_seeds: excluded.clone(),
            });
        }

        let has_pair = config.optimizers.contains(&OptimizerKind::Muon)
            && config.optimizers.contains(&OptimizerKind::PolarAdamW);
        if has_pair {
            let deltas: Vec<f64> = common
                .iter()
                .map(|&s| {
                    mse_of(hc, OptimizerKind::PolarAdamW, s).expect("common seed")
                        - mse_of(hc, OptimizerKind::Muon, s).expect("common seed")
                })
                .collect();
            let n = deltas.len();
            let mean_delta = (!deltas.is_empty()).then(|| mean(&deltas));
            let std_delta = sample_std(&deltas);
            let t_stat = match (mean_delta, std_delta) {
                (Some(m), Some(s)) if s > 0.0 => Some(m / (s / (n as f64).sqrt())),
                _ => None,
            };
            let sign_consistency = (!deltas.is_empty())
                .then(|| deltas.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64);
            paired.push(PairedStats {
                hc,
                n_common_seeds: n,
                mean_delta,
                std_delta,
                t_stat,
                sign_consistency,
                excluded_seeds: excluded.clone(),
            });
        }
    }
    (cells, paired)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.9e}")).unwrap_or_default()
}

fn fmt_seeds(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// One row per (width, optimizer) cell plus one paired-difference row per
/// width that has both polar arms.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut s = String::from(
        "hc,row,optimizer,n_seeds,mean_test_mse,std_test_mse,mean_delta,std_delta,t_stat,sign_consistency,excluded_seeds\n",
    );
    for cell in &report.cells {
        s.push_str(&format!(
            "{},cell,{},{},{},{},,,,,{}\n",
            cell.hc,
            cell.optimizer,
            cell.n_common_seeds,
            fmt_opt(cell.mean_test_mse),
            fmt_opt(cell.std_test_mse),
            fmt_seeds(&cell.excluded_seeds),
        ));
    }
    for pair in &report.paired {
        s.push_str(&format!(
            "{},paired_delta,polaradamw-muon,{},,,{},{},{},{},{}\n",
            pair.hc,
            pair.n_common_seeds,
            fmt_opt(pair.mean_delta),
            fmt_opt(pair.std_delta),
            fmt_opt(pair.t_stat),
            pair.sign_consistency
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default(),
            fmt_seeds(&pair.excluded_seeds),
        ));
    }
    s
}

/// Aligned human-readable sweep summary.
pub fn sweep_table(report: &SweepReport) -> String {
    let mut s = String::new();
    for cell in &report.cells {
        s.push_str(&format!(
            "hc={:<4} {:<11} n={:<3} mean test MSE {}  std {}\n",
            cell.hc,
            cell.optimizer.to_string(),
            cell.n_common_seeds,
            cell.mean_test_mse
                .map(|v| format!("{v:.4e}"))
                .unwrap_or_else(|| "-".into()),
            cell.std_test_mse
                .map(|v| format!("{v:.2e}"))
                .unwrap_or_else(|| "-".into()),
        ));
    }
    for pair in &report.paired {
        s.push_str(&format!(
            "hc={:<4} polaradamw-muon: n={} mean delta {}  t {}  sign consistency {}\n",
            pair.hc,
            pair.n_common_seeds,
            pair.mean_delta
                .map(|v| format!("{v:.4e}"))
                .unwrap_or_else(|| "-".into()),
            pair.t_stat
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "absent".into()),
            pair.sign_consistency
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into()),
        ));
    }
    let failed: Vec<&RunOutcome> = report.runs.iter().filter(|r| r.error.is_some()).collect();
    if !failed.is_empty() {
        s.push_str("failed runs (excluded pairwise):\n");
        for r in failed {
            s.push_str(&format!(
                "  hc={} {} seed={}: {}\n",
                r.hc,
                r.optimizer,
                r.seed,
                r.error.as_deref().unwrap_or("unknown")
            ));
        }
    }
    s
}

fn cmd_sweep(args: SweepArgs, command_text: &str) -> Result<i32> {
    let mut file = FileConfig::load(args.config.as_ref())?;
    let hc_text = args
        .hc_list
        .or_else(|| file.take_string("hc-list"))
        .unwrap_or_else(|| "16".to_string());
    let optimizers_text = args
        .optimizers
        .or_else(|| file.take_string("optimizers"))
        .unwrap_or_else(|| "all".to_string());
    let n_seeds = args
        .seeds
        .or(file.take("seeds")?)
        .unwrap_or(DEFAULT_SWEEP_SEEDS);
    let parallel = args.parallel.or(file.take("parallel")?).unwrap_or(1);
    let epochs = args.epochs.or(file.take("epochs")?).unwrap_or(100);
    file.finish()?;

    let config = SweepConfig {
        hc_list: parse_hc_list(&hc_text)?,
        optimizers: parse_optimizers(&optimizers_text)?,
        n_seeds,
        parallel,
        epochs,
    };

    let report = run_sweep(&config)?;
    print!("{}", sweep_table(&report));

    if let Some(out) = &args.out {
        let csv = format!("# manifest: {}\n{}", manifest_basename(out), sweep_csv(&report));
        std::fs::write(out, csv)?;
        let manifest_config = serde_json::json!({
            "hc_list": config.hc_list,
            "optimizers": config.optimizers.iter().map(|o| o.label()).collect::<Vec<_>>(),
            "seeds": config.n_seeds,
            "parallel": config.parallel,
            "epochs": config.epochs,
        });
        write_manifest(out, command_text, manifest_config, 0, None)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn shapes_parse_builtin_keyword_and_explicit_sizes() {
        let builtin = parse_shapes(BUILTIN_SHAPES_KEYWORD).unwrap();
        assert_eq!(builtin.len(), 15);
        assert_eq!(builtin, default_shapes());
        assert_eq!(parse_shapes("builtin").unwrap(), default_shapes());

        let custom = parse_shapes(" 8x8, 16X4 ").unwrap();
        assert_eq!(custom.len(), 2);
        assert_eq!(custom[0], AuditShape::new("8x8", 8, 8));
        assert_eq!(custom[1], AuditShape::new("16X4", 16, 4));

        assert!(matches!(parse_shapes("8by8"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_shapes("0x4"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_shapes("4x"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_shapes(""), Err(Error::BadFlag(_))));
    }

    #[test]
    fn eps_list_requires_positive_finite_entries() {
        assert_eq!(
            parse_eps_list(DEFAULT_EPS_LIST).unwrap(),
            vec![1e-3, 1e-1, 1.0, 10.0]
        );
        assert!(matches!(parse_eps_list("-1"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_eps_list("0"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_eps_list("inf"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_eps_list("abc"), Err(Error::BadFlag(_))));
    }

    #[test]
    fn optimizer_list_parses_all_and_subsets() {
        assert_eq!(
            parse_optimizers("all").unwrap(),
            vec![
                OptimizerKind::AdamW,
                OptimizerKind::Muon,
                OptimizerKind::PolarAdamW
            ]
        );
        assert_eq!(
            parse_optimizers("muon, adamw").unwrap(),
            vec![OptimizerKind::Muon, OptimizerKind::AdamW]
        );
        assert!(matches!(
            parse_optimizers("muon,muon"),
            Err(Error::BadFlag(_))
        ));
        assert!(matches!(parse_optimizers("sgd"), Err(Error::BadFlag(_))));
    }

    #[test]
    fn hc_list_parses_positive_unique_widths() {
        assert_eq!(parse_hc_list("16").unwrap(), vec![16]);
        assert_eq!(parse_hc_list("16, 32,64").unwrap(), vec![16, 32, 64]);
        assert!(matches!(parse_hc_list("0"), Err(Error::BadFlag(_))));
        assert!(matches!(parse_hc_list("16,16"), Err(Error::BadFlag(_))));
    }

    #[test]
    fn config_file_parses_comments_and_rejects_junk() {
        let text = "\n# a comment\ntriples = 7\nseed = 3   # trailing comment\n";
        let mut cfg = FileConfig::parse(text, "test").unwrap();
        assert_eq!(cfg.take::<usize>("triples").unwrap(), Some(7));
        assert_eq!(cfg.take::<u64>("seed").unwrap(), Some(3));
        cfg.finish().unwrap();

        assert!(matches!(
            FileConfig::parse("no equals sign", "test"),
            Err(Error::BadFlag(_))
        ));
        assert!(matches!(
            FileConfig::parse("a = 1\na = 2", "test"),
            Err(Error::BadFlag(_))
        ));
        let leftover = FileConfig::parse("mystery = 4", "test").unwrap();
        assert!(matches!(leftover.finish(), Err(Error::BadFlag(_))));
    }

    #[test]
    fn config_file_values_lose_to_flags_and_beat_defaults() {
        let mut tmp = tempfile::NamedTempFile::new().unwrap();
        writeln!(tmp, "triples = 9\nseed = 4").unwrap();
        let path = tmp.path().to_path_buf();

        // flag beats file
        let mut file = FileConfig::load(Some(&path)).unwrap();
        let flag: Option<usize> = Some(2);
        let triples = flag.or(file.take("triples").unwrap()).unwrap_or(50);
        assert_eq!(triples, 2);

        // file beats default
        let mut file = FileConfig::load(Some(&path)).unwrap();
        let flag: Option<u64> = None;
        let seed = flag.or(file.take("seed").unwrap()).unwrap_or(0);
        assert_eq!(seed, 4);
    }

    fn outcome(
        hc: usize,
        optimizer: OptimizerKind,
        seed: u64,
        mse: std::result::Result<f64, &str>,
    ) -> RunOutcome {
        match mse {
            Ok(v) => RunOutcome {
                hc,
                optimizer,
                seed,
                final_test_mse: Some(v),
                stopped_epoch: Some(1),
                error: None,
            },
            Err(e) => RunOutcome {
                hc,
                optimizer,
                seed,
                final_test_mse: None,
                stopped_epoch: None,
                error: Some(e.to_string()),
            },
        }
    }

    fn three_arm_config(n_seeds: u64) -> SweepConfig {
        SweepConfig::new(
            vec![16],
            vec![
                OptimizerKind::AdamW,
                OptimizerKind::Muon,
                OptimizerKind::PolarAdamW,
            ],
            n_seeds,
        )
    }

    #[test]
    fn aggregation_excludes_failed_seeds_pairwise() {
        let config = three_arm_config(3);
        let mut runs = Vec::new();
        for seed in 0..3u64 {
            runs.push(outcome(16, OptimizerKind::AdamW, seed, Ok(10.0 + seed as f64)));
            runs.push(outcome(16, OptimizerKind::Muon, seed, Ok(1.0 + seed as f64)));
        }
        runs.push(outcome(16, OptimizerKind::PolarAdamW, 0, Ok(2.0)));
        runs.push(outcome(16, OptimizerKind::PolarAdamW, 1, Err("diverged")));
        runs.push(outcome(16, OptimizerKind::PolarAdamW, 2, Ok(4.0)));

        let (cells, paired) = aggregate(&config, &runs);
        assert_eq!(cells.len(), 3);
        for cell in &cells {
            // seed 1 failed in one arm, so every arm drops it
            assert_eq!(cell.n_common_seeds, 2);
            assert_eq!(cell.excluded_seeds, vec![1]);
        }
        let adamw = &cells[0];
        assert_eq!(adamw.optimizer, OptimizerKind::AdamW);
        assert_eq!(adamw.mean_test_mse, Some((10.0 + 12.0) / 2.0));

        assert_eq!(paired.len(), 1);
        let pair = &paired[0];
        assert_eq!(pair.n_common_seeds, 2);
        // deltas: seed 0 → 2-1 = 1, seed 2 → 4-3 = 1
        assert_eq!(pair.mean_delta, Some(1.0));
        assert_eq!(pair.sign_consistency, Some(1.0));
        // zero spread → no t statistic
        assert_eq!(pair.t_stat, None);
    }

    #[test]
    fn paired_t_matches_the_hand_computed_value() {
        let config = three_arm_config(4);
        let muon = [1.0, 2.0, 3.0, 4.0];
        let polar = [1.5, 2.1, 3.9, 4.3];
        let mut runs = Vec::new();
        for seed in 0..4u64 {
            runs.push(outcome(16, OptimizerKind::AdamW, seed, Ok(9.0)));
            runs.push(outcome(16, OptimizerKind::Muon, seed, Ok(muon[seed as usize])));
            runs.push(outcome(
                16,
                OptimizerKind::PolarAdamW,
                seed,
                Ok(polar[seed as usize]),
            ));
        }
        let (_, paired) = aggregate(&config, &runs);
        let pair = &paired[0];
        // deltas = [0.5, 0.1, 0.9, 0.3]; mean 0.45, sample std √(0.1167…)
        let deltas = [0.5, 0.1, 0.9, 0.3];
        let m = deltas.iter().sum::<f64>() / 4.0;
        let var = deltas.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / 3.0;
        let expect_t = m / (var.sqrt() / 2.0);
        assert!((pair.mean_delta.unwrap() - m).abs() < 1e-12);
        assert!((pair.t_stat.unwrap() - expect_t).abs() < 1e-12);
        assert_eq!(pair.sign_consistency, Some(1.0));
    }

    #[test]
    fn single_seed_reports_no_t_statistic() {
        let config = three_arm_config(1);
        let runs = vec![
            outcome(16, OptimizerKind::AdamW, 0, Ok(5.0)),
            outcome(16, OptimizerKind::Muon, 0, Ok(1.0)),
            outcome(16, OptimizerKind::PolarAdamW, 0, Ok(2.0)),
        ];
        let (cells, paired) = aggregate(&config, &runs);
        assert_eq!(cells[0].n_common_seeds, 1);
        assert_eq!(paired[0].t_stat, None);
        assert_eq!(paired[0].mean_delta, Some(1.0));
    }

    #[test]
    fn sweep_csv_has_one_row_per_cell_plus_paired_rows() {
        let config = three_arm_config(2);
        let mut runs = Vec::new();
        for seed in 0..2u64 {
            for &opt in &config.optimizers {
                runs.push(outcome(16, opt, seed, Ok(1.0 + seed as f64)));
            }
        }
        let (cells, paired) = aggregate(&config, &runs);
        let report = SweepReport { runs, cells, paired };
        let csv = sweep_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        // header + 3 cells + 1 paired row
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("hc,row,optimizer"));
        assert_eq!(lines.iter().filter(|l| l.contains(",cell,")).count(), 3);
        assert_eq!(
            lines
                .iter()
                .filter(|l| l.contains(",paired_delta,"))
                .count(),
            1
        );
    }

    #[test]
    fn missing_pair_arm_produces_no_paired_rows() {
        let config = SweepConfig::new(vec![16], vec![OptimizerKind::Muon], 2);
        let runs = vec![
            outcome(16, OptimizerKind::Muon, 0, Ok(1.0)),
            outcome(16, OptimizerKind::Muon, 1, Ok(2.0)),
        ];
        let (cells, paired) = aggregate(&config, &runs);
        assert_eq!(cells.len(), 1);
        assert!(paired.is_empty());
    }

    #[test]
    fn output_format_parses_case_insensitively() {
        assert_eq!("table".parse::<OutputFormat>().unwrap(), OutputFormat::Table);
        assert_eq!("CSV".parse::<OutputFormat>().unwrap(), OutputFormat::Csv);
        assert!("json".parse::<OutputFormat>().is_err());
    }

    #[test]
    fn manifest_paths_append_the_sidecar_suffix() {
        let out = Path::new("results/audit.csv");
        assert_eq!(
            manifest_path(out),
            PathBuf::from("results/audit.csv.manifest.json")
        );
        assert_eq!(manifest_basename(out), "audit.csv.manifest.json");
    }
}
