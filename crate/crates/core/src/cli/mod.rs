//! Command-line interface.
//!
//! Every subcommand takes its options from flags and, optionally, a JSON
//! document given with `--config`; flags win over the document. Each run
//! that writes to an output directory also writes `run-manifest.json` there
//! with the resolved configuration.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or
//! validation error, 4 numerical failure. Errors and warnings go to stderr
//! as one JSON object per line.

pub mod experiment;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::inference::{fit, FitOptions, FitResult};
use crate::model::{Dimensions, ModelParams};
use crate::rng::RNG_NAME;
use crate::selection::{select_model, SelectionGrid};
use crate::simulate::{paired_fixture, sample_bisbm, sample_observations, Scenario};
use crate::stats::{mclr, pearson_z, two_sample_z, PairedData};
use crate::testing::{evaluate, DecisionReport};

use experiment::{replicates_csv, roc_csv, run_experiment, summary_csv, ExperimentSpec, Method};
use io::{read_adjacency, read_matrix, read_z, write_binary, write_json, write_labels, write_matrix, write_text, MatrixKind};

#[derive(Debug, Parser)]
#[command(name = "bisbm", version, about = "Bipartite noisy block model fitting and structured multiple testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a latent graph and its z-scores.
    Simulate(SimulateArgs),
    /// Build a z-score matrix from paired abundance tables.
    Zscore(ZscoreArgs),
    /// Fit the model at fixed block counts.
    Fit(FitArgs),
    /// Choose block counts by ICL over a grid.
    Select(SelectArgs),
    /// Fit (or select) and test every pair at level alpha.
    Test(TestArgs),
    /// Compare decisions with a true adjacency matrix.
    Evaluate(EvaluateArgs),
    /// Replicated simulation study against baseline procedures.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ScenarioName {
    A,
    B,
    C,
    NoisySbm,
    Paired,
}

/// Options shared by every command that fits the model.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitFlags {
    /// Number of independently initialised runs.
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    inner_iters: Option<usize>,
    /// Relative ELBO change below which a run stops.
    #[arg(long)]
    tol: Option<f64>,
    /// Known null variance; estimated when absent.
    #[arg(long)]
    null_variance: Option<f64>,
}

impl FitFlags {
    fn options(&self, seed: u64) -> Result<FitOptions> {
        let d = FitOptions::default();
        let opts = FitOptions {
            max_outer_iters: self.max_iters.unwrap_or(d.max_outer_iters),
            inner_iters: self.inner_iters.unwrap_or(d.inner_iters),
            elbo_rel_tol: self.tol.unwrap_or(d.elbo_rel_tol),
            n_restarts: self.restarts.unwrap_or(d.n_restarts),
            seed,
            null_variance: self.null_variance,
        };
        opts.validate()?;
        Ok(opts)
    }
}

/// Block-count ranges for `select`, `test` and `experiment`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridFlags {
    #[arg(long)]
    b1_min: Option<usize>,
    #[arg(long)]
    b1_max: Option<usize>,
    #[arg(long)]
    b2_min: Option<usize>,
    #[arg(long)]
    b2_max: Option<usize>,
}

impl GridFlags {
    fn grid(&self) -> Result<SelectionGrid> {
        let d = SelectionGrid::default();
        SelectionGrid::new(
            self.b1_min.unwrap_or(*d.b1_range.start())..=self.b1_max.unwrap_or(*d.b1_range.end()),
            self.b2_min.unwrap_or(*d.b2_range.start())..=self.b2_max.unwrap_or(*d.b2_range.end()),
        )
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: Option<ScenarioName>,
    /// Alternative mean for the noisy-sbm design.
    #[arg(long)]
    mu: Option<f64>,
    /// Model parameters (JSON) for a custom block-model draw; needs n1, n2.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    /// Sample count for the paired fixture.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ZscoreArgs {
    /// First table (samples x features, header row, sample-ID column).
    #[arg(long)]
    y1: Option<PathBuf>,
    #[arg(long)]
    y2: Option<PathBuf>,
    /// Second-group tables; when given, two-sample statistics are computed.
    #[arg(long)]
    y1_group2: Option<PathBuf>,
    #[arg(long)]
    y2_group2: Option<PathBuf>,
    /// Apply the mCLR transform to the first table(s).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mclr: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitArgs {
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    b1: Option<usize>,
    #[arg(long)]
    b2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelectArgs {
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TestArgs {
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed block counts; when absent they are selected by ICL.
    #[arg(long)]
    b1: Option<usize>,
    #[arg(long)]
    b2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateArgs {
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentArgs {
    #[arg(long, value_enum)]
    scenario: Option<ScenarioName>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    methods: Option<Vec<Method>>,
    /// Hold the null at N(0, 1) when fitting (the simulated null).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    known_null: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Fit(_) => 4,
        _ => 3,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Index { .. } => "index",
        Error::Input(_) => "input",
        Error::ZeroVariance { .. } => "zero-variance",
        Error::Fit(_) => "fit",
        Error::Parse { .. } => "parse",
        Error::Validation { .. } => "validation",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
    }
}

struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            let line = json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            eprintln!("{line}");
        }
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

fn init_logging() {
    if log::set_logger(&LOGGER).is_ok() {
        let level = std::env::var("BISBM_LOG")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(log::LevelFilter::Warn);
        log::set_max_level(level);
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    eprintln!("{}", json!({ "level": "error", "kind": kind, "exit_code": code, "message": message }));
}

fn thread_count() -> Result<Option<usize>> {
    match std::env::var("BISBM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("BISBM_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            report_error("usage", 2, first);
            return 2;
        }
    };
    let outcome = thread_count().and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            report_error(error_kind(&e), code, &e.to_string());
            code
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(resolve(a.config.clone(), &a)?),
        Command::Zscore(a) => cmd_zscore(resolve(a.config.clone(), &a)?),
        Command::Fit(a) => cmd_fit(resolve(a.config.clone(), &a)?),
        Command::Select(a) => cmd_select(resolve(a.config.clone(), &a)?),
        Command::Test(a) => cmd_test(resolve(a.config.clone(), &a)?),
        Command::Evaluate(a) => cmd_evaluate(resolve(a.config.clone(), &a)?),
        Command::Experiment(a) => cmd_experiment(resolve(a.config.clone(), &a)?),
    }
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                overlay(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Merges a JSON config (if any) under the command-line flags.
fn resolve<T: Serialize + DeserializeOwned>(config: Option<PathBuf>, flags: &T) -> Result<T> {
    let mut base = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: invalid JSON: {e}", path.display())))?;
            if !v.is_object() {
                return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
            }
            serde_json::from_value::<T>(v.clone())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            v
        }
        None => Value::Object(Default::default()),
    };
    let top = serde_json::to_value(flags).map_err(|e| Error::Config(e.to_string()))?;
    overlay(&mut base, top);
    serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
}

fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("missing required option --{name}")))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, seed: Option<u64>, config: &T, extra: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "rng": RNG_NAME,
        "seed": seed,
        "config": config,
        "resolved": extra,
    });
    write_json(&dir.join("run-manifest.json"), &manifest)
}

fn to_scenario(name: ScenarioName, mu: Option<f64>) -> Result<Scenario> {
    Ok(match name {
        ScenarioName::A => Scenario::A,
        ScenarioName::B => Scenario::B,
        ScenarioName::C => Scenario::C,
        ScenarioName::NoisySbm => Scenario::NoisySbm { mu: mu.unwrap_or(3.0) },
        ScenarioName::Paired => return Err(Error::Config("the paired fixture is not a testing scenario".into())),
    })
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    prepare_dir(&out)?;
    let resolved;
    if let Some(path) = &a.params {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let params: ModelParams =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dims = Dimensions::new(required(&a.n1, "n1")?, required(&a.n2, "n2")?, params.b1(), params.b2())?;
        let truth = sample_bisbm(dims, &params, crate::rng::derive_seed(seed, 0))?;
        let x = sample_observations(&truth, &params, crate::rng::derive_seed(seed, 1))?;
        write_matrix(&out.join("x.csv"), x.values(), None)?;
        write_binary(&out.join("adjacency.csv"), truth.a.entries())?;
        write_labels(&out.join("z1.csv"), truth.z1.labels())?;
        write_labels(&out.join("z2.csv"), truth.z2.labels())?;
        write_json(&out.join("params.json"), &params)?;
        resolved = json!({ "scenario": "custom", "n1": dims.n1, "n2": dims.n2 });
    } else {
        let name = required(&a.scenario, "scenario")?;
        if name == ScenarioName::Paired {
            let m = a.samples.unwrap_or(131);
            let (n_taxa, n_met) = (a.n1.unwrap_or(49), a.n2.unwrap_or(128));
            if m < 3 || n_taxa == 0 || n_met == 0 {
                return Err(Error::Config("paired fixture needs samples >= 3 and at least one feature per table".into()));
            }
            let f = paired_fixture(m, n_taxa, n_met, seed);
            let ids: Vec<String> = (1..=m).map(|k| format!("s{k}")).collect();
            let taxa: Vec<String> = (1..=n_taxa).map(|k| format!("taxon{k}")).collect();
            let mets: Vec<String> = (1..=n_met).map(|k| format!("met{k}")).collect();
            io::write_abundance(&out.join("counts.csv"), &ids, &taxa, &f.counts)?;
            io::write_abundance(&out.join("metabolites.csv"), &ids, &mets, &f.metabolites)?;
            let groups = Array2::from_shape_fn((m, 1), |(k, _)| f64::from(f.group[k]));
            io::write_abundance(&out.join("groups.csv"), &ids, &["group".to_owned()], &groups)?;
            resolved = json!({ "scenario": "paired", "samples": m, "n_taxa": n_taxa, "n_metabolites": n_met });
        } else {
            let scenario = to_scenario(name, a.mu)?;
            let (d1, d2) = scenario.default_dims();
            let (n1, n2) = (a.n1.unwrap_or(d1), a.n2.unwrap_or(d2));
            let data = scenario.generate(n1, n2, seed)?;
            write_matrix(&out.join("x.csv"), data.x.values(), None)?;
            write_binary(&out.join("adjacency.csv"), data.truth.a.entries())?;
            if data.has_blocks {
                write_labels(&out.join("z1.csv"), data.truth.z1.labels())?;
                write_labels(&out.join("z2.csv"), data.truth.z2.labels())?;
            }
            resolved = json!({ "scenario": scenario, "n1": data.x.n1(), "n2": data.x.n2() });
        }
    }
    write_manifest(&out, "simulate", Some(seed), &a, resolved)
}

fn read_abundance(path: &Path) -> Result<io::Table> {
    read_matrix(path, MatrixKind::Abundance)
}

fn cmd_zscore(a: ZscoreArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let use_mclr = a.mclr.unwrap_or(false);
    let load = |p: &Path, first: bool| -> Result<io::Table> {
        let mut t = read_abundance(p)?;
        if first && use_mclr {
            t.values = mclr(&t.values)?;
        }
        Ok(t)
    };
    let y1 = load(&required(&a.y1, "y1")?, true)?;
    let y2 = load(&required(&a.y2, "y2")?, false)?;
    let names = |t: &io::Table| t.header.as_ref().map(|h| h[1..].to_vec()).unwrap_or_default();
    let (x, degenerate) = match (&a.y1_group2, &a.y2_group2) {
        (Some(p1), Some(p2)) => {
            let g2 = PairedData::new(load(p1, true)?.values, load(p2, false)?.values)?;
            two_sample_z(&PairedData::new(y1.values.clone(), y2.values.clone())?, &g2)?
        }
        (None, None) => {
            let (x, st) = pearson_z(&PairedData::new(y1.values.clone(), y2.values.clone())?)?;
            (x, st.degenerate)
        }
        _ => return Err(Error::Config("--y1-group2 and --y2-group2 must be given together".into())),
    };
    if !degenerate.is_empty() {
        log::warn!("{} pairs had a degenerate variance term and were set to 0", degenerate.len());
    }
    prepare_dir(&out)?;
    write_matrix(&out.join("z.csv"), x.values(), None)?;
    write_json(&out.join("z-names.json"), &json!({ "rows": names(&y1), "cols": names(&y2) }))?;
    write_manifest(&out, "zscore", None, &a, json!({ "n1": x.n1(), "n2": x.n2(), "degenerate": degenerate.len() }))
}

fn write_fit(dir: &Path, f: &FitResult) -> Result<()> {
    prepare_dir(dir)?;
    write_json(&dir.join("params.json"), &f.params)?;
    write_labels(&dir.join("z1.csv"), f.z1_hat.labels())?;
    write_labels(&dir.join("z2.csv"), f.z2_hat.labels())?;
    let trace = Array2::from_shape_vec((f.elbo_trace.len(), 1), f.elbo_trace.clone()).expect("column");
    write_matrix(&dir.join("elbo-trace.csv"), &trace, Some(&["elbo".to_owned()]))?;
    write_json(
        &dir.join("fit.json"),
        &json!({
            "elbo": f.elbo(),
            "converged": f.converged,
            "iterations": f.elbo_trace.len() - 1,
            "restart_index": f.restart_index,
            "init_fallback": f.init_fallback,
            "empty_block_events": f.empty_block_events,
        }),
    )
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let x = read_z(&required(&a.x, "x")?)?;
    let seed = a.seed.unwrap_or(0);
    let opts = a.fit.options(seed)?;
    let dims = Dimensions::new(x.n1(), x.n2(), required(&a.b1, "b1")?, required(&a.b2, "b2")?)?;
    let f = fit(&x, dims, &opts)?;
    write_fit(&out, &f)?;
    write_manifest(&out, "fit", Some(seed), &a, json!({ "fit_options": opts }))
}

fn icl_table(sel: &crate::selection::Selection) -> (Array2<f64>, Vec<String>) {
    let header: Vec<String> = ["b1", "b2", "icl", "elbo_complete", "penalty", "elbo", "converged", "failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows: Vec<[f64; 8]> = sel
        .table
        .iter()
        .map(|r| {
            [
                r.b1 as f64,
                r.b2 as f64,
                r.icl,
                r.elbo_complete,
                r.penalty,
                r.fit.elbo(),
                f64::from(u8::from(r.fit.converged)),
                0.0,
            ]
        })
        .collect();
    rows.extend(sel.failed.iter().map(|f| [f.b1 as f64, f.b2 as f64, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
    rows.sort_by(|a, b| (a[0], a[1]).partial_cmp(&(b[0], b[1])).expect("finite counts"));
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    (Array2::from_shape_vec((rows.len(), 8), flat).expect("rectangular"), header)
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let x = read_z(&required(&a.x, "x")?)?;
    let seed = a.seed.unwrap_or(0);
    let opts = a.fit.options(seed)?;
    let grid = a.grid.grid()?;
    let sel = select_model(&x, &grid, &opts)?;
    prepare_dir(&out)?;
    let (table, header) = icl_table(&sel);
    write_matrix(&out.join("icl.csv"), &table, Some(&header))?;
    write_fit(&out.join("best"), &sel.best.fit)?;
    write_manifest(
        &out,
        "select",
        Some(seed),
        &a,
        json!({ "fit_options": opts, "grid": grid, "best": [sel.best.b1, sel.best.b2], "icl": sel.best.icl }),
    )
}

fn cmd_test(a: TestArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let x = read_z(&required(&a.x, "x")?)?;
    let alpha = required(&a.alpha, "alpha")?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let seed = a.seed.unwrap_or(0);
    let opts = a.fit.options(seed)?;
    let f = match (a.b1, a.b2) {
        (Some(b1), Some(b2)) => fit(&x, Dimensions::new(x.n1(), x.n2(), b1, b2)?, &opts)?,
        (None, None) => select_model(&x, &a.grid.grid()?, &opts)?.best.fit,
        _ => return Err(Error::Config("give both --b1 and --b2, or neither to select them".into())),
    };
    let report = DecisionReport::from_fit(&x, &f, alpha)?;
    prepare_dir(&out)?;
    write_matrix(&out.join("lvalues.csv"), report.l_values.values(), None)?;
    write_binary(&out.join("decisions.csv"), &report.decisions)?;
    write_fit(&out.join("fit"), &f)?;
    let summary = json!({
        "alpha": alpha,
        "tau": report.tau,
        "est_mfdr": report.est_mfdr,
        "n_rejected": report.n_rejected(),
        "b1": f.params.b1(),
        "b2": f.params.b2(),
    });
    write_json(&out.join("report.json"), &summary)?;
    write_manifest(&out, "test", Some(seed), &a, json!({ "fit_options": opts }))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let decisions = read_adjacency(&required(&a.decisions, "decisions")?)?;
    let truth = read_adjacency(&required(&a.truth, "truth")?)?;
    let m = evaluate(decisions.entries(), &truth)?;
    println!("fdp={} tdp={} n_rejected={}", m.fdp, m.tdp, m.n_rejected);
    if let Some(out) = &a.out {
        prepare_dir(out)?;
        write_json(&out.join("metrics.json"), &m)?;
        write_manifest(out, "evaluate", None, &a, Value::Null)?;
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let scenario = to_scenario(a.scenario.unwrap_or(ScenarioName::A), a.mu)?;
    let (d1, d2) = scenario.default_dims();
    let seed = a.seed.unwrap_or(0);
    let mut fit = a.fit.options(seed)?;
    if a.known_null.unwrap_or(true) && fit.null_variance.is_none() {
        fit.null_variance = Some(1.0);
    }
    let spec = ExperimentSpec {
        scenario,
        n1: a.n1.unwrap_or(d1),
        n2: a.n2.unwrap_or(d2),
        reps: a.reps.unwrap_or(100),
        alphas: a.alphas.clone().unwrap_or_else(|| vec![0.005, 0.025, 0.05, 0.1, 0.15, 0.25]),
        methods: a.methods.clone().unwrap_or_else(|| vec![Method::Bisbm, Method::Bh, Method::Storey, Method::Sc]),
        seed,
        fit,
        grid: a.grid.grid()?,
    };
    let start = Instant::now();
    let result = run_experiment(&spec)?;
    prepare_dir(&out)?;
    write_text(&out.join("summary.csv"), &summary_csv(&result.summary))?;
    write_text(&out.join("roc.csv"), &roc_csv(&result.summary))?;
    write_text(&out.join("replicates.csv"), &replicates_csv(&result.replicates))?;
    write_manifest(
        &out,
        "experiment",
        Some(seed),
        &a,
        json!({ "spec": spec, "wall_time": start.elapsed().as_secs_f64() }),
    )
}
