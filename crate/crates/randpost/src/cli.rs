//! Command-line front end: configuration files, experiment dispatch, CSV
//! and JSON emission.
//!
//! Configuration is a TOML file with `[run]`, `[marginal]`, `[averaged]`
//! and `[theorem]` sections mirroring the experiment configurations;
//! command-line flags override file values, which override the mode
//! defaults. All floats in emitted files carry 17 significant digits, and
//! output is byte-identical across runs with the same manifest. The wall
//! time column is emitted as a deterministic `0` placeholder for exactly
//! that reason; measured timings go to standard error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::analytic::{
    self, averaged_posterior, exact_posterior, marginal_posterior, mixture_density_fn,
    LinearGaussianProblem, RandomizedLinearGaussianProblem,
};
use crate::diagnostics::{fit_rate, hellinger_quadrature, GridSpec};
use crate::error::Error;
use crate::experiments::{
    averaged_contour_grid, run_averaged_experiment, run_marginal_experiment, run_theorem_check,
    AveragedExperimentConfig, MarginalExperimentConfig, Method, SweepResult, SweepVariable,
    TheoremAxis, TheoremCheckConfig, TheoremMeasure,
};
use crate::gaussian::{hellinger_gaussian, GaussianMeasure};
use crate::potential::{
    normalizing_constant, potential_exact, prior_quadrature, weighted_mc_likelihood,
    LikelihoodBatch, Observation, ZMethod,
};
use crate::rng::SeededRng;

/// Version string recorded in run manifests.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed used when neither the command line nor the configuration file
/// names one.
pub const DEFAULT_SEED: u64 = 20240101;

/// Environment variable consulted for the thread count; overridden by
/// `--threads`.
pub const THREADS_ENV: &str = "RANDPOST_THREADS";

/// Fidelity mode: paper-length chains or the tenfold-shorter CI runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Paper,
    Ci,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Paper => "paper",
            Mode::Ci => "ci",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Mode::Paper),
            "ci" => Ok(Mode::Ci),
            other => Err(format!("unknown mode '{other}', expected 'paper' or 'ci'")),
        }
    }
}

/// A resolved run: where configuration came from, where output goes.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub global_seed: u64,
    pub artifact_version: String,
}

/// Command-level failures, split by exit code: configuration problems exit
/// with 2, numerical failures with 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(err) => write!(f, "numerical failure: {err}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::Numerical(err)
    }
}

// ---------------------------------------------------------------------------
// Configuration file

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub marginal: MarginalSection,
    #[serde(default)]
    pub averaged: AveragedSection,
    #[serde(default)]
    pub theorem: TheoremSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub threads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSection {
    pub d: Option<usize>,
    pub m: Option<usize>,
    pub h: Option<f64>,
    pub sigma: Option<f64>,
    pub inner_m: Option<usize>,
    pub n_steps: Option<usize>,
    pub replicates: Option<usize>,
    pub u_dagger: Option<Vec<f64>>,
    pub sweep: Option<String>,
    pub sweep_values: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragedSection {
    pub m_draws: Option<usize>,
    pub h_values: Option<Vec<f64>>,
    pub u_dagger: Option<Vec<f64>>,
    pub gamma_scale: Option<f64>,
    pub n_steps: Option<usize>,
    pub replicates: Option<usize>,
    pub run_mwmc: Option<bool>,
    pub contour_m: Option<usize>,
    pub contour_h: Option<Vec<f64>>,
    pub contour_nodes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSection {
    pub fixed_m: Option<usize>,
    pub fixed_h: Option<f64>,
    pub h_values: Option<Vec<f64>>,
    pub m_values: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub sigma: Option<f64>,
    pub u_dagger: Option<f64>,
    pub nodes: Option<usize>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", p.display())))
        }
    }
}

// ---------------------------------------------------------------------------
// Shared argument plumbing

/// Flags common to the experiment subcommands.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub threads: Option<usize>,
}

pub struct ResolvedRun {
    pub manifest: RunManifest,
    pub file: FileConfig,
    pub threads: Option<usize>,
}

fn resolve_run(common: &CommonArgs) -> Result<ResolvedRun, CliError> {
    let file = load_file_config(common.config.as_deref())?;
    let mode = match (common.mode, file.run.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => s
            .parse::<Mode>()
            .map_err(CliError::Config)?,
        (None, None) => Mode::Ci,
    };
    let global_seed = common.seed.or(file.run.seed).unwrap_or(DEFAULT_SEED);
    let threads = match common.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                CliError::Config(format!("{THREADS_ENV} must be an integer, got '{v}'"))
            })?),
            Err(_) => file.run.threads,
        },
    };
    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", common.out.display())))?;
    Ok(ResolvedRun {
        manifest: RunManifest {
            config_path: common.config.clone(),
            output_dir: common.out.clone(),
            mode,
            global_seed,
            artifact_version: ARTIFACT_VERSION.to_string(),
        },
        file,
        threads,
    })
}

/// Runs `f` inside a dedicated thread pool when a thread count was
/// requested; otherwise on the default pool.
fn with_thread_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))
            .map(|pool| pool.install(f)),
        _ => Ok(f()),
    }
}

// ---------------------------------------------------------------------------
// Deterministic serialization

/// 17 significant digits: round-trip exact for f64.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(content.as_bytes())
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

#[derive(Debug, Clone)]
enum JsonValue {
    Number(f64),
    Text(String),
}

/// Minimal flat JSON object writer with sorted keys and exact floats.
fn json_object(entries: &BTreeMap<String, JsonValue>) -> String {
    let mut out = String::from("{\n");
    let mut first = true;
    for (key, value) in entries {
        if !first {
            out.push_str(",\n");
        }
        first = false;
        match value {
            JsonValue::Number(v) => out.push_str(&format!("  \"{key}\": {}", fmt_float(*v))),
            JsonValue::Text(v) => out.push_str(&format!("  \"{key}\": \"{v}\"")),
        }
    }
    out.push_str("\n}\n");
    out
}

pub const SWEEP_CSV_HEADER: &str =
    "method,sweep_variable,sweep_value,replicate,acceptance_ratio,mean_error,cov_error,forward_evals,wall_time_s";

fn sweep_row_csv(row: &SweepResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{},0",
        row.method.label(),
        row.sweep_variable.label(),
        fmt_float(row.sweep_value),
        row.replicate,
        fmt_float(row.acceptance_ratio),
        fmt_float(row.mean_error),
        fmt_float(row.cov_error),
        row.forward_evals,
    )
}

/// Median of a nonempty slice.
fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median error per sweep value for one method, as (value, mean, cov).
fn median_errors(rows: &[SweepResult], method: Method) -> Vec<(f64, f64, f64)> {
    let mut values: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.sweep_value)
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.dedup();
    values
        .into_iter()
        .map(|v| {
            let mut means: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.sweep_value == v)
                .map(|r| r.mean_error)
                .collect();
            let mut covs: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.sweep_value == v)
                .map(|r| r.cov_error)
                .collect();
            (v, median(&mut means), median(&mut covs))
        })
        .collect()
}

fn slope_entry(
    entries: &mut BTreeMap<String, JsonValue>,
    key: &str,
    pairs: &[(f64, f64)],
) {
    let usable: Vec<(f64, f64)> = pairs
        .iter()
        .copied()
        .filter(|&(x, y)| x > 0.0 && y > 0.0)
        .collect();
    if usable.len() >= 3 {
        if let Ok(fit) = fit_rate(&usable) {
            entries.insert(key.to_string(), JsonValue::Number(fit.slope));
        }
    } else {
        eprintln!("warning: not enough points to fit '{key}' (need >= 3)");
    }
}

// ---------------------------------------------------------------------------
// marginal

#[derive(Debug, Clone, Default)]
pub struct MarginalArgs {
    pub common: CommonArgs,
    pub sweep: Option<SweepVariable>,
}

fn parse_sweep(label: &str) -> Result<SweepVariable, CliError> {
    match label {
        "M" => Ok(SweepVariable::M),
        "sigma" => Ok(SweepVariable::Sigma),
        "h" => Ok(SweepVariable::H),
        other => Err(CliError::Config(format!(
            "unknown sweep variable '{other}', expected M, sigma or h"
        ))),
    }
}

fn marginal_config(
    run: &ResolvedRun,
    sweep: Option<SweepVariable>,
) -> Result<MarginalExperimentConfig, CliError> {
    let section = &run.file.marginal;
    let sweep = match (sweep, section.sweep.as_deref()) {
        (Some(s), _) => s,
        (None, Some(label)) => parse_sweep(label)?,
        (None, None) => SweepVariable::M,
    };
    let mut config = match run.manifest.mode {
        Mode::Paper => MarginalExperimentConfig::paper_default(sweep, run.manifest.global_seed),
        Mode::Ci => MarginalExperimentConfig::ci_default(sweep, run.manifest.global_seed),
    };
    if let Some(d) = section.d {
        config.d = d;
    }
    if let Some(m) = section.m {
        config.m_dim = m;
    }
    if let Some(h) = section.h {
        config.h = h;
    }
    if let Some(sigma) = section.sigma {
        config.sigma = sigma;
    }
    if let Some(inner_m) = section.inner_m {
        config.inner_m = inner_m;
    }
    if let Some(n) = section.n_steps {
        config.n_steps = n;
    }
    if let Some(r) = section.replicates {
        config.replicates = r;
    }
    if let Some(u) = &section.u_dagger {
        config.u_dagger = DVector::from_vec(u.clone());
    }
    if let Some(values) = &section.sweep_values {
        config.sweep_values = values.clone();
    }
    Ok(config)
}

/// Runs the marginal study and writes `marginal_<sweep>.csv` plus
/// `rates.json` into the output directory.
pub fn cmd_marginal(args: &MarginalArgs) -> Result<(), CliError> {
    let run = resolve_run(&args.common)?;
    let config = marginal_config(&run, args.sweep)?;
    let started = Instant::now();
    let rows = with_thread_pool(run.threads, || run_marginal_experiment(&config))??;

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&sweep_row_csv(row));
        csv.push('\n');
    }
    let csv_path = run
        .manifest
        .output_dir
        .join(format!("marginal_{}.csv", config.sweep_variable.label()));
    write_text(&csv_path, &csv)?;

    let mut entries = BTreeMap::new();
    entries.insert(
        "sweep_variable".to_string(),
        JsonValue::Text(config.sweep_variable.label().to_string()),
    );
    for (method, prefix) in [(Method::Mcwm, "mcwm"), (Method::Pmmh, "pmmh")] {
        let med = median_errors(&rows, method);
        let mean_pairs: Vec<(f64, f64)> = med.iter().map(|&(v, m, _)| (v, m)).collect();
        let cov_pairs: Vec<(f64, f64)> = med.iter().map(|&(v, _, c)| (v, c)).collect();
        slope_entry(&mut entries, &format!("{prefix}_mean_slope"), &mean_pairs);
        slope_entry(&mut entries, &format!("{prefix}_cov_slope"), &cov_pairs);
    }
    write_text(
        &run.manifest.output_dir.join("rates.json"),
        &json_object(&entries),
    )?;

    eprintln!(
        "marginal sweep {}: {} rows in {:.1}s -> {}",
        config.sweep_variable.label(),
        rows.len(),
        started.elapsed().as_secs_f64(),
        csv_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// averaged

#[derive(Debug, Clone, Default)]
pub struct AveragedArgs {
    pub common: CommonArgs,
}

fn averaged_config(run: &ResolvedRun) -> AveragedExperimentConfig {
    let section = &run.file.averaged;
    let mut config = match run.manifest.mode {
        Mode::Paper => AveragedExperimentConfig::paper_default(run.manifest.global_seed),
        Mode::Ci => AveragedExperimentConfig::ci_default(run.manifest.global_seed),
    };
    config.run_mwmc = section.run_mwmc.unwrap_or(true);
    if let Some(m) = section.m_draws {
        config.m_draws = m;
    }
    if let Some(h) = &section.h_values {
        config.h_values = h.clone();
    }
    if let Some(u) = &section.u_dagger {
        config.u_dagger = DVector::from_vec(u.clone());
    }
    if let Some(g) = section.gamma_scale {
        config.gamma_scale = g;
    }
    if let Some(n) = section.n_steps {
        config.n_steps = n;
    }
    if let Some(r) = section.replicates {
        config.replicates = r;
    }
    config
}

/// Default number of frozen realizations in contour grids.
pub const DEFAULT_CONTOUR_M: usize = 10;
/// Default contour grid resolution per axis.
pub const DEFAULT_CONTOUR_NODES: usize = 41;

/// Runs the averaged study and writes `averaged_h.csv`, one
/// `contour_grid_<h>.csv` per contour level and `rates.json`.
pub fn cmd_averaged(args: &AveragedArgs) -> Result<(), CliError> {
    let run = resolve_run(&args.common)?;
    let config = averaged_config(&run);
    let section = &run.file.averaged;
    let contour_m = section.contour_m.unwrap_or(DEFAULT_CONTOUR_M);
    let contour_h = section
        .contour_h
        .clone()
        .unwrap_or_else(|| vec![0.1, 0.01, 0.001]);
    let contour_nodes = section.contour_nodes.unwrap_or(DEFAULT_CONTOUR_NODES);

    let started = Instant::now();
    let output = with_thread_pool(run.threads, || run_averaged_experiment(&config))??;

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    // Mixture records first: closed-form comparisons carry no sampler
    // fields, so acceptance and cost columns are zero.
    for rec in &output.mixture_records {
        csv.push_str(&format!(
            "mixture,h,{},{},{},{},{},0,0\n",
            fmt_float(rec.h),
            rec.replicate,
            fmt_float(0.0),
            fmt_float(rec.mean_error),
            fmt_float(rec.cov_error),
        ));
    }
    for row in &output.sweep_results {
        csv.push_str(&sweep_row_csv(row));
        csv.push('\n');
    }
    write_text(&run.manifest.output_dir.join("averaged_h.csv"), &csv)?;

    for &h in &contour_h {
        let grid = with_thread_pool(run.threads, || {
            averaged_contour_grid(&config, h, contour_m, contour_nodes)
        })??;
        let mut contour_csv = String::from("x1,x2,density_mixture,density_closed_form\n");
        for p in &grid.points {
            contour_csv.push_str(&format!(
                "{},{},{},{}\n",
                fmt_float(p[0]),
                fmt_float(p[1]),
                fmt_float(p[2]),
                fmt_float(p[3]),
            ));
        }
        write_text(
            &run.manifest.output_dir.join(format!("contour_grid_{h}.csv")),
            &contour_csv,
        )?;
    }

    let mut entries = BTreeMap::new();
    if config.h_values.len() < 3 {
        eprintln!(
            "warning: {} h value(s) given; rate fits need at least 3, skipping",
            config.h_values.len()
        );
    }
    let mut h_sorted = config.h_values.clone();
    h_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    h_sorted.dedup();
    let med = |pick: &dyn Fn(&crate::experiments::MixtureRecord) -> f64| -> Vec<(f64, f64)> {
        h_sorted
            .iter()
            .map(|&h| {
                let mut vals: Vec<f64> = output
                    .mixture_records
                    .iter()
                    .filter(|r| r.h == h)
                    .map(pick)
                    .collect();
                (h, median(&mut vals))
            })
            .collect()
    };
    slope_entry(&mut entries, "mixture_mean_slope", &med(&|r| r.mean_error));
    slope_entry(&mut entries, "mixture_cov_slope", &med(&|r| r.cov_error));
    write_text(
        &run.manifest.output_dir.join("rates.json"),
        &json_object(&entries),
    )?;

    eprintln!(
        "averaged study: {} mixture records, {} sampler rows in {:.1}s",
        output.mixture_records.len(),
        output.sweep_results.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// theorem-check

/// Which variable `--fix` pins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixSpec {
    M(usize),
    H(f64),
}

impl std::str::FromStr for FixSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| format!("expected M=<int> or h=<float>, got '{s}'"))?;
        match name {
            "M" => value
                .parse::<usize>()
                .map(FixSpec::M)
                .map_err(|e| format!("invalid M value '{value}': {e}")),
            "h" => value
                .parse::<f64>()
                .map(FixSpec::H)
                .map_err(|e| format!("invalid h value '{value}': {e}")),
            other => Err(format!("unknown fixed variable '{other}', expected M or h")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TheoremArgs {
    pub common: CommonArgs,
    pub fix: Option<FixSpec>,
}

fn theorem_config(run: &ResolvedRun, fix: Option<FixSpec>) -> TheoremCheckConfig {
    let section = &run.file.theorem;
    let mut config = TheoremCheckConfig::default_with_seed(run.manifest.global_seed);
    if run.manifest.mode == Mode::Ci {
        config.replicates = 8;
    }
    if let Some(m) = section.fixed_m {
        config.fixed_m = m;
    }
    if let Some(h) = section.fixed_h {
        config.fixed_h = h;
    }
    if let Some(h) = &section.h_values {
        config.h_values = h.clone();
    }
    if let Some(m) = &section.m_values {
        config.m_values = m.clone();
    }
    if let Some(r) = section.replicates {
        config.replicates = r;
    }
    if let Some(s) = section.sigma {
        config.sigma = s;
    }
    if let Some(u) = section.u_dagger {
        config.u_dagger = u;
    }
    if let Some(n) = section.nodes {
        config.nodes = n;
    }
    match fix {
        Some(FixSpec::M(m)) => {
            config.fixed_m = m;
            config.sweep_m = false;
        }
        Some(FixSpec::H(h)) => {
            config.fixed_h = h;
            config.sweep_h = false;
        }
        None => {}
    }
    config
}

/// Runs the Hellinger scaling check and writes `hellinger_rates.csv` plus
/// `rates.json` with the fitted slopes.
pub fn cmd_theorem_check(args: &TheoremArgs) -> Result<(), CliError> {
    let run = resolve_run(&args.common)?;
    let config = theorem_config(&run, args.fix);
    let started = Instant::now();
    let output = with_thread_pool(run.threads, || run_theorem_check(&config))??;

    let mut csv = String::from("measure,sweep,sweep_value,replicate,hellinger\n");
    for r in &output.records {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.measure.label(),
            r.axis.label(),
            fmt_float(r.sweep_value),
            r.replicate,
            fmt_float(r.hellinger),
        ));
    }
    write_text(&run.manifest.output_dir.join("hellinger_rates.csv"), &csv)?;

    let mut entries = BTreeMap::new();
    for measure in [TheoremMeasure::Marginal, TheoremMeasure::Averaged] {
        for (axis, suffix) in [(TheoremAxis::H, "h"), (TheoremAxis::M, "m")] {
            if let Some(fit) = output.fit(measure, axis) {
                entries.insert(
                    format!("{}_slope_vs_{suffix}", measure.label()),
                    JsonValue::Number(fit.slope),
                );
            }
        }
    }
    write_text(
        &run.manifest.output_dir.join("rates.json"),
        &json_object(&entries),
    )?;

    eprintln!(
        "theorem check: {} records in {:.1}s",
        output.records.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest

#[derive(Debug, Clone, Default)]
pub struct SelftestArgs {
    pub list: bool,
    /// Corrupts every tolerance so the failure path is exercised.
    pub inject_failure: bool,
}

struct CheckOutcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

/// Runs the oracle-equivalence suite (quadrature against closed forms in
/// one dimension) and prints one PASS/FAIL line per check. Returns whether
/// every check passed.
pub fn cmd_selftest(args: &SelftestArgs) -> Result<bool, CliError> {
    let names = [
        "scalar_conjugate_posterior",
        "evidence_quadrature_vs_closed_form",
        "marginal_posterior_vs_quadrature",
        "averaged_posterior_vs_quadrature",
        "hellinger_closed_form_vs_quadrature",
        "weighted_likelihood_integral_identity",
        "mixture_density_normalization",
    ];
    if args.list {
        for name in names {
            println!("{name}");
        }
        return Ok(true);
    }
    let tolerance_scale = if args.inject_failure { 1e-12 } else { 1.0 };
    let outcomes = run_selftest_checks(tolerance_scale)?;
    debug_assert_eq!(outcomes.len(), names.len());
    let mut all_passed = true;
    for outcome in &outcomes {
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {} ({})", outcome.name, outcome.detail);
        all_passed &= outcome.passed;
    }
    Ok(all_passed)
}

fn run_selftest_checks(tolerance_scale: f64) -> Result<Vec<CheckOutcome>, CliError> {
    let mut outcomes = Vec::new();

    // The worked scalar problem: A = 2, Gamma = 1, C0 = 1, m0 = 0, y = 4.
    let scalar = LinearGaussianProblem::new(
        DMatrix::from_vec(1, 1, vec![2.0]),
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::identity(1, 1),
        DVector::from_vec(vec![4.0]),
    )?;
    let randomized = RandomizedLinearGaussianProblem::new(
        scalar.clone(),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        0.5,
    )?;

    {
        let tol = 1e-12 * tolerance_scale;
        let post = exact_posterior(&scalar)?;
        let err = (post.covariance()[(0, 0)] - 0.2)
            .abs()
            .max((post.mean()[0] - 1.6).abs());
        outcomes.push(CheckOutcome {
            name: "scalar_conjugate_posterior",
            passed: err <= tol,
            detail: format!("max error {err:.3e}, tolerance {tol:.1e}"),
        });
    }

    {
        let tol = 1e-6 * tolerance_scale;
        let closed = analytic::evidence(&scalar)?;
        let obs = Observation::new(scalar.y().clone(), scalar.gamma().clone())?;
        let map = crate::forward::LinearForwardMap::new(scalar.a().clone())?;
        let quad = normalizing_constant(
            &obs,
            &map,
            scalar.prior(),
            ZMethod::TensorQuadrature,
            401,
            &SeededRng::new(0, 0),
        )?;
        let err = (closed - quad.value).abs();
        outcomes.push(CheckOutcome {
            name: "evidence_quadrature_vs_closed_form",
            passed: err <= tol,
            detail: format!("|closed - quadrature| = {err:.3e}, tolerance {tol:.1e}"),
        });
    }

    {
        let tol = 1e-4 * tolerance_scale;
        let d_h = marginal_quadrature_distance(&randomized)?;
        outcomes.push(CheckOutcome {
            name: "marginal_posterior_vs_quadrature",
            passed: d_h <= tol,
            detail: format!("Hellinger {d_h:.3e}, tolerance {tol:.1e}"),
        });
    }

    {
        let tol = 1e-4 * tolerance_scale;
        let d_h = averaged_quadrature_distance(&randomized)?;
        outcomes.push(CheckOutcome {
            name: "averaged_posterior_vs_quadrature",
            passed: d_h <= tol,
            detail: format!("Hellinger {d_h:.3e}, tolerance {tol:.1e}"),
        });
    }

    {
        let tol = 1e-6 * tolerance_scale;
        let a = GaussianMeasure::new(
            DVector::from_vec(vec![0.4]),
            DMatrix::from_vec(1, 1, vec![1.2]),
        )?;
        let b = GaussianMeasure::new(
            DVector::from_vec(vec![-0.8]),
            DMatrix::from_vec(1, 1, vec![0.7]),
        )?;
        let grid = GridSpec::new(vec![-14.0], vec![14.0], 4001)?;
        let quad = hellinger_quadrature(
            |x| a.density(&DVector::from_row_slice(x)).unwrap(),
            |x| b.density(&DVector::from_row_slice(x)).unwrap(),
            &grid,
        )?;
        let closed = hellinger_gaussian(&a, &b)?;
        let err = (quad - closed).abs();
        outcomes.push(CheckOutcome {
            name: "hellinger_closed_form_vs_quadrature",
            passed: err <= tol,
            detail: format!("|closed - quadrature| = {err:.3e}, tolerance {tol:.1e}"),
        });
    }

    {
        let tol = 1e-6 * tolerance_scale;
        let err = weighted_identity_defect(&randomized)?;
        outcomes.push(CheckOutcome {
            name: "weighted_likelihood_integral_identity",
            passed: err <= tol,
            detail: format!("|integral - Z^M| = {err:.3e}, tolerance {tol:.1e}"),
        });
    }

    {
        let tol = 1e-4 * tolerance_scale;
        let map = randomized.forward_map();
        let mut rng = SeededRng::new(3, 1);
        let xis: Vec<DVector<f64>> = (0..8).map(|_| map.draw_noise(&mut rng)).collect();
        let (mean, cov) = analytic::mixture_moments(&randomized, &xis)?;
        let envelope = GaussianMeasure::new(mean, cov)?;
        let grid = GridSpec::around(&envelope, 10.0, 2001)?;
        let density = mixture_density_fn(&randomized, &xis)?;
        let mut mass = 0.0;
        grid.for_each_node(|x, w| mass += w * density(x));
        let err = (mass - 1.0).abs();
        outcomes.push(CheckOutcome {
            name: "mixture_density_normalization",
            passed: err <= tol,
            detail: format!("|mass - 1| = {err:.3e}, tolerance {tol:.1e}"),
        });
    }

    Ok(outcomes)
}

/// Hellinger distance between the closed-form marginal posterior and the
/// posterior obtained by tensor quadrature over `(u, xi)`.
fn marginal_quadrature_distance(
    p: &RandomizedLinearGaussianProblem,
) -> Result<f64, CliError> {
    let marginal = marginal_posterior(p)?;
    let prior = p.base().prior().clone();
    let a_h = p.a_h()[(0, 0)];
    let y = p.base().y()[0];
    let gamma = p.base().gamma()[(0, 0)];
    let q = p.q()[(0, 0)];
    let h = p.h();

    let xi_nodes = 1601usize;
    let xi_half = 10.0 * q.sqrt().max(1e-8);
    let xi_step = 2.0 * xi_half / (xi_nodes - 1) as f64;
    let xi_pdf = |xi: f64| {
        (-0.5 * xi * xi / q).exp() / (2.0 * std::f64::consts::PI * q).sqrt()
    };
    let numerator = |u: f64| {
        let mut acc = 0.0;
        for i in 0..xi_nodes {
            let xi = -xi_half + i as f64 * xi_step;
            let w = if i == 0 || i == xi_nodes - 1 { 0.5 } else { 1.0 } * xi_step;
            let r = y - a_h * u - h * xi;
            acc += w * (-0.5 * r * r / gamma).exp() * xi_pdf(xi);
        }
        acc
    };
    let grid = GridSpec::around(&marginal, 8.0, 801)?;
    let mut z = 0.0;
    grid.for_each_node(|x, w| {
        z += w * numerator(x[0]) * prior.density(&DVector::from_row_slice(x)).unwrap();
    });
    let d_h = hellinger_quadrature(
        |x| numerator(x[0]) * prior.density(&DVector::from_row_slice(x)).unwrap() / z,
        |x| marginal.density(&DVector::from_row_slice(x)).unwrap(),
        &grid,
    )?;
    Ok(d_h)
}

/// Hellinger distance between the closed-form averaged posterior and the
/// xi-quadrature average of the normalized sample posteriors.
fn averaged_quadrature_distance(
    p: &RandomizedLinearGaussianProblem,
) -> Result<f64, CliError> {
    let averaged = averaged_posterior(p)?;
    let prior = p.base().prior().clone();
    let a_h_matrix = p.a_h();
    let a_h = a_h_matrix[(0, 0)];
    let y = p.base().y()[0];
    let gamma = p.base().gamma()[(0, 0)];
    let q = p.q()[(0, 0)];
    let h = p.h();

    let modified = LinearGaussianProblem::new(
        a_h_matrix,
        p.base().gamma().clone(),
        p.base().prior().mean().clone(),
        p.base().prior().covariance().clone(),
        p.base().y().clone(),
    )?;

    let xi_nodes = 1601usize;
    let xi_half = 10.0 * q.sqrt().max(1e-8);
    let xi_step = 2.0 * xi_half / (xi_nodes - 1) as f64;
    let mut xi_grid = Vec::with_capacity(xi_nodes);
    for i in 0..xi_nodes {
        let xi = -xi_half + i as f64 * xi_step;
        let w = if i == 0 || i == xi_nodes - 1 { 0.5 } else { 1.0 } * xi_step;
        let pdf = (-0.5 * xi * xi / q).exp() / (2.0 * std::f64::consts::PI * q).sqrt();
        let z = analytic::evidence_for_data(&modified, &DVector::from_vec(vec![y - h * xi]))
            .map_err(CliError::Numerical)?;
        xi_grid.push((xi, w * pdf, z));
    }

    let density = |x: &[f64]| {
        let u = x[0];
        let prior_pdf = prior.density(&DVector::from_row_slice(x)).unwrap();
        let mut acc = 0.0;
        for &(xi, w, z) in &xi_grid {
            let r = y - h * xi - a_h * u;
            acc += w * (-0.5 * r * r / gamma).exp() / z;
        }
        acc * prior_pdf
    };
    let grid = GridSpec::around(&averaged, 8.0, 801)?;
    let d_h = hellinger_quadrature(
        density,
        |x| averaged.density(&DVector::from_row_slice(x)).unwrap(),
        &grid,
    )?;
    Ok(d_h)
}

/// Defect of the prior-integral identity of the weighted likelihood
/// estimator: the integral must equal the mean of the per-draw constants.
fn weighted_identity_defect(p: &RandomizedLinearGaussianProblem) -> Result<f64, CliError> {
    let map = p.forward_map();
    let obs = Observation::new(p.base().y().clone(), p.base().gamma().clone())?;
    let prior = p.base().prior().clone();
    let m = 8usize;
    let mut rng = SeededRng::new(5, 2);
    let xis: Vec<DVector<f64>> = (0..m).map(|_| map.draw_noise(&mut rng)).collect();
    let frozen: Vec<_> = xis.iter().map(|xi| map.freeze_with(xi)).collect();

    let modified = LinearGaussianProblem::new(
        p.a_h(),
        p.base().gamma().clone(),
        prior.mean().clone(),
        prior.covariance().clone(),
        p.base().y().clone(),
    )?;
    let z: Vec<f64> = xis
        .iter()
        .map(|xi| {
            analytic::evidence_for_data(&modified, &(p.base().y() - xi * p.h()))
                .map_err(CliError::Numerical)
        })
        .collect::<Result<_, _>>()?;
    let z_mean = z.iter().sum::<f64>() / m as f64;

    let integral = prior_quadrature(&prior, 801, |u| {
        let log_values: Vec<f64> = frozen
            .iter()
            .map(|f| {
                potential_exact(&obs, &crate::forward::ForwardModel::apply(f, u)).map(|phi| -phi)
            })
            .collect::<Result<_, _>>()?;
        let batch = LikelihoodBatch::from_log_values(log_values, u.clone());
        weighted_mc_likelihood(&batch, &z)
    })?;
    Ok((integral - z_mean).abs())
}
