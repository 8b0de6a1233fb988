//! Data loading, run configuration, reports and the command-line front end.
//!
//! Configuration files are flat `key = value` lines whose keys are the long
//! command-line flags without the leading dashes. Flags given on the command
//! line override the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EhivError, Result};
use crate::exo_test::{test_exogenous_heteroskedasticity, ExoTestOptions, ExoTestResult};
use crate::first_stage::{inner_support_box, FirstStageMode, TrimDiagnostics};
use crate::inference::{attach_omega, bootstrap_se, BootstrapSe};
use crate::kernels::{BandwidthRule, KernelSpec};
use crate::linalg::median;
use crate::pipeline::{EhivModel, EstimatorConfig};
use crate::sample::{Covariates, Sample};
use crate::simulate::{run_monte_carlo, write_table, DgpConfig, McRun};

/// Names of the columns holding each variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    pub covariates: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            treatment: "d".into(),
            instrument: "z".into(),
            covariates: vec!["x".into()],
        }
    }
}

/// Reads a headed CSV file into a validated sample. Row numbers in errors
/// count data rows from 1.
pub fn load_csv(path: &Path, columns: &ColumnMap, intercept: bool) -> Result<Sample> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let position = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| EhivError::MissingColumn {
            requested: name.to_string(),
            available: headers.iter().collect::<Vec<_>>().join(", "),
        })
    };
    let yc = position(&columns.outcome)?;
    let dc = position(&columns.treatment)?;
    let zc = position(&columns.instrument)?;
    let xc = columns
        .covariates
        .iter()
        .map(|c| position(c))
        .collect::<Result<Vec<_>>>()?;

    let (mut y, mut d, mut z) = (Vec::new(), Vec::new(), Vec::new());
    let mut x = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = k + 1;
        let field = |c: usize| -> Result<f64> {
            let name = &headers[c];
            let raw = record.get(c).unwrap_or("");
            if raw.is_empty() {
                return Err(EhivError::Schema {
                    row,
                    column: name.to_string(),
                    message: "missing value".into(),
                });
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| EhivError::Schema {
                    row,
                    column: name.to_string(),
                    message: format!("'{raw}' is not a finite number"),
                })
        };
        let binary = |c: usize| -> Result<f64> {
            let v = field(c)?;
            if v == 0.0 || v == 1.0 {
                Ok(v)
            } else {
                Err(EhivError::Schema {
                    row,
                    column: headers[c].to_string(),
                    message: format!("expected 0 or 1, found {}", record.get(c).unwrap_or("")),
                })
            }
        };
        y.push(field(yc)?);
        d.push(binary(dc)?);
        z.push(binary(zc)?);
        for &c in &xc {
            x.push(field(c)?);
        }
    }
    let n = y.len();
    if n < 2 {
        return Err(EhivError::InsufficientData(format!("{} has {n} data rows", path.display())));
    }
    Sample::new(y, d, z, Covariates::new(n, xc.len(), x)?, intercept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    #[default]
    Fit,
    Simulate,
    TestExo,
}

/// Which standard errors a fit reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SeMode {
    None,
    #[default]
    PlugIn,
    Bootstrap,
    Both,
}

impl SeMode {
    fn plug_in(self) -> bool {
        matches!(self, SeMode::PlugIn | SeMode::Both)
    }

    fn bootstrap(self) -> bool {
        matches!(self, SeMode::Bootstrap | SeMode::Both)
    }
}

impl FromStr for SeMode {
    type Err = EhivError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SeMode::None),
            "plug-in" => Ok(SeMode::PlugIn),
            "bootstrap" => Ok(SeMode::Bootstrap),
            "both" => Ok(SeMode::Both),
            _ => Err(EhivError::Config(format!(
                "unknown se mode '{s}' (expected none, plug-in, bootstrap or both)"
            ))),
        }
    }
}

impl std::fmt::Display for SeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SeMode::None => "none",
            SeMode::PlugIn => "plug-in",
            SeMode::Bootstrap => "bootstrap",
            SeMode::Both => "both",
        })
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub columns: ColumnMap,
    pub intercept: bool,
    pub estimator: EstimatorConfig,
    pub output: PathBuf,
    pub seed: u64,
    pub se: SeMode,
    pub bootstrap_reps: usize,
    pub exo: bool,
    pub perms: usize,
    pub cells: usize,
    pub grids: bool,
    pub dgp: DgpConfig,
    pub n: usize,
    pub reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Fit,
            input: None,
            columns: ColumnMap::default(),
            intercept: true,
            estimator: EstimatorConfig::default(),
            output: PathBuf::from("ehiv-out"),
            seed: 7480,
            se: SeMode::PlugIn,
            bootstrap_reps: 200,
            exo: false,
            perms: 199,
            cells: 10,
            grids: true,
            dgp: DgpConfig::default(),
            n: 4000,
            reps: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| EhivError::Config(format!("bad value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(EhivError::Config(format!("bad boolean '{value}' for '{key}'"))),
    }
}

impl RunConfig {
    pub fn for_command(command: Command) -> Self {
        Self {
            command,
            ..Self::default()
        }
    }

    /// Sets one key; keys match the long command-line flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.estimator.trimming;
        match key {
            "input" => self.input = Some(PathBuf::from(value)),
            "outcome" => self.columns.outcome = value.to_string(),
            "treatment" => self.columns.treatment = value.to_string(),
            "instrument" => self.columns.instrument = value.to_string(),
            "covariates" => {
                self.columns.covariates = value
                    .split(',')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect()
            }
            "intercept" => self.intercept = parse_bool(key, value)?,
            "kernel" => self.estimator.kernel = value.parse::<KernelSpec>()?,
            "bandwidth" => self.estimator.bandwidth = value.parse::<BandwidthRule>()?,
            "first-stage" => {
                self.estimator.first_stage = match value {
                    "pooled" => FirstStageMode::Pooled,
                    "split" => FirstStageMode::SplitByArm,
                    _ => return Err(EhivError::Config(format!("unknown first stage '{value}'"))),
                }
            }
            "tau" => t.tau = parse(key, value)?,
            "kappa" => {
                t.kappa0 = parse(key, value)?;
                t.kappa1 = t.kappa0;
            }
            "kappa0" => t.kappa0 = parse(key, value)?,
            "kappa1" => t.kappa1 = parse(key, value)?,
            "boundary-radius" => t.boundary_radius = parse(key, value)?,
            "output" => self.output = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "se" => self.se = value.parse()?,
            "bootstrap-reps" => self.bootstrap_reps = parse(key, value)?,
            "exo" => self.exo = parse_bool(key, value)?,
            "perms" => self.perms = parse(key, value)?,
            "cells" => self.cells = parse(key, value)?,
            "grids" => self.grids = parse_bool(key, value)?,
            "beta0" => self.dgp.beta0 = parse(key, value)?,
            "beta1" => self.dgp.beta1 = parse(key, value)?,
            "beta2" => self.dgp.beta2 = parse(key, value)?,
            "lambda0" => self.dgp.lambda0 = parse(key, value)?,
            "r0" => self.dgp.r0 = parse(key, value)?,
            "rho0" => self.dgp.rho0 = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            _ => return Err(EhivError::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| EhivError::Config(format!("line {}: expected key = value", k + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// The configuration as `key = value` lines that `apply_kv` reads back.
    pub fn to_kv(&self) -> String {
        let t = &self.estimator.trimming;
        let mut lines = Vec::new();
        if let Some(input) = &self.input {
            lines.push(format!("input = {}", input.display()));
        }
        lines.extend([
            format!("outcome = {}", self.columns.outcome),
            format!("treatment = {}", self.columns.treatment),
            format!("instrument = {}", self.columns.instrument),
            format!("covariates = {}", self.columns.covariates.join(",")),
            format!("intercept = {}", self.intercept),
            format!("kernel = {}", self.estimator.kernel),
            format!("bandwidth = {}", self.estimator.bandwidth),
            format!(
                "first-stage = {}",
                match self.estimator.first_stage {
                    FirstStageMode::Pooled => "pooled",
                    FirstStageMode::SplitByArm => "split",
                }
            ),
            format!("tau = {}", t.tau),
            format!("kappa0 = {}", t.kappa0),
            format!("kappa1 = {}", t.kappa1),
            format!("boundary-radius = {}", t.boundary_radius),
            format!("output = {}", self.output.display()),
            format!("seed = {}", self.seed),
            format!("se = {}", self.se),
            format!("bootstrap-reps = {}", self.bootstrap_reps),
            format!("exo = {}", self.exo),
            format!("perms = {}", self.perms),
            format!("cells = {}", self.cells),
            format!("grids = {}", self.grids),
            format!("beta0 = {}", self.dgp.beta0),
            format!("beta1 = {}", self.dgp.beta1),
            format!("beta2 = {}", self.dgp.beta2),
            format!("lambda0 = {}", self.dgp.lambda0),
            format!("r0 = {}", self.dgp.r0),
            format!("rho0 = {}", self.dgp.rho0),
            format!("n = {}", self.n),
            format!("reps = {}", self.reps),
        ]);
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        match self.command {
            Command::Fit | Command::TestExo => {
                if self.input.is_none() {
                    return Err(EhivError::Config("an input file is required".into()));
                }
            }
            Command::Simulate => {
                if self.input.is_some() {
                    return Err(EhivError::Config("simulate does not read an input file".into()));
                }
                self.dgp.validate()?;
                if self.reps < 2 || self.n < 2 {
                    return Err(EhivError::Config("simulate needs n >= 2 and reps >= 2".into()));
                }
            }
        }
        if self.command == Command::Fit && self.se.bootstrap() && self.bootstrap_reps < 2 {
            return Err(EhivError::Config("bootstrap standard errors need bootstrap-reps >= 2".into()));
        }
        if (self.exo || self.command == Command::TestExo) && self.perms < 99 {
            return Err(EhivError::Config("the exogeneity test needs perms >= 99".into()));
        }
        if self.cells == 0 {
            return Err(EhivError::Config("cells must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn exo_options(&self) -> ExoTestOptions {
        ExoTestOptions {
            cells: self.cells,
            boundary_radius: self.estimator.trimming.boundary_radius,
            ..ExoTestOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn of(cfg: &RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n: usize,
    pub coefficients: Vec<String>,
    pub beta: Vec<f64>,
    pub se_plug_in: Option<Vec<f64>>,
    /// Plug-in standard errors without the first-stage correction.
    pub se_naive: Option<Vec<f64>>,
    pub se_bootstrap: Option<BootstrapSe>,
    pub omega: Option<Vec<Vec<f64>>>,
    pub iv_beta: Vec<f64>,
    pub att: Option<f64>,
    pub mve: Option<f64>,
    pub bandwidth: Vec<f64>,
    pub trim: TrimDiagnostics,
    pub exo_test: Option<ExoTestResult>,
    pub config: RunConfig,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub run: McRun,
    pub config: RunConfig,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExoReport {
    pub result: ExoTestResult,
    pub config: RunConfig,
    pub provenance: Provenance,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn coefficient_names(cfg: &RunConfig) -> Vec<String> {
    let mut names = Vec::new();
    if cfg.intercept {
        names.push("const".to_string());
    }
    names.extend(cfg.columns.covariates.iter().cloned());
    names.push(cfg.columns.treatment.clone());
    names
}

fn load_input(cfg: &RunConfig) -> Result<Sample> {
    let input = cfg.input.as_ref().expect("validated");
    load_csv(input, &cfg.columns, cfg.intercept)
}

fn exo_bandwidth(sample: &Sample, cfg: &RunConfig) -> Result<Vec<f64>> {
    Ok(cfg.estimator.resolve_bandwidths(sample)?.0)
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Evaluation points along the first covariate inside the inner support,
/// other covariates at their medians.
fn grid_points(model: &EhivModel, count: usize) -> Vec<Vec<f64>> {
    let x = model.sample().x();
    if x.dim() == 0 {
        return Vec::new();
    }
    let bounds = inner_support_box(x, model.bandwidth(), model.config().trimming.boundary_radius);
    let medians: Vec<f64> = (0..x.dim())
        .map(|j| median(&x.column(j).collect::<Vec<_>>()).expect("non-empty"))
        .collect();
    let (lo, hi) = bounds[0];
    if !(hi > lo) {
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let mut p = medians.clone();
            p[0] = lo + (hi - lo) * k as f64 / (count - 1) as f64;
            p
        })
        .collect()
}

fn write_grids(model: &EhivModel, dir: &Path) -> Result<()> {
    let points = grid_points(model, 41);
    let mut w = csv::Writer::from_path(dir.join("sigma_grid.csv"))?;
    w.write_record(["x", "sigma0", "sigma1"])?;
    for p in &points {
        w.write_record([
            p[0].to_string(),
            format_opt(model.sigma(0, p).ok()),
            format_opt(model.sigma(1, p).ok()),
        ])?;
    }
    w.flush()?;

    let ites = model.ites()?;
    let mut w = csv::Writer::from_path(dir.join("ite.csv"))?;
    w.write_record(["row", "ite"])?;
    for (i, v) in ites.index.iter().zip(&ites.values) {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;

    let Ok(bw) = model.default_ite_bandwidths(&ites) else {
        return Ok(());
    };
    let x = model.sample().x();
    let first: Vec<f64> = ites.index.iter().map(|&i| x.row(i)[0]).collect();
    let mut sorted = first.clone();
    sorted.sort_by(f64::total_cmp);
    let center = median(&ites.values).expect("non-empty");
    let spread = crate::sample::sample_sd(ites.values.iter().copied()).max(1e-8);
    let mut w = csv::Writer::from_path(dir.join("ite_density.csv"))?;
    w.write_record(["x", "e", "density"])?;
    for q in [0.25, 0.5, 0.75] {
        let mut p: Vec<f64> = (0..x.dim())
            .map(|j| median(&x.column(j).collect::<Vec<_>>()).expect("non-empty"))
            .collect();
        p[0] = sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        for k in 0..81 {
            let e = center - 4.0 * spread + 8.0 * spread * k as f64 / 80.0;
            let f = model.ite_density(e, &p, &ites, &bw).ok();
            w.write_record([p[0].to_string(), e.to_string(), format_opt(f)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fits the model on the configured input, writes `report.json` (and the
/// CSV grids when enabled) to the output directory, and returns the report.
pub fn run_fit(cfg: &RunConfig) -> Result<FitReport> {
    cfg.validate()?;
    let sample = load_input(cfg)?;
    let iv_beta = crate::estimator::fit_iv(&sample)?.beta;
    let mut model = EhivModel::fit(sample, &cfg.estimator)?;
    let omega = cfg.se.plug_in().then(|| attach_omega(&mut model)).transpose()?;
    let boot = cfg
        .se
        .bootstrap()
        .then(|| bootstrap_se(model.sample(), &cfg.estimator, cfg.bootstrap_reps, cfg.seed))
        .transpose()?;
    let exo = cfg
        .exo
        .then(|| {
            test_exogenous_heteroskedasticity(
                model.sample(),
                &cfg.estimator.kernel,
                model.bandwidth(),
                cfg.perms,
                cfg.seed,
                &cfg.exo_options(),
            )
        })
        .transpose()?;
    let report = FitReport {
        n: model.sample().n(),
        coefficients: coefficient_names(cfg),
        beta: model.ehiv().beta.clone(),
        se_plug_in: omega.as_ref().map(|o| o.se.clone()),
        se_naive: omega.as_ref().map(|o| o.naive_se.clone()),
        se_bootstrap: boot,
        omega: omega.as_ref().map(|o| {
            (0..o.omega.nrows())
                .map(|r| o.omega.row(r).iter().copied().collect())
                .collect()
        }),
        iv_beta,
        att: model.att().ok(),
        mve: model.variance_effects().ok().map(|v| v.mve),
        bandwidth: model.bandwidth().to_vec(),
        trim: model.diagnostics(),
        exo_test: exo,
        config: cfg.clone(),
        provenance: Provenance::of(cfg),
    };
    fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("report.json"), &report)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_kv())?;
    if cfg.grids {
        write_grids(&model, &cfg.output)?;
    }
    Ok(report)
}

/// Runs the Monte Carlo experiment and writes `table.csv` and `report.json`.
pub fn run_simulate(cfg: &RunConfig) -> Result<SimulateReport> {
    cfg.validate()?;
    let run = run_monte_carlo(&cfg.dgp, cfg.n, cfg.reps, &cfg.estimator, cfg.seed)?;
    fs::create_dir_all(&cfg.output)?;
    write_table(&[&run.iv, &run.ehiv], fs::File::create(cfg.output.join("table.csv"))?)?;
    let report = SimulateReport {
        run,
        config: cfg.clone(),
        provenance: Provenance::of(cfg),
    };
    write_json(&cfg.output.join("report.json"), &report)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_kv())?;
    Ok(report)
}

/// Runs the exogeneity test on the configured input and writes `exo.json`.
pub fn run_test_exo(cfg: &RunConfig) -> Result<ExoReport> {
    cfg.validate()?;
    let sample = load_input(cfg)?;
    let h = exo_bandwidth(&sample, cfg)?;
    let result = test_exogenous_heteroskedasticity(
        &sample,
        &cfg.estimator.kernel,
        &h,
        cfg.perms,
        cfg.seed,
        &cfg.exo_options(),
    )?;
    let report = ExoReport {
        result,
        config: cfg.clone(),
        provenance: Provenance::of(cfg),
    };
    fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("exo.json"), &report)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_kv())?;
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "ehiv", version, about = "IV estimation under endogenous heteroskedasticity")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Subcommand)]
enum CliCommand {
    /// Fit the estimator to a CSV file.
    Fit(Flags),
    /// Monte Carlo experiment on the simulated design.
    Simulate(Flags),
    /// Test for exogenous heteroskedasticity.
    TestExo(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// Flat key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long)]
    instrument: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long)]
    covariates: Option<String>,
    #[arg(long)]
    no_intercept: bool,
    /// gaussian4, epanech4 or gaussian6.
    #[arg(long)]
    kernel: Option<String>,
    /// silverman, silverman:<scale>:<exponent>, per-arm or fixed:<h>[,<h>...].
    #[arg(long)]
    bandwidth: Option<String>,
    /// pooled or split.
    #[arg(long)]
    first_stage: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// Sets both variance floors.
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    kappa0: Option<String>,
    #[arg(long)]
    kappa1: Option<String>,
    #[arg(long)]
    boundary_radius: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// none, plug-in, bootstrap or both.
    #[arg(long)]
    se: Option<String>,
    #[arg(long)]
    bootstrap_reps: Option<String>,
    /// Also run the exogeneity test (fit only).
    #[arg(long)]
    exo: bool,
    #[arg(long)]
    perms: Option<String>,
    #[arg(long)]
    cells: Option<String>,
    #[arg(long)]
    no_grids: bool,
    #[arg(long)]
    beta0: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    lambda0: Option<String>,
    #[arg(long)]
    r0: Option<String>,
    #[arg(long)]
    rho0: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    reps: Option<String>,
}

impl Flags {
    fn overrides(&self) -> BTreeMap<&'static str, String> {
        let pairs: [(&'static str, &Option<String>); 29] = [
            ("input", &self.input),
            ("outcome", &self.outcome),
            ("treatment", &self.treatment),
            ("instrument", &self.instrument),
            ("covariates", &self.covariates),
            ("kernel", &self.kernel),
            ("bandwidth", &self.bandwidth),
            ("first-stage", &self.first_stage),
            ("tau", &self.tau),
            ("kappa", &self.kappa),
            ("kappa0", &self.kappa0),
            ("kappa1", &self.kappa1),
            ("boundary-radius", &self.boundary_radius),
            ("output", &self.output),
            ("seed", &self.seed),
            ("se", &self.se),
            ("bootstrap-reps", &self.bootstrap_reps),
            ("perms", &self.perms),
            ("cells", &self.cells),
            ("beta0", &self.beta0),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("lambda0", &self.lambda0),
            ("r0", &self.r0),
            ("rho0", &self.rho0),
            ("n", &self.n),
            ("reps", &self.reps),
            ("intercept", &self.no_intercept.then(|| "false".to_string())),
            ("grids", &self.no_grids.then(|| "false".to_string())),
        ];
        let mut out: BTreeMap<&'static str, String> = pairs
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect();
        if self.exo {
            out.insert("exo", "true".into());
        }
        out
    }

    fn resolve(&self, command: Command) -> Result<RunConfig> {
        let mut cfg = RunConfig::for_command(command);
        if let Some(path) = &self.config {
            cfg.apply_kv(&fs::read_to_string(path)?)?;
            cfg.command = command;
        }
        let overrides = self.overrides();
        if overrides.contains_key("kappa") && (overrides.contains_key("kappa0") || overrides.contains_key("kappa1")) {
            return Err(EhivError::Config("--kappa conflicts with --kappa0/--kappa1".into()));
        }
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (flags, command) = match &cli.command {
        CliCommand::Fit(f) => (f, Command::Fit),
        CliCommand::Simulate(f) => (f, Command::Simulate),
        CliCommand::TestExo(f) => (f, Command::TestExo),
    };
    let cfg = flags.resolve(command)?;
    let out = match command {
        Command::Fit => serde_json::to_string(&run_fit(&cfg)?.beta)?,
        Command::Simulate => serde_json::to_string(&run_simulate(&cfg)?.run.ehiv.coefficients)?,
        Command::TestExo => {
            let r = run_test_exo(&cfg)?.result;
            format!("{{\"statistic\":{},\"p_value\":{}}}", r.statistic, r.p_value)
        }
    };
    println!("{out}");
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status: 0 success, 2 configuration, 3 data, 4 numerical failure.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let body = serde_json::json!({ "error": e.to_string(), "exit_code": code });
            eprintln!("{body}");
            code
        }
    }
}
