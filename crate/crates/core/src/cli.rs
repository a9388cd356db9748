//! Command-line front end: `fit`, `predict` and `simulate`.
//!
//! Settings come from built-in defaults, then an optional JSON file given by
//! `--config`, then flags. Exit codes are 0 on success, 1 on a numerical
//! failure and 2 on a usage or input error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{load_dataset, LongitudinalDataset, MixedEffectTarget};
use crate::error::FmmError;
use crate::predict::{PredictionResult, Predictor};
use crate::simulate::{
    check_failures, run_study_lenient, sha256_hex, write_raw_csv, write_summary_csv, Case, RunOptions, SimulationConfig,
};
use crate::smoothing::{EtaRule, LambdaRule, SmoothingMode, SmoothingState};
use crate::solver::{fit, BasisConfig, FitConfig, FitDiagnostics, FittedModel, VarianceState};

pub const ARCHIVE_FORMAT: &str = "fmm-model/1";
pub const PREDICTION_COLUMNS: [&str; 9] = [
    "target", "subject", "t0", "A_naive", "A_corrected", "MSE_first", "MSE_plugin", "lower", "upper",
];

#[derive(Debug, Parser)]
#[command(name = "fmm", version, about = "Functional linear mixed models: fit, predict, simulate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a longitudinal CSV and write `model.json` and `diagnostics.txt`.
    Fit(FitArgs),
    /// Predict mixed effects from a fitted model and write `predictions.csv`.
    Predict(PredictArgs),
    /// Run a Monte Carlo study and write `raw.csv`, `summary.csv` and `timing.txt`.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SmoothingKind {
    /// REML for λ, closed-form update for η.
    Select,
    /// Use the values given by `--lambda` and `--eta`.
    Fixed,
    /// λ_k = 1/‖Δ_βk‖₂ with closed-form η.
    Unit,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// JSON configuration file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Spline order for both fixed and random bases.
    #[arg(long)]
    pub order: Option<usize>,
    /// Interior knot count for both bases.
    #[arg(long)]
    pub knots: Option<usize>,
    #[arg(long, value_enum)]
    pub smoothing: Option<SmoothingKind>,
    /// Fixed-effect smoothing weights, comma separated; one value is repeated for every covariate.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lambda: Option<Vec<f64>>,
    /// Random-effect smoothing weights, comma separated; one value is repeated for every covariate.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub eta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Dataset CSV with columns subject, t, y, x1.., z1...
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub shared: SharedArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Dataset CSV the model was fitted to.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Model archive written by `fit`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Predict every subject-mean target at this time.
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    /// JSON list of targets `{"l0": [..], "d0": {"<subject index>": [..]}, "t0": ..}`.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// JSON configuration file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// I, II or III.
    #[arg(long)]
    pub case: Option<Case>,
    /// Subjects per replicate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Observations per subject.
    #[arg(long)]
    pub m: Option<usize>,
    /// Number of replicates.
    #[arg(long = "K")]
    pub replicates: Option<usize>,
    /// Master seed; replicate k draws from stream k of this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Target time; defaults to the first time drawn in replicate 0.
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    #[command(flatten)]
    pub shared: SharedArgs,
}

/// Contents of a `--config` file. Every entry is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub basis: Option<BasisConfig>,
    pub smoothing: Option<SmoothingMode>,
    pub t0: Option<f64>,
    pub targets: Option<Vec<MixedEffectTarget>>,
    pub simulation: Option<SimulationBlock>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationBlock {
    pub case: Option<Case>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    #[serde(alias = "K")]
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub rho: Option<f64>,
    pub sigma_eps: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(FmmError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(e) => write!(f, "{e}"),
        }
    }
}

impl From<FmmError> for CliError {
    fn from(e: FmmError) -> Self {
        match e {
            FmmError::InvalidConfig(_)
            | FmmError::Domain(_)
            | FmmError::Schema(_)
            | FmmError::Parse { .. }
            | FmmError::Shape(_)
            | FmmError::SparsityViolation { .. }
            | FmmError::Incompatible(_)
            | FmmError::Io(_)
            | FmmError::Csv(_)
            | FmmError::Json(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Matrix stored row-major as nested arrays, with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl MatrixRecord {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, FmmError> {
        if self.data.len() != self.rows || self.data.iter().any(|r| r.len() != self.cols) {
            return Err(FmmError::Shape(format!(
                "archived matrix does not match its declared shape {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| self.data[i][j]))
    }
}

/// On-disk form of a [`FittedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format: String,
    pub config_sha256: String,
    pub config: FitConfig,
    pub p: usize,
    pub q: usize,
    pub subjects: Vec<String>,
    pub sigma_e2: f64,
    pub omega: MatrixRecord,
    /// `pL × 1`.
    pub theta: MatrixRecord,
    /// One row per subject, `qL` columns.
    pub alpha: MatrixRecord,
    pub smoothing: SmoothingState,
    pub diagnostics: FitDiagnostics,
}

impl ModelArchive {
    pub fn new(model: &FittedModel, data: &LongitudinalDataset) -> Self {
        let n = model.alpha.len();
        let qd = model.alpha.first().map_or(0, |a| a.len());
        let alpha = DMatrix::from_fn(n, qd, |i, j| model.alpha[i][j]);
        Self {
            format: ARCHIVE_FORMAT.into(),
            config_sha256: config_hash(&model.config),
            config: model.config.clone(),
            p: model.p,
            q: model.q,
            subjects: data.subjects().iter().map(|s| s.id.clone()).collect(),
            sigma_e2: model.variance.sigma_e2,
            omega: MatrixRecord::from_matrix(&model.variance.omega),
            theta: MatrixRecord::from_matrix(&DMatrix::from_column_slice(model.theta.len(), 1, model.theta.as_slice())),
            alpha: MatrixRecord::from_matrix(&alpha),
            smoothing: model.smoothing.clone(),
            diagnostics: model.diagnostics.clone(),
        }
    }

    pub fn model(&self) -> Result<FittedModel, FmmError> {
        if self.format != ARCHIVE_FORMAT {
            return Err(FmmError::Incompatible(format!(
                "archive format {:?}, expected {ARCHIVE_FORMAT:?}",
                self.format
            )));
        }
        let theta = self.theta.to_matrix()?;
        if theta.ncols() != 1 {
            return Err(FmmError::Shape("archived theta must be a column".into()));
        }
        let alpha = self.alpha.to_matrix()?;
        Ok(FittedModel {
            config: self.config.clone(),
            theta: theta.column(0).into_owned(),
            alpha: alpha.row_iter().map(|r| r.transpose()).collect::<Vec<DVector<f64>>>(),
            variance: VarianceState::new(self.sigma_e2, self.omega.to_matrix()?)?,
            smoothing: self.smoothing.clone(),
            p: self.p,
            q: self.q,
            diagnostics: self.diagnostics.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, FmmError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), FmmError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Fails unless `data` has the archived subjects and covariate widths.
    pub fn check_data(&self, data: &LongitudinalDataset) -> Result<(), FmmError> {
        let ids: Vec<&str> = data.subjects().iter().map(|s| s.id.as_str()).collect();
        if data.p() != self.p || data.q() != self.q {
            return Err(FmmError::Incompatible(format!(
                "model fitted with p = {}, q = {}; data has p = {}, q = {}",
                self.p,
                self.q,
                data.p(),
                data.q()
            )));
        }
        if ids != self.subjects.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(FmmError::Incompatible(
                "data subjects differ from those the model was fitted to".into(),
            ));
        }
        Ok(())
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(serde_json::to_string(config).expect("configuration serializes").as_bytes())
}

fn header(hash: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("# config_sha256={hash} seed={s}"),
        None => format!("# config_sha256={hash} seed=none"),
    }
}

fn load_config(path: Option<&PathBuf>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
}

fn existing(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let path = path.ok_or_else(|| usage(format!("missing {what}")))?;
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(path)
}

fn out_dir(flag: Option<PathBuf>, file: &RunConfig) -> CliResult<PathBuf> {
    let dir = flag.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("fmm_output"));
    fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn basis_from(shared: &SharedArgs, file: &RunConfig) -> BasisConfig {
    let mut basis = file.basis.clone().unwrap_or_default();
    if let Some(r) = shared.order {
        basis.fixed_order = r;
        basis.random_order = r;
    }
    if let Some(k) = shared.knots {
        basis.fixed_interior_knots = k;
        basis.random_interior_knots = k;
    }
    basis
}

/// Combines `--smoothing`, `--lambda`, `--eta` with a base mode.
pub fn smoothing_from(shared: &SharedArgs, base: SmoothingMode) -> CliResult<SmoothingMode> {
    let (lambda, eta) = (shared.lambda.clone(), shared.eta.clone());
    match shared.smoothing {
        Some(SmoothingKind::Select) | Some(SmoothingKind::Unit) if lambda.is_some() || eta.is_some() => {
            Err(usage("--lambda/--eta need --smoothing fixed"))
        }
        Some(SmoothingKind::Select) => Ok(SmoothingMode::default()),
        Some(SmoothingKind::Unit) => Ok(crate::simulate::simulation_smoothing()),
        Some(SmoothingKind::Fixed) => match (lambda, eta) {
            (Some(l), Some(e)) => Ok(SmoothingMode::fixed(l, e)),
            _ => Err(usage("--smoothing fixed needs both --lambda and --eta")),
        },
        None => {
            let mut mode = base;
            if let Some(l) = lambda {
                mode.lambda = LambdaRule::Fixed(l);
            }
            if let Some(e) = eta {
                mode.eta = EtaRule::Fixed(e);
            }
            Ok(mode)
        }
    }
}

/// Repeats single fixed values across `p` (for `λ`) or `q` (for `η`) covariates.
fn broadcast(mut mode: SmoothingMode, p: usize, q: usize) -> CliResult<SmoothingMode> {
    let fix = |v: &mut Vec<f64>, k: usize, name: &str| -> CliResult<()> {
        if v.len() == 1 && k > 1 {
            *v = vec![v[0]; k];
        }
        if v.len() != k {
            return Err(usage(format!("{name} needs 1 or {k} values, got {}", v.len())));
        }
        if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(usage(format!("{name} values must be positive")));
        }
        Ok(())
    };
    if let LambdaRule::Fixed(v) = &mut mode.lambda {
        fix(v, p, "--lambda")?;
    }
    if let EtaRule::Fixed(v) = &mut mode.eta {
        fix(v, q, "--eta")?;
    }
    Ok(mode)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::from(FmmError::Io(e)))
}

/// Human-readable summary of a fit.
pub fn diagnostics_report(model: &FittedModel, hash: &str) -> String {
    let d = &model.diagnostics;
    let mut s = header(hash, None);
    s.push('\n');
    let _ = writeln!(s, "converged: {}", d.converged);
    let _ = writeln!(s, "iterations: {}", d.iterations);
    let _ = writeln!(s, "sigma_e2: {:?}", model.variance.sigma_e2);
    let _ = writeln!(s, "omega_trace: {:?}", model.variance.omega.trace());
    let _ = writeln!(s, "lambda: {:?}", model.smoothing.lambda);
    let _ = writeln!(s, "lambda_at_boundary: {:?}", d.lambda_at_boundary);
    let _ = writeln!(s, "eta: {:?}", model.smoothing.eta);
    let _ = writeln!(s, "iteration,sigma_e2,delta_theta,delta_sigma,delta_omega");
    for r in &d.history {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?}",
            r.iteration, r.sigma_e2, r.delta_theta, r.delta_sigma, r.delta_omega
        );
    }
    s
}

/// Fits the model described by the arguments; returns the model and the data.
pub fn fit_from_args(args: &FitArgs) -> CliResult<(FittedModel, LongitudinalDataset)> {
    let file = load_config(args.shared.config.as_ref())?;
    let input = existing(args.input.clone().or(file.input.clone()), "input file")?;
    let data = load_dataset(&input, None)?;
    let smoothing = smoothing_from(&args.shared, file.smoothing.clone().unwrap_or_default())?;
    let config = FitConfig {
        basis: basis_from(&args.shared, &file),
        smoothing: broadcast(smoothing, data.p(), data.q())?,
        ..FitConfig::default()
    };
    config.basis.bases()?;
    let model = fit(&data, &config)?;
    Ok((model, data))
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<String> {
    let file = load_config(args.shared.config.as_ref())?;
    let (model, data) = fit_from_args(args)?;
    let dir = out_dir(args.shared.out.clone(), &file)?;
    let archive = ModelArchive::new(&model, &data);
    archive.save(&dir.join("model.json"))?;
    write_text(&dir.join("diagnostics.txt"), &diagnostics_report(&model, &archive.config_sha256))?;
    Ok(format!(
        "fitted {} subjects in {} iterations; sigma_e2 = {:?}; wrote {}",
        data.n(),
        model.diagnostics.iterations,
        model.variance.sigma_e2,
        dir.display()
    ))
}

/// Targets requested by the arguments, with the subject label used in the CSV.
fn targets_from(args: &PredictArgs, file: &RunConfig, data: &LongitudinalDataset) -> CliResult<Vec<(String, MixedEffectTarget)>> {
    if let Some(path) = &args.targets {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let list: Vec<MixedEffectTarget> =
            serde_json::from_str(&text).map_err(|e| usage(format!("bad targets {}: {e}", path.display())))?;
        return Ok(list.into_iter().map(|t| (label(&t, data), t)).collect());
    }
    if let Some(t0) = args.t0 {
        return Ok(subject_means(data, t0));
    }
    if let Some(list) = &file.targets {
        return Ok(list.iter().map(|t| (label(t, data), t.clone())).collect());
    }
    if let Some(t0) = file.t0 {
        return Ok(subject_means(data, t0));
    }
    Err(usage("predict needs --t0 or --targets"))
}

fn subject_means(data: &LongitudinalDataset, t0: f64) -> Vec<(String, MixedEffectTarget)> {
    (0..data.n())
        .map(|i| (data.subjects()[i].id.clone(), MixedEffectTarget::subject_mean(data, i, t0)))
        .collect()
}

fn label(target: &MixedEffectTarget, data: &LongitudinalDataset) -> String {
    let ids: Vec<&str> = target
        .d0
        .keys()
        .map(|&i| data.subjects().get(i).map_or("?", |s| s.id.as_str()))
        .collect();
    ids.join(";")
}

/// Predictions for the request described by the arguments.
pub fn predict_from_args(args: &PredictArgs) -> CliResult<(String, Vec<(String, PredictionResult)>)> {
    let file = load_config(args.config.as_ref())?;
    let input = existing(args.input.clone().or(file.input.clone()), "input file")?;
    let model_path = existing(args.model.clone().or(file.model.clone()), "model archive")?;
    let archive = ModelArchive::load(&model_path)?;
    let data = load_dataset(&input, None)?;
    archive.check_data(&data)?;
    let model = archive.model()?;
    let design = model.design(&data)?;
    let predictor = Predictor::new(&model, &design)?;
    let targets = targets_from(args, &file, &data)?;
    let hash = config_hash(&(&archive.config_sha256, targets.iter().map(|(_, t)| t).collect::<Vec<_>>()));
    let mut out = Vec::with_capacity(targets.len());
    for (label, target) in targets {
        out.push((label, predictor.predict(&target)?));
    }
    Ok((hash, out))
}

pub fn prediction_csv(hash: &str, rows: &[(String, PredictionResult)]) -> CliResult<String> {
    let mut buf = header(hash, None);
    buf.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    let res: Result<(), csv::Error> = (|| {
        w.write_record(PREDICTION_COLUMNS)?;
        for (k, (label, r)) in rows.iter().enumerate() {
            w.write_record([
                k.to_string(),
                label.clone(),
                format!("{:?}", r.target.t0),
                format!("{:?}", r.a_naive),
                format!("{:?}", r.a_corrected),
                format!("{:?}", r.mse_first_order),
                format!("{:?}", r.mse_plugin),
                format!("{:?}", r.interval.0),
                format!("{:?}", r.interval.1),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(FmmError::from)?;
    let bytes = w.into_inner().map_err(|e| FmmError::Io(e.into_error()))?;
    buf.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(buf)
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<String> {
    let file = load_config(args.config.as_ref())?;
    let (hash, rows) = predict_from_args(args)?;
    let dir = out_dir(args.out.clone(), &file)?;
    write_text(&dir.join("predictions.csv"), &prediction_csv(&hash, &rows)?)?;
    Ok(format!("wrote {} predictions to {}", rows.len(), dir.join("predictions.csv").display()))
}

/// Simulation configuration and thread count described by the arguments.
pub fn simulation_from_args(args: &SimulateArgs) -> CliResult<(SimulationConfig, usize)> {
    let file = load_config(args.shared.config.as_ref())?;
    let block = file.simulation.clone().unwrap_or_default();
    let d = SimulationConfig::default();
    let smoothing = smoothing_from(&args.shared, file.smoothing.clone().unwrap_or_else(|| d.smoothing.clone()))?;
    let config = SimulationConfig {
        case: args.case.or(block.case).unwrap_or(d.case),
        n: args.n.or(block.n).unwrap_or(d.n),
        m: args.m.or(block.m).unwrap_or(d.m),
        replicates: args.replicates.or(block.replicates).unwrap_or(d.replicates),
        master_seed: args.seed.or(block.seed).unwrap_or(d.master_seed),
        basis: basis_from(&args.shared, &file),
        smoothing: broadcast(smoothing, 1, 1)?,
        t0: args.t0.or(file.t0),
        rho: block.rho.unwrap_or(d.rho),
        sigma_eps: block.sigma_eps.unwrap_or(d.sigma_eps),
    };
    config.validate()?;
    let jobs = args.jobs.or(file.jobs).unwrap_or(0);
    Ok((config, jobs))
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<String> {
    let file = load_config(args.shared.config.as_ref())?;
    let (config, jobs) = simulation_from_args(args)?;
    let dir = out_dir(args.shared.out.clone(), &file)?;
    let start = Instant::now();
    let report = run_study_lenient(
        &config,
        &RunOptions {
            jobs,
            infinite_intervals: false,
        },
    )?;
    let secs = start.elapsed().as_secs_f64();
    let mut raw = Vec::new();
    write_raw_csv(&config, &report, &mut raw)?;
    fs::write(dir.join("raw.csv"), raw).map_err(FmmError::from)?;
    let mut summary = Vec::new();
    write_summary_csv(&config, &report, &mut summary)?;
    fs::write(dir.join("summary.csv"), summary).map_err(FmmError::from)?;
    write_text(
        &dir.join("timing.txt"),
        &format!(
            "{}\nwall_clock_secs,jobs\n{secs:?},{jobs}\n",
            config.header_comment()
        ),
    )?;
    let failures = dir.join("failures.log");
    if report.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(&failures).map_err(FmmError::from)?;
        }
    } else {
        let mut log = config.header_comment();
        log.push('\n');
        for f in &report.failures {
            let _ = writeln!(log, "replicate {}: {}", f.replicate, f.message);
        }
        write_text(&failures, &log)?;
    }
    check_failures(&report)?;
    Ok(format!(
        "case {} n={} K={}: coverage {:.4}, relative bias {:.4}, sigma_hat {:.4}, true MSE {:.4}, failed {}; {:.1}s",
        config.case,
        config.n,
        config.replicates,
        report.coverage,
        report.relative_bias,
        report.sigma_hat,
        report.true_mse_mean,
        report.failures.len(),
        secs
    ))
}

pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}
