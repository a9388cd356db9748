//! Synthetic studies.
//!
//! Each replicate draws `t ~ U(0,1)`, `X = 1 + 0.5t + N(0, 0.5²)`,
//! `Z = 0.1(−0.8415/2 + sin t + N(0, 0.4²))` and `Y = Xβ(t) + Zν(t) + ε`,
//! with `β(t) = 2cos t` (cases I, II) or `cos 2πt` (case III). Random
//! functions are `ν_i(t) = B(t)ᵀα_i` with `cov(α_i) = (ρ^{|a−b|})` over basis
//! index (cases I, III) or a stationary process with `cov = ρ^{|s−t|}`
//! (case II). The target is the subject-mean effect at a fixed time `t0`.
//!
//! Replicate `k` uses ChaCha20 seeded with the master seed on stream `k`, so
//! streams never overlap and results do not depend on the thread count.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{build_design, build_target, LongitudinalDataset, MixedEffectTarget, SubjectRecord};
use crate::error::{FmmError, Result};
use crate::linalg::sqrt_psd;
use crate::predict::MseWorkspace;
use crate::smoothing::{EtaRule, LambdaRule, SmoothingMode};
use crate::solver::{fit_design, BasisConfig, FitConfig};

pub const RNG_NAME: &str = "chacha20";
/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    I,
    II,
    III,
}

impl std::str::FromStr for Case {
    type Err = FmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Case::I),
            "II" | "2" => Ok(Case::II),
            "III" | "3" => Ok(Case::III),
            other => Err(FmmError::InvalidConfig(format!("unknown case {other:?}"))),
        }
    }
}

impl std::fmt::Display for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Case::I => "I",
            Case::II => "II",
            Case::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub case: Case,
    pub n: usize,
    pub m: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub basis: BasisConfig,
    pub smoothing: SmoothingMode,
    /// Target time; `None` uses the first time drawn in replicate 0.
    pub t0: Option<f64>,
    pub rho: f64,
    pub sigma_eps: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            case: Case::I,
            n: 50,
            m: 1,
            replicates: 600,
            master_seed: 7,
            basis: BasisConfig::default(),
            smoothing: simulation_smoothing(),
            t0: None,
            rho: 0.4,
            sigma_eps: 1.0,
        }
    }
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Fixed `λ_k = 1/‖Δ_βk‖₂`, closed-form `η`.
pub fn simulation_smoothing() -> SmoothingMode {
    SmoothingMode {
        lambda: LambdaRule::UnitNorm,
        eta: EtaRule::ClosedForm,
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(FmmError::InvalidConfig("a study needs n ≥ 2 subjects".into()));
        }
        if self.m < 1 || self.replicates < 1 {
            return Err(FmmError::InvalidConfig("m and K must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.sigma_eps >= 0.0) {
            return Err(FmmError::InvalidConfig("need 0 < ρ < 1 and σ_ε ≥ 0".into()));
        }
        if let Some(t0) = self.t0 {
            if !(0.0..=1.0).contains(&t0) {
                return Err(FmmError::Domain(format!("t0 = {t0} outside [0, 1]")));
            }
        }
        self.basis.bases().map(|_| ())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn header_comment(&self) -> String {
        format!("# config_sha256={} seed={} rng={}", self.hash(), self.master_seed, RNG_NAME)
    }

    pub fn rng(&self, replicate: usize) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(replicate as u64);
        rng
    }

    pub fn resolved_t0(&self) -> f64 {
        self.t0.unwrap_or_else(|| self.rng(0).random::<f64>())
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self.case {
            Case::I | Case::II => 2.0 * t.cos(),
            Case::III => (2.0 * std::f64::consts::PI * t).cos(),
        }
    }
}

/// What the generator knows that the fit does not.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub t0: f64,
    /// `ν_i` at each observation time.
    pub nu: Vec<Vec<f64>>,
    pub nu_t0: Vec<f64>,
    /// Subject-mean targets `X̄_i β(t0) + Z̄_i ν_i(t0)`.
    pub a: Vec<f64>,
    /// Mean response `X β(t)` per subject.
    pub mean: Vec<Vec<f64>>,
}

/// Covariates and times of one replicate.
#[derive(Debug, Clone)]
pub struct Covariates {
    pub times: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

pub fn draw_covariates<R: Rng>(config: &SimulationConfig, rng: &mut R) -> Covariates {
    let ex = Normal::new(0.0, 0.5).expect("valid sd");
    let ez = Normal::new(0.0, 0.4).expect("valid sd");
    let mut times = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        times.push((0..config.m).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
    }
    let mut x = Vec::with_capacity(config.n);
    let mut z = Vec::with_capacity(config.n);
    for ts in &times {
        x.push(ts.iter().map(|t| 1.0 + 0.5 * t + ex.sample(rng)).collect());
        z.push(ts.iter().map(|t| 0.1 * (-0.8415 / 2.0 + t.sin() + ez.sample(rng))).collect());
    }
    Covariates { times, x, z }
}

/// Covariance of `(ν(t_1), …, ν(t_m), ν(t0))` for one subject.
pub fn nu_covariance(config: &SimulationConfig, times: &[f64], t0: f64) -> Result<DMatrix<f64>> {
    let all: Vec<f64> = times.iter().copied().chain(std::iter::once(t0)).collect();
    let k = all.len();
    match config.case {
        Case::II => Ok(DMatrix::from_fn(k, k, |a, b| config.rho.powf((all[a] - all[b]).abs()))),
        Case::I | Case::III => {
            let (_, rb) = config.basis.bases()?;
            let l = rb.size();
            let r = DMatrix::from_fn(l, l, |a, b| config.rho.powi((a as i32 - b as i32).abs()));
            let mut bmat = DMatrix::zeros(k, l);
            for (row, t) in all.iter().enumerate() {
                bmat.set_row(row, &rb.eval(*t)?.transpose());
            }
            Ok(&bmat * r * bmat.transpose())
        }
    }
}

/// Draws `ν` at the observation times and `t0` for every subject.
pub fn draw_nu<R: Rng>(config: &SimulationConfig, times: &[Vec<f64>], t0: f64, rng: &mut R) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut nu = Vec::with_capacity(times.len());
    let mut nu_t0 = Vec::with_capacity(times.len());
    for ts in times {
        let cov = nu_covariance(config, ts, t0)?;
        let root = sqrt_psd(&cov);
        let z = DVector::from_fn(cov.nrows(), |_, _| StandardNormal.sample(rng));
        let v = root * z;
        nu.push(v.rows(0, ts.len()).iter().copied().collect());
        nu_t0.push(v[ts.len()]);
    }
    Ok((nu, nu_t0))
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Dataset and truth of replicate `replicate`.
pub fn generate(config: &SimulationConfig, replicate: usize) -> Result<(LongitudinalDataset, Truth)> {
    config.validate()?;
    let t0 = config.resolved_t0();
    let mut rng = config.rng(replicate);
    let cov = draw_covariates(config, &mut rng);
    let (nu, nu_t0) = draw_nu(config, &cov.times, t0, &mut rng)?;
    let mut subjects = Vec::with_capacity(config.n);
    let mut a = Vec::with_capacity(config.n);
    let mut mean = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let ts = &cov.times[i];
        let mu: Vec<f64> = ts.iter().zip(&cov.x[i]).map(|(t, x)| x * config.beta(*t)).collect();
        let y: Vec<f64> = (0..ts.len())
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                mu[j] + cov.z[i][j] * nu[i][j] + config.sigma_eps * e
            })
            .collect();
        a.push(mean_of(&cov.x[i]) * config.beta(t0) + mean_of(&cov.z[i]) * nu_t0[i]);
        mean.push(mu);
        subjects.push(SubjectRecord {
            id: format!("s{i}"),
            times: ts.clone(),
            y,
            x: DMatrix::from_column_slice(ts.len(), 1, &cov.x[i]),
            z: DMatrix::from_column_slice(ts.len(), 1, &cov.z[i]),
        });
    }
    Ok((
        LongitudinalDataset::new(subjects)?,
        Truth { t0, nu, nu_t0, a, mean },
    ))
}

/// One subject's outcome in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub subject: usize,
    pub a_true: f64,
    pub a_naive: f64,
    pub a_hat: f64,
    pub mse_first_order: f64,
    pub mse_est: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub sigma_hat: f64,
    pub iterations: usize,
    pub subjects: Vec<SubjectOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses all available cores.
    pub jobs: usize,
    /// Replace every interval by `(−∞, ∞)`.
    pub infinite_intervals: bool,
}

pub fn run_replicate(config: &SimulationConfig, replicate: usize, options: &RunOptions) -> Result<ReplicateOutcome> {
    let (data, truth) = generate(config, replicate)?;
    let (fb, rb) = config.basis.bases()?;
    let design = build_design(&data, &fb, &rb)?;
    let fit_config = FitConfig {
        basis: config.basis.clone(),
        smoothing: config.smoothing.clone(),
        ..FitConfig::default()
    };
    let model = fit_design(&design, &fb, &rb, &fit_config)?;
    let ws = MseWorkspace::from_fit(&model, &design)?;
    let mut subjects = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let target = MixedEffectTarget::subject_mean(&data, i, truth.t0);
        let tv = build_target(&target, &fb, &rb, config.n)?;
        let pred = ws.predict(&target, &tv)?;
        let (lower, upper) = if options.infinite_intervals {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            pred.interval
        };
        let a_true = truth.a[i];
        subjects.push(SubjectOutcome {
            subject: i,
            a_true,
            a_naive: pred.a_naive,
            a_hat: pred.a_corrected,
            mse_first_order: pred.mse_first_order,
            mse_est: pred.mse_plugin,
            lower,
            upper,
            covered: lower <= a_true && a_true <= upper,
        });
    }
    Ok(ReplicateOutcome {
        replicate,
        sigma_hat: model.variance.sigma_e2.sqrt(),
        iterations: model.diagnostics.iterations,
        subjects,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationReport {
    pub case: Case,
    pub n: usize,
    pub t0: f64,
    pub replicates: usize,
    pub failures: Vec<ReplicateFailure>,
    /// Per subject, mean over replicates of `(Â − A)²`.
    pub true_mse: Vec<f64>,
    /// Per subject, mean over replicates of the plug-in MSE.
    pub mean_est_mse: Vec<f64>,
    pub relative_bias: f64,
    pub relative_bias_se: f64,
    pub coverage: f64,
    /// Standard error across subject-level coverage rates.
    pub coverage_se_subjects: f64,
    /// Standard error across replicate-level coverage rates.
    pub coverage_se_replicates: f64,
    pub sigma_hat: f64,
    pub sigma_hat_se: f64,
    pub true_mse_mean: f64,
    pub true_mse_se: f64,
    pub min_plugin_gap: f64,
    pub outcomes: Vec<ReplicateOutcome>,
    pub wall_clock_secs: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = mean_of(v);
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Summary statistics from successful replicates, folded in index order.
pub fn aggregate(config: &SimulationConfig, outcomes: Vec<ReplicateOutcome>, failures: Vec<ReplicateFailure>) -> Result<ReplicationReport> {
    if outcomes.is_empty() {
        return Err(FmmError::ReplicateFailures {
            failed: failures.len(),
            total: config.replicates,
        });
    }
    let n = config.n;
    let k = outcomes.len() as f64;
    let mut sq = vec![0.0; n];
    let mut est = vec![0.0; n];
    let mut hits = vec![0.0; n];
    let mut rep_cov = Vec::with_capacity(outcomes.len());
    let mut sigmas = Vec::with_capacity(outcomes.len());
    let mut min_gap = f64::INFINITY;
    for o in &outcomes {
        let mut c = 0.0;
        for s in &o.subjects {
            sq[s.subject] += (s.a_hat - s.a_true).powi(2);
            est[s.subject] += s.mse_est;
            let h = if s.covered { 1.0 } else { 0.0 };
            hits[s.subject] += h;
            c += h;
            min_gap = min_gap.min(s.mse_est - s.mse_first_order);
        }
        rep_cov.push(c / n as f64);
        sigmas.push(o.sigma_hat);
    }
    let true_mse: Vec<f64> = sq.iter().map(|v| v / k).collect();
    let mean_est_mse: Vec<f64> = est.iter().map(|v| v / k).collect();
    let rel: Vec<f64> = true_mse
        .iter()
        .zip(&mean_est_mse)
        .map(|(t, e)| (e - t) / t)
        .collect();
    let subj_cov: Vec<f64> = hits.iter().map(|h| h / k).collect();
    let (relative_bias, relative_bias_se) = mean_se(&rel);
    let (coverage, coverage_se_subjects) = mean_se(&subj_cov);
    let (_, coverage_se_replicates) = mean_se(&rep_cov);
    let (sigma_hat, sigma_hat_se) = mean_se(&sigmas);
    let (true_mse_mean, true_mse_se) = mean_se(&true_mse);
    Ok(ReplicationReport {
        case: config.case,
        n,
        t0: config.resolved_t0(),
        replicates: config.replicates,
        failures,
        true_mse,
        mean_est_mse,
        relative_bias,
        relative_bias_se,
        coverage,
        coverage_se_subjects,
        coverage_se_replicates,
        sigma_hat,
        sigma_hat_se,
        true_mse_mean,
        true_mse_se,
        min_plugin_gap: min_gap,
        outcomes,
        wall_clock_secs: 0.0,
    })
}

/// Runs all replicates and aggregates them. More than 2% failed replicates
/// is an error.
pub fn run_study(config: &SimulationConfig, options: &RunOptions) -> Result<ReplicationReport> {
    let report = run_study_lenient(config, options)?;
    check_failures(&report)?;
    Ok(report)
}

pub fn check_failures(report: &ReplicationReport) -> Result<()> {
    let failed = report.failures.len();
    if failed as f64 > MAX_FAILURE_RATE * report.replicates as f64 {
        return Err(FmmError::ReplicateFailures {
            failed,
            total: report.replicates,
        });
    }
    Ok(())
}

/// As [`run_study`] but returns the report whatever the failure count.
pub fn run_study_lenient(config: &SimulationConfig, options: &RunOptions) -> Result<ReplicationReport> {
    config.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| FmmError::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<ReplicateOutcome>> = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|k| run_replicate(config, k, options))
            .collect()
    });
    let mut outcomes = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push(ReplicateFailure {
                replicate: k,
                message: e.to_string(),
            }),
        }
    }
    let mut report = aggregate(config, outcomes, failures)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMetrics {
    pub coverage: f64,
    pub mean_length: f64,
    pub prediction_bias: f64,
    /// Pairs left out of the bias average because `A = 0`.
    pub excluded: usize,
}

/// Coverage, mean interval length and mean `|(A − Â)/A|` over aligned pairs.
pub fn metrics_at_time(predictions: &[f64], truths: &[f64], intervals: &[(f64, f64)]) -> Result<TimeMetrics> {
    if predictions.len() != truths.len() || truths.len() != intervals.len() || truths.is_empty() {
        return Err(FmmError::Shape("metrics need equally long, non-empty inputs".into()));
    }
    let total = truths.len() as f64;
    let coverage = truths
        .iter()
        .zip(intervals)
        .filter(|(a, (lo, hi))| lo <= *a && *a <= hi)
        .count() as f64
        / total;
    let mean_length = intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / total;
    let mut excluded = 0;
    let mut bias = 0.0;
    for (a, p) in truths.iter().zip(predictions) {
        if *a == 0.0 {
            excluded += 1;
        } else {
            bias += ((a - p) / a).abs();
        }
    }
    let used = truths.len() - excluded;
    let prediction_bias = if used == 0 { f64::NAN } else { bias / used as f64 };
    Ok(TimeMetrics {
        coverage,
        mean_length,
        prediction_bias,
        excluded,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Raw per-replicate, per-subject rows.
pub fn write_raw_csv<W: std::io::Write>(config: &SimulationConfig, report: &ReplicationReport, mut out: W) -> Result<()> {
    writeln!(out, "{}", config.header_comment())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate", "subject", "A", "A_naive", "A_hat", "MSE_first", "MSE_est", "lower", "upper", "covered", "sigma_hat",
    ])?;
    for o in &report.outcomes {
        for s in &o.subjects {
            w.write_record([
                o.replicate.to_string(),
                s.subject.to_string(),
                fmt(s.a_true),
                fmt(s.a_naive),
                fmt(s.a_hat),
                fmt(s.mse_first_order),
                fmt(s.mse_est),
                fmt(s.lower),
                fmt(s.upper),
                (s.covered as u8).to_string(),
                fmt(o.sigma_hat),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "case",
    "n",
    "replicates",
    "failed",
    "sigma_hat",
    "sigma_hat_se",
    "coverage",
    "coverage_se",
    "coverage_se_replicates",
    "relative_bias",
    "relative_bias_se",
    "true_mse",
    "true_mse_se",
];

/// One summary row. Wall-clock time is kept out so the file is reproducible.
pub fn write_summary_csv<W: std::io::Write>(config: &SimulationConfig, report: &ReplicationReport, mut out: W) -> Result<()> {
    writeln!(out, "{}", config.header_comment())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    w.write_record([
        report.case.to_string(),
        report.n.to_string(),
        report.replicates.to_string(),
        report.failures.len().to_string(),
        fmt(report.sigma_hat),
        fmt(report.sigma_hat_se),
        fmt(report.coverage),
        fmt(report.coverage_se_subjects),
        fmt(report.coverage_se_replicates),
        fmt(report.relative_bias),
        fmt(report.relative_bias_se),
        fmt(report.true_mse_mean),
        fmt(report.true_mse_se),
    ])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(case: Case) -> SimulationConfig {
        SimulationConfig {
            case,
            n: 30,
            replicates: 1,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_and_index_give_the_same_dataset() {
        let c = small(Case::I);
        let (d1, t1) = generate(&c, 3).unwrap();
        let (d2, t2) = generate(&c, 3).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
        let (d3, _) = generate(&c, 4).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn default_target_time_is_first_draw_of_stream_zero() {
        let c = small(Case::I);
        let (_, truth) = generate(&c, 5).unwrap();
        let first = c.rng(0).random::<f64>();
        assert_eq!(truth.t0, first);
        let (d0, _) = generate(&c, 0).unwrap();
        assert_eq!(d0.subjects()[0].times[0], first);
    }

    #[test]
    fn noiseless_response_is_mean_plus_random_function() {
        for case in [Case::I, Case::II, Case::III] {
            let c = SimulationConfig {
                sigma_eps: 0.0,
                m: 3,
                ..small(case)
            };
            let (data, truth) = generate(&c, 0).unwrap();
            for (i, s) in data.subjects().iter().enumerate() {
                for j in 0..s.times.len() {
                    let fixed = s.x[(j, 0)] * c.beta(s.times[j]);
                    assert_eq!(truth.mean[i][j], fixed);
                    let rest = s.y[j] - fixed - s.z[(j, 0)] * truth.nu[i][j];
                    assert!(rest.abs() < 1e-15, "{case}: {rest}");
                }
            }
        }
    }

    #[test]
    fn exponential_covariance_entries() {
        let c = small(Case::II);
        let cov = nu_covariance(&c, &[0.2, 0.4], 0.9).unwrap();
        assert!((cov[(0, 1)] - 0.4f64.powf(0.2)).abs() < 1e-15);
        assert!((cov[(1, 0)] - 0.4f64.powf(0.2)).abs() < 1e-15);
        assert_eq!(cov[(0, 0)], 1.0);
        assert!((cov[(0, 2)] - 0.4f64.powf(0.7)).abs() < 1e-15);
    }

    #[test]
    fn basis_covariance_is_psd_and_uses_band_structure() {
        let c = small(Case::I);
        let cov = nu_covariance(&c, &[0.0, 0.3, 1.0], 0.5).unwrap();
        let eig = cov.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-12);
        // at t = 0 only the first basis function is nonzero
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-14);
        // B_0(0) = 1 and B_{L-1}(1) = 1, so the corner entry is ρ^{L-1}
        let l = c.basis.bases().unwrap().1.size();
        assert!((cov[(0, 2)] - 0.4f64.powi(l as i32 - 1)).abs() < 1e-14);
    }

    #[test]
    fn case_three_changes_only_the_mean() {
        let one = small(Case::I);
        let three = small(Case::III);
        assert_eq!(three.beta(0.25), (std::f64::consts::PI / 2.0).cos());
        let (_, t1) = generate(&one, 2).unwrap();
        let (_, t3) = generate(&three, 2).unwrap();
        assert_eq!(t1.nu, t3.nu);
    }

    #[test]
    fn single_pair_metrics() {
        let m = metrics_at_time(&[1.8], &[2.0], &[(1.5, 2.5)]).unwrap();
        assert_eq!(m.coverage, 1.0);
        assert_eq!(m.mean_length, 1.0);
        assert!((m.prediction_bias - 0.1).abs() < 1e-15);
        assert_eq!(m.excluded, 0);
    }

    #[test]
    fn exact_predictions_and_zero_truths() {
        let m = metrics_at_time(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.0], &[(0.0, 2.0), (-3.0, -1.0), (1.0, 2.0)]).unwrap();
        assert!((m.coverage - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.prediction_bias, 0.0);
        assert_eq!(m.excluded, 1);
        assert!(metrics_at_time(&[1.0], &[], &[]).is_err());
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        for bad in [
            SimulationConfig { n: 1, ..Default::default() },
            SimulationConfig { replicates: 0, ..Default::default() },
            SimulationConfig { m: 0, ..Default::default() },
            SimulationConfig { rho: 1.0, ..Default::default() },
            SimulationConfig { t0: Some(1.5), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = SimulationConfig::default();
        let b = SimulationConfig { master_seed: 8, ..Default::default() };
        assert_eq!(a.hash(), SimulationConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert!(a.header_comment().starts_with("# config_sha256="));
        assert!(a.header_comment().ends_with("seed=7 rng=chacha20"));
    }

    #[test]
    fn one_replicate_report_equals_its_own_quantities() {
        let c = small(Case::I);
        let opts = RunOptions { jobs: 1, infinite_intervals: false };
        let single = run_replicate(&c, 0, &opts).unwrap();
        let report = run_study(&c, &opts).unwrap();
        assert_eq!(report.outcomes, vec![single.clone()]);
        assert_eq!(report.sigma_hat, single.sigma_hat);
        assert_eq!(report.sigma_hat_se, 0.0);
        for s in &single.subjects {
            assert_eq!(report.true_mse[s.subject], (s.a_hat - s.a_true).powi(2));
            assert_eq!(report.mean_est_mse[s.subject], s.mse_est);
            assert!((s.upper - s.lower - 4.0 * s.mse_est.sqrt()).abs() < 1e-12 * (1.0 + s.a_hat.abs()));
        }
        let covered = single.subjects.iter().filter(|s| s.covered).count() as f64 / c.n as f64;
        assert!((report.coverage - covered).abs() < 1e-15);
        assert!(report.min_plugin_gap >= -1e-10);

        let open = run_study(&c, &RunOptions { jobs: 1, infinite_intervals: true }).unwrap();
        assert_eq!(open.coverage, 1.0);
    }

    #[test]
    fn csv_outputs_carry_the_header_and_parse_back() {
        let c = small(Case::II);
        let report = run_study(&c, &RunOptions { jobs: 1, infinite_intervals: false }).unwrap();
        let mut raw = Vec::new();
        write_raw_csv(&c, &report, &mut raw).unwrap();
        let raw = String::from_utf8(raw).unwrap();
        assert!(raw.starts_with(&c.header_comment()));
        let body: String = raw.lines().skip(1).collect::<Vec<_>>().join("\n");
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), c.n);
        let a_hat: f64 = rows[3][4].parse().unwrap();
        assert_eq!(a_hat, report.outcomes[0].subjects[3].a_hat);

        let mut summary = Vec::new();
        write_summary_csv(&c, &report, &mut summary).unwrap();
        let summary = String::from_utf8(summary).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], SUMMARY_COLUMNS.join(","));
        assert!(lines[2].starts_with("II,30,1,0,"));
    }
}
