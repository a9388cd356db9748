//! Penalized mixed-model estimation.
//!
//! Given `(σ_e², Ω)` and the penalties `Δ_β`, `Δ_ν`:
//!
//! * `Ω* = (Ω⁻¹ + Δ_ν)⁻¹`, `Σ*_i = U_i Ω* U_iᵀ + σ_e² I`
//! * `θ̃ = (Σ W_iᵀ Σ*_i⁻¹ W_i + Δ_β)⁻¹ Σ W_iᵀ Σ*_i⁻¹ Y_i`
//! * `α̃_i = Ω* U_iᵀ Σ*_i⁻¹ (Y_i − W_i θ̃)`
//! * `P = Σ*⁻¹ − Σ*⁻¹ W (Wᵀ Σ*⁻¹ W + Δ_β)⁻¹ Wᵀ Σ*⁻¹`
//!
//! `σ_e²` solves `−tr(P Σ P) + Yᵀ P P Y = 0` with `Σ = U Ω Uᵀ + σ_e² I`, and
//! `Ω` is refreshed by the moment update of the alternating fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{build_design, DesignMatrices, LongitudinalDataset};
use crate::error::{FmmError, Result};
use crate::linalg::{repair_psd, sqrt_psd, symmetrize, Cholesky};
use crate::smoothing::{self, SmoothingMode, SmoothingState};
use crate::splines::SplineBasis;

pub const OMEGA_EIGEN_FLOOR: f64 = 1e-10;
/// Relative size of a negative eigenvalue tolerated before `Ω` counts as broken.
pub const OMEGA_REPAIR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceState {
    pub sigma_e2: f64,
    /// Block-diagonal `qL × qL` random-coefficient covariance.
    pub omega: DMatrix<f64>,
}

impl VarianceState {
    pub fn new(sigma_e2: f64, omega: DMatrix<f64>) -> Result<Self> {
        if !(sigma_e2 > 0.0) || !sigma_e2.is_finite() {
            return Err(FmmError::Domain(format!("residual variance {sigma_e2} must be positive")));
        }
        if !omega.is_square() {
            return Err(FmmError::Shape("random-effect covariance must be square".into()));
        }
        Ok(Self { sigma_e2, omega })
    }

    pub fn initial(random_dim: usize) -> Self {
        Self {
            sigma_e2: 1.0,
            omega: DMatrix::identity(random_dim, random_dim),
        }
    }
}

/// Penalty matrices already weighted by the smoothing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    /// `Δ_β = Diag{λ_k Δ_βk}`, `pL × pL`.
    pub delta_beta: DMatrix<f64>,
    /// `Δ_ν = Diag{η_k Δ_νk}`, `qL × qL`, shared by all subjects.
    pub delta_nu: DMatrix<f64>,
}

impl Penalties {
    pub fn zero(fixed_dim: usize, random_dim: usize) -> Self {
        Self {
            delta_beta: DMatrix::zeros(fixed_dim, fixed_dim),
            delta_nu: DMatrix::zeros(random_dim, random_dim),
        }
    }
}

/// `Ω* = (Ω⁻¹ + Δ_ν)⁻¹`, evaluated as `Ω^½ (I + Ω^½ Δ_ν Ω^½)⁻¹ Ω^½` so a
/// nearly singular `Ω` needs no inverse.
pub fn omega_star(omega: &DMatrix<f64>, delta_nu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let root = sqrt_psd(omega);
    let inner = DMatrix::identity(omega.nrows(), omega.nrows()) + &root * delta_nu * &root;
    let chol = Cholesky::new(&symmetrize(&inner))
        .map_err(|_| FmmError::IllConditioned("I + Ω^½ Δ_ν Ω^½ is not positive definite".into()))?;
    Ok(symmetrize(&(&root * chol.solve_mat(&root))))
}

/// `(Σ*_i, Ω*)` for one subject.
pub fn sigma_star(
    u_i: &DMatrix<f64>,
    variance: &VarianceState,
    delta_nu: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_omega(&variance.omega)?;
    let os = omega_star(&variance.omega, delta_nu)?;
    let m = u_i.nrows();
    let s = symmetrize(&(u_i * &os * u_i.transpose())) + DMatrix::identity(m, m) * variance.sigma_e2;
    Ok((s, os))
}

fn check_omega(omega: &DMatrix<f64>) -> Result<()> {
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(FmmError::IllConditioned("random-effect covariance is not finite".into()));
    }
    repair_psd(omega, 0.0, OMEGA_REPAIR_TOLERANCE).map(|_| ())
}

/// Everything derived from one `(σ_e², Ω, Δ)` configuration that the
/// estimators share.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub sigma_e2: f64,
    pub omega_star: DMatrix<f64>,
    pub sigma_star: Vec<DMatrix<f64>>,
    pub sigma_star_chol: Vec<Cholesky>,
    /// `Σ*_i⁻¹ W_i`
    pub sinv_w: Vec<DMatrix<f64>>,
    /// `Wᵀ Σ*⁻¹ W + Δ_β`
    pub normal: DMatrix<f64>,
    pub normal_chol: Cholesky,
}

impl ModelState {
    pub fn new(design: &DesignMatrices, variance: &VarianceState, penalties: &Penalties) -> Result<Self> {
        check_omega(&variance.omega)?;
        let os = omega_star(&variance.omega, &penalties.delta_nu)?;
        let base: Vec<DMatrix<f64>> = design
            .u_blocks
            .iter()
            .map(|u| symmetrize(&(u * &os * u.transpose())))
            .collect();
        Self::from_parts(design, variance.sigma_e2, os, &base, &penalties.delta_beta)
    }

    /// `base[i] = U_i Ω* U_iᵀ`; lets callers vary `σ_e²` cheaply.
    fn from_parts(
        design: &DesignMatrices,
        sigma_e2: f64,
        omega_star: DMatrix<f64>,
        base: &[DMatrix<f64>],
        delta_beta: &DMatrix<f64>,
    ) -> Result<Self> {
        let fd = design.fixed_dim();
        let mut sigma_star = Vec::with_capacity(design.n());
        let mut chols = Vec::with_capacity(design.n());
        let mut sinv_w = Vec::with_capacity(design.n());
        let mut normal = delta_beta.clone();
        for (b, w) in base.iter().zip(&design.w_blocks) {
            let m = b.nrows();
            let s = b + DMatrix::identity(m, m) * sigma_e2;
            let c = Cholesky::new(&s).map_err(|_| {
                FmmError::IllConditioned(format!("Σ* block is not positive definite at σ_e² = {sigma_e2:e}"))
            })?;
            let f = c.solve_mat(w);
            normal += w.transpose() * &f;
            sigma_star.push(s);
            chols.push(c);
            sinv_w.push(f);
        }
        let normal = symmetrize(&normal);
        debug_assert_eq!(normal.nrows(), fd);
        let normal_chol = Cholesky::new(&normal)?;
        Ok(Self {
            sigma_e2,
            omega_star,
            sigma_star,
            sigma_star_chol: chols,
            sinv_w,
            normal,
            normal_chol,
        })
    }

    /// `Σ Wᵢᵀ Σ*ᵢ⁻¹ vᵢ` for a stacked vector `v`.
    fn wt_sinv(&self, design: &DesignMatrices, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(design.fixed_dim());
        for (i, f) in self.sinv_w.iter().enumerate() {
            out += f.transpose() * v.rows(design.offsets[i], f.nrows());
        }
        out
    }

    pub fn theta(&self, design: &DesignMatrices) -> DVector<f64> {
        self.normal_chol.solve_vec(&self.wt_sinv(design, &design.y))
    }

    pub fn alpha(&self, design: &DesignMatrices, theta: &DVector<f64>) -> Vec<DVector<f64>> {
        design
            .u_blocks
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let resid = &design.y_blocks[i] - &design.w_blocks[i] * theta;
                &self.omega_star * (u.transpose() * self.sigma_star_chol[i].solve_vec(&resid))
            })
            .collect()
    }

    /// `P Y` without forming `P`.
    pub fn p_times(&self, design: &DesignMatrices, v: &DVector<f64>) -> DVector<f64> {
        let h = self.normal_chol.solve_vec(&self.wt_sinv(design, v));
        let mut out = DVector::zeros(v.len());
        for (i, c) in self.sigma_star_chol.iter().enumerate() {
            let off = design.offsets[i];
            let m = c.dim();
            let block = c.solve_vec(&v.rows(off, m).into_owned()) - &self.sinv_w[i] * &h;
            out.rows_mut(off, m).copy_from(&block);
        }
        out
    }

    /// Dense `P`.
    pub fn projection(&self, design: &DesignMatrices) -> DMatrix<f64> {
        let n = design.total_rows();
        let mut f = DMatrix::zeros(n, design.fixed_dim());
        let mut p = DMatrix::zeros(n, n);
        for (i, c) in self.sigma_star_chol.iter().enumerate() {
            let off = design.offsets[i];
            let m = c.dim();
            p.view_mut((off, off), (m, m)).copy_from(&c.inverse());
            f.view_mut((off, 0), (m, design.fixed_dim())).copy_from(&self.sinv_w[i]);
        }
        let hf = self.normal_chol.solve_mat(&f.transpose());
        p -= &f * hf;
        symmetrize(&p)
    }

    /// `−tr(P Σ P) + ‖P Y‖²` with `Σ_i = true_base[i] + σ_e² I`.
    fn score(&self, design: &DesignMatrices, true_base: &[DMatrix<f64>]) -> f64 {
        let py = self.p_times(design, &design.y);
        let fd = design.fixed_dim();
        let mut t_direct = 0.0;
        let mut cross = DMatrix::<f64>::zeros(fd, fd);
        let mut a = DMatrix::<f64>::zeros(fd, fd);
        let mut c = DMatrix::<f64>::zeros(fd, fd);
        for (i, chol) in self.sigma_star_chol.iter().enumerate() {
            let m = chol.dim();
            let sigma = &true_base[i] + DMatrix::identity(m, m) * self.sigma_e2;
            let f = &self.sinv_w[i];
            // S Σ S and S Σ F blocks
            let ss = chol.solve_mat(&sigma);
            let sss = chol.solve_mat(&ss.transpose());
            t_direct += sss.trace();
            let sigma_f = &sigma * f;
            cross += f.transpose() * chol.solve_mat(&sigma_f);
            a += f.transpose() * sigma_f;
            c += f.transpose() * f;
        }
        let h_cross = self.normal_chol.solve_mat(&cross);
        let h_a = self.normal_chol.solve_mat(&a);
        let h_c = self.normal_chol.solve_mat(&c);
        let trace = t_direct - 2.0 * h_cross.trace() + crate::linalg::trace_of_product(&h_a, &h_c);
        py.norm_squared() - trace
    }
}

/// `θ̃` at the given state.
pub fn solve_theta(design: &DesignMatrices, variance: &VarianceState, penalties: &Penalties) -> Result<DVector<f64>> {
    Ok(ModelState::new(design, variance, penalties)?.theta(design))
}

/// `α̃_i` per subject for a given `θ`.
pub fn solve_alpha(
    design: &DesignMatrices,
    variance: &VarianceState,
    penalties: &Penalties,
    theta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    Ok(ModelState::new(design, variance, penalties)?.alpha(design, theta))
}

pub fn projection_p(design: &DesignMatrices, variance: &VarianceState, penalties: &Penalties) -> Result<DMatrix<f64>> {
    Ok(ModelState::new(design, variance, penalties)?.projection(design))
}

/// Reusable evaluator of the variance score along `σ_e²` for fixed `Ω`.
pub struct ScoreFunction<'a> {
    design: &'a DesignMatrices,
    omega_star: DMatrix<f64>,
    star_base: Vec<DMatrix<f64>>,
    true_base: Vec<DMatrix<f64>>,
    delta_beta: &'a DMatrix<f64>,
}

impl<'a> ScoreFunction<'a> {
    pub fn new(design: &'a DesignMatrices, omega: &DMatrix<f64>, penalties: &'a Penalties) -> Result<Self> {
        check_omega(omega)?;
        let os = omega_star(omega, &penalties.delta_nu)?;
        let star_base = design
            .u_blocks
            .iter()
            .map(|u| symmetrize(&(u * &os * u.transpose())))
            .collect();
        let true_base = design
            .u_blocks
            .iter()
            .map(|u| symmetrize(&(u * omega * u.transpose())))
            .collect();
        Ok(Self {
            design,
            omega_star: os,
            star_base,
            true_base,
            delta_beta: &penalties.delta_beta,
        })
    }

    pub fn eval(&self, sigma_e2: f64) -> Result<f64> {
        if !(sigma_e2 > 0.0) {
            return Err(FmmError::Domain(format!("variance candidate {sigma_e2} must be positive")));
        }
        let state = ModelState::from_parts(
            self.design,
            sigma_e2,
            self.omega_star.clone(),
            &self.star_base,
            self.delta_beta,
        )?;
        Ok(state.score(self.design, &self.true_base))
    }
}

/// Score `−tr(P Σ P ∂Σ*/∂σ_e²) + Yᵀ P ∂Σ*/∂σ_e² P Y` with `∂Σ*/∂σ_e² = I`.
pub fn variance_score(
    sigma_e2: f64,
    design: &DesignMatrices,
    omega: &DMatrix<f64>,
    penalties: &Penalties,
) -> Result<f64> {
    ScoreFunction::new(design, omega, penalties)?.eval(sigma_e2)
}

/// Block-diagonal derivative `∂Σ*/∂σ_k`.
#[derive(Debug, Clone)]
pub enum ComponentDerivative {
    Identity,
    Blocks(Vec<DMatrix<f64>>),
}

impl ComponentDerivative {
    pub fn dense(&self, design: &DesignMatrices) -> DMatrix<f64> {
        match self {
            Self::Identity => DMatrix::identity(design.total_rows(), design.total_rows()),
            Self::Blocks(b) => crate::linalg::block_diag(b),
        }
    }
}

/// Vector-valued score `Q_{VC,k}`, one entry per variance component, using
/// dense algebra. `sigma_true` is `Σ` at the same parameter value.
pub fn variance_score_vector(
    p: &DMatrix<f64>,
    sigma_true: &DMatrix<f64>,
    derivs: &[DMatrix<f64>],
    y: &DVector<f64>,
) -> Vec<f64> {
    let py = p * y;
    let psp = p * sigma_true * p;
    derivs
        .iter()
        .map(|d| -crate::linalg::trace_of_product(&psp, d) + py.dot(&(d * &py)))
        .collect()
}

/// Root of a scalar function on `[lo, hi]` by an Illinois-modified secant
/// step with bisection fallback.
pub fn bracketed_root<F>(mut f: F, lo: f64, hi: f64, rel_tol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(FmmError::RootNotBracketed { lo: a, hi: b, f_lo: fa, f_hi: fb });
    }
    let mut side = 0i8;
    for _ in 0..max_iter {
        let mut c = (a * fb - b * fa) / (fb - fa);
        let width = b - a;
        // keep the secant point well inside the bracket
        if !c.is_finite() || c <= a + 0.01 * width || c >= b - 0.01 * width {
            c = 0.5 * (a + b);
        }
        let fc = f(c)?;
        if fc == 0.0 || (b - a).abs() <= rel_tol * c.abs() {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() <= rel_tol * a.abs().max(b.abs()) {
            return Ok(if fa.abs() < fb.abs() { a } else { b });
        }
    }
    Err(FmmError::Numerical("root finder exhausted its iteration budget".into()))
}

/// `σ̂_e²` solving the score equation. The bracket is widened geometrically
/// (up to 2¹⁰ on each side) until the score changes sign.
pub fn solve_variance(
    design: &DesignMatrices,
    omega: &DMatrix<f64>,
    penalties: &Penalties,
    bracket: (f64, f64),
) -> Result<f64> {
    let score = ScoreFunction::new(design, omega, penalties)?;
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(FmmError::InvalidConfig(format!("invalid variance bracket ({lo}, {hi})")));
    }
    let (mut f_lo, mut f_hi) = (score.eval(lo)?, score.eval(hi)?);
    let mut expansions = 0;
    while f_lo.signum() == f_hi.signum() && f_lo != 0.0 && f_hi != 0.0 {
        if expansions == 10 {
            return Err(FmmError::RootNotBracketed { lo, hi, f_lo, f_hi });
        }
        lo *= 0.5;
        hi *= 2.0;
        f_lo = score.eval(lo)?;
        f_hi = score.eval(hi)?;
        expansions += 1;
    }
    bracketed_root(|s| score.eval(s), lo, hi, 1e-10, 500)
}

/// Moment update
/// `Ω̂ = n⁻¹ Σ {α̃_i α̃_iᵀ + Ω* − Ω* U_iᵀ M_i U_i Ω*}`, with
/// `M_i = Σ_i⁻¹ − Σ_i⁻¹ W_i (Σ_j W_jᵀ Σ_j⁻¹ W_j + Δ_β)⁻¹ W_iᵀ Σ_i⁻¹`,
/// symmetrized and eigenvalue-floored.
pub fn update_omega(
    design: &DesignMatrices,
    variance: &VarianceState,
    alpha: &[DVector<f64>],
    penalties: &Penalties,
) -> Result<DMatrix<f64>> {
    check_omega(&variance.omega)?;
    let os = omega_star(&variance.omega, &penalties.delta_nu)?;
    let mut chols = Vec::with_capacity(design.n());
    let mut sinv_w = Vec::with_capacity(design.n());
    let mut normal = penalties.delta_beta.clone();
    for (u, w) in design.u_blocks.iter().zip(&design.w_blocks) {
        let m = u.nrows();
        let sigma = symmetrize(&(u * &variance.omega * u.transpose())) + DMatrix::identity(m, m) * variance.sigma_e2;
        let c = Cholesky::new(&sigma)?;
        let f = c.solve_mat(w);
        normal += w.transpose() * &f;
        chols.push(c);
        sinv_w.push(f);
    }
    let normal_chol = Cholesky::new(&symmetrize(&normal))?;
    let qd = design.random_dim();
    let mut acc = DMatrix::<f64>::zeros(qd, qd);
    for (i, u) in design.u_blocks.iter().enumerate() {
        let m = u.nrows();
        let sinv = chols[i].inverse();
        let m_i = &sinv - &sinv_w[i] * normal_chol.solve_mat(&sinv_w[i].transpose());
        debug_assert_eq!(m_i.nrows(), m);
        let uo = u * &os;
        acc += &alpha[i] * alpha[i].transpose() + &os - uo.transpose() * m_i * uo;
    }
    acc /= design.n() as f64;
    repair_psd(&acc, OMEGA_EIGEN_FLOOR, OMEGA_REPAIR_TOLERANCE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub fixed_order: usize,
    pub fixed_interior_knots: usize,
    pub random_order: usize,
    pub random_interior_knots: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self::uniform(4, 5)
    }
}

impl BasisConfig {
    pub fn uniform(order: usize, interior_knots: usize) -> Self {
        Self {
            fixed_order: order,
            fixed_interior_knots: interior_knots,
            random_order: order,
            random_interior_knots: interior_knots,
        }
    }

    pub fn bases(&self) -> Result<(SplineBasis, SplineBasis)> {
        Ok((
            SplineBasis::new(self.fixed_order, self.fixed_interior_knots)?,
            SplineBasis::new(self.random_order, self.random_interior_knots)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub basis: BasisConfig,
    pub smoothing: SmoothingMode,
    /// Re-run smoothing selection after every iteration instead of once up front.
    pub reselect_each_iteration: bool,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub variance_bracket: (f64, f64),
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            smoothing: SmoothingMode::default(),
            reselect_each_iteration: false,
            tolerance: 1e-6,
            max_iterations: 200,
            variance_bracket: (1e-6, 1e2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sigma_e2: f64,
    pub delta_theta: f64,
    pub delta_sigma: f64,
    pub delta_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub lambda_at_boundary: Vec<bool>,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub config: FitConfig,
    pub theta: DVector<f64>,
    pub alpha: Vec<DVector<f64>>,
    pub variance: VarianceState,
    pub smoothing: SmoothingState,
    pub p: usize,
    pub q: usize,
    pub diagnostics: FitDiagnostics,
}

impl FittedModel {
    pub fn bases(&self) -> Result<(SplineBasis, SplineBasis)> {
        self.config.basis.bases()
    }

    pub fn penalties(&self) -> Result<Penalties> {
        let (fb, rb) = self.bases()?;
        Ok(self.smoothing.penalties(&fb, &rb, self.p, self.q))
    }

    pub fn design(&self, data: &LongitudinalDataset) -> Result<DesignMatrices> {
        if data.p() != self.p || data.q() != self.q {
            return Err(FmmError::Incompatible(format!(
                "model has p = {}, q = {} but data has p = {}, q = {}",
                self.p,
                self.q,
                data.p(),
                data.q()
            )));
        }
        let (fb, rb) = self.bases()?;
        build_design(data, &fb, &rb)
    }

    pub fn state(&self, design: &DesignMatrices) -> Result<ModelState> {
        ModelState::new(design, &self.variance, &self.penalties()?)
    }
}

/// Largest absolute change of `U_i Ω U_iᵀ` over subjects.
fn observed_omega_change(design: &DesignMatrices, old: &DMatrix<f64>, new: &DMatrix<f64>) -> f64 {
    let diff = new - old;
    design
        .u_blocks
        .iter()
        .map(|u| (u * &diff * u.transpose()).amax())
        .fold(0.0, f64::max)
}

/// Alternating fit: solve the variance score for `σ_e²`, then refresh `θ̃`,
/// `α̃` and `Ω̂`. Starts from `Ω = I`, `σ_e² = 1`.
pub fn fit(data: &LongitudinalDataset, config: &FitConfig) -> Result<FittedModel> {
    let (fb, rb) = config.basis.bases()?;
    let design = build_design(data, &fb, &rb)?;
    fit_design(&design, &fb, &rb, config)
}

pub fn fit_design(
    design: &DesignMatrices,
    fixed_basis: &SplineBasis,
    random_basis: &SplineBasis,
    config: &FitConfig,
) -> Result<FittedModel> {
    let (p, q) = (design.p, design.q);
    let mut variance = VarianceState::initial(design.random_dim());
    let mut selection = smoothing::resolve(&config.smoothing, design, fixed_basis, random_basis, &variance)?;
    let mut penalties = selection.state.penalties(fixed_basis, random_basis, p, q);

    let mut theta = ModelState::new(design, &variance, &penalties)?.theta(design);
    let mut history = Vec::new();
    let mut converged = false;
    for iteration in 1..=config.max_iterations {
        // Step 1
        let sigma_e2 = solve_variance(design, &variance.omega, &penalties, config.variance_bracket)?;
        let stepped = VarianceState { sigma_e2, omega: variance.omega.clone() };
        // Step 2
        let state = ModelState::new(design, &stepped, &penalties)?;
        let new_theta = state.theta(design);
        let alpha = state.alpha(design, &new_theta);
        let omega = update_omega(design, &stepped, &alpha, &penalties)?;

        let record = IterationRecord {
            iteration,
            sigma_e2,
            delta_theta: (&new_theta - &theta).amax(),
            delta_sigma: (sigma_e2 - variance.sigma_e2).abs(),
            delta_omega: observed_omega_change(design, &variance.omega, &omega),
        };
        let delta = record.delta_theta.max(record.delta_sigma).max(record.delta_omega);
        history.push(record);
        theta = new_theta;
        variance = VarianceState { sigma_e2, omega };

        if config.reselect_each_iteration {
            selection = smoothing::resolve(&config.smoothing, design, fixed_basis, random_basis, &variance)?;
            penalties = selection.state.penalties(fixed_basis, random_basis, p, q);
        }
        if delta < config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        let last = history.last().cloned().unwrap_or(IterationRecord {
            iteration: 0,
            sigma_e2: variance.sigma_e2,
            delta_theta: f64::NAN,
            delta_sigma: f64::NAN,
            delta_omega: f64::NAN,
        });
        return Err(FmmError::NotConverged {
            iterations: config.max_iterations,
            delta_theta: last.delta_theta,
            delta_sigma: last.delta_sigma,
            delta_omega: last.delta_omega,
        });
    }

    // final estimates consistent with the stored variance state
    let state = ModelState::new(design, &variance, &penalties)?;
    let theta = state.theta(design);
    let alpha = state.alpha(design, &theta);
    Ok(FittedModel {
        config: config.clone(),
        theta,
        alpha,
        variance,
        smoothing: selection.state,
        p,
        q,
        diagnostics: FitDiagnostics {
            iterations: history.len(),
            converged,
            lambda_at_boundary: selection.lambda_at_boundary,
            history,
        },
    })
}
