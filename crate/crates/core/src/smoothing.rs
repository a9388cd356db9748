//! Smoothing-parameter selection.
//!
//! `λ` minimizes the marginal REML criterion
//! `ℓ_m(λ) = log|Σ_λ| + rᵀ Σ_λ⁻¹ r + log|W₍₁₎ᵀ Σ_λ⁻¹ W₍₁₎|`, where
//! `Σ_λ = R + U Ω Uᵀ + Σ_k λ_k⁻¹ W_k₍₂₎ W_k₍₂₎ᵀ` and `r = Y − W₍₁₎ θ̂₍₁₎` is
//! the GLS residual against the leading `r` columns of every covariate block.
//! `Σ_λ` is never formed: it is block-diagonal plus a rank `p·L0` term, so the
//! Woodbury identity reduces everything to `p·L0`-sized factorizations.
//!
//! `η` uses the closed-form update
//! `η̂_k = L / (Σ_i α_ikᵀ Δ_νk α_ik + tr(H⁻¹ Δ̃_ν⁽ᵏ⁾))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrices;
use crate::error::{FmmError, Result};
use crate::linalg::{block_diag, sqrt_psd, symmetrize, Cholesky};
use crate::solver::{ModelState, Penalties, VarianceState};
use crate::splines::SplineBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SmoothingState {
    pub fn new(lambda: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        if lambda.iter().chain(&eta).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(FmmError::Domain("smoothing parameters must be positive and finite".into()));
        }
        Ok(Self { lambda, eta })
    }

    /// `Δ_β = Diag{λ_k Δ_βk}` and `Δ_ν = Diag{η_k Δ_νk}`.
    pub fn penalties(&self, fixed: &SplineBasis, random: &SplineBasis, p: usize, q: usize) -> Penalties {
        let fp = fixed.penalty().matrix;
        let rp = random.penalty().matrix;
        let fb: Vec<_> = (0..p).map(|k| &fp * self.lambda[k]).collect();
        let rb: Vec<_> = (0..q).map(|k| &rp * self.eta[k]).collect();
        Penalties {
            delta_beta: block_diag(&fb),
            delta_nu: block_diag(&rb),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "values")]
pub enum LambdaRule {
    /// REML search over `log10 λ ∈ [lo, hi]`.
    Reml { log10_bounds: (f64, f64) },
    Fixed(Vec<f64>),
    /// `λ_k = 1 / ‖Δ_βk‖₂`.
    UnitNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "values")]
pub enum EtaRule {
    /// One closed-form step from `η = 1`.
    ClosedForm,
    Fixed(Vec<f64>),
    /// `η_k = 1 / ‖Δ_νk‖₂`.
    UnitNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingMode {
    pub lambda: LambdaRule,
    pub eta: EtaRule,
}

impl Default for SmoothingMode {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::Reml { log10_bounds: DEFAULT_LOG10_BOUNDS },
            eta: EtaRule::ClosedForm,
        }
    }
}

impl SmoothingMode {
    pub fn fixed(lambda: Vec<f64>, eta: Vec<f64>) -> Self {
        Self {
            lambda: LambdaRule::Fixed(lambda),
            eta: EtaRule::Fixed(eta),
        }
    }
}

pub const DEFAULT_LOG10_BOUNDS: (f64, f64) = (-4.0, 8.0);
const GOLDEN_TOLERANCE: f64 = 1e-4;
const MAX_CYCLES: usize = 20;

/// Result of applying a [`SmoothingMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub state: SmoothingState,
    pub lambda_at_boundary: Vec<bool>,
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    nalgebra::SymmetricEigen::new(symmetrize(a)).eigenvalues.amax()
}

fn unit_weight(basis: &SplineBasis) -> Result<f64> {
    let norm = spectral_norm(&basis.penalty().matrix);
    if norm > 0.0 {
        Ok(1.0 / norm)
    } else {
        Err(FmmError::InvalidConfig(format!(
            "order-{} basis has a zero roughness penalty; give the weight explicitly",
            basis.order()
        )))
    }
}

fn check_len(name: &str, values: &[f64], want: usize) -> Result<()> {
    if values.len() != want {
        return Err(FmmError::InvalidConfig(format!(
            "{name} needs {want} values, got {}",
            values.len()
        )));
    }
    Ok(())
}

/// Applies `mode` at the given variance state: `λ` first, then `η` at the
/// selected `λ`.
pub fn resolve(
    mode: &SmoothingMode,
    design: &DesignMatrices,
    fixed: &SplineBasis,
    random: &SplineBasis,
    variance: &VarianceState,
) -> Result<Selection> {
    let (p, q) = (design.p, design.q);
    let (lambda, lambda_at_boundary) = match &mode.lambda {
        LambdaRule::Reml { log10_bounds } => {
            let sel = select_lambda(design, variance, fixed, *log10_bounds)?;
            (sel.lambda, sel.at_boundary)
        }
        LambdaRule::Fixed(v) => {
            check_len("lambda", v, p)?;
            (v.clone(), vec![false; p])
        }
        LambdaRule::UnitNorm => (vec![unit_weight(fixed)?; p], vec![false; p]),
    };
    let eta = match &mode.eta {
        EtaRule::Fixed(v) => {
            check_len("eta", v, q)?;
            v.clone()
        }
        EtaRule::UnitNorm => vec![unit_weight(random)?; q],
        EtaRule::ClosedForm => {
            let start = SmoothingState::new(lambda.clone(), vec![1.0; q])?;
            let penalties = start.penalties(fixed, random, p, q);
            let state = ModelState::new(design, variance, &penalties)?;
            let theta = state.theta(design);
            let alpha = state.alpha(design, &theta);
            update_eta(&alpha, design, variance, random, &start.eta)?
        }
    };
    Ok(Selection {
        state: SmoothingState::new(lambda, eta)?,
        lambda_at_boundary,
    })
}

/// Coefficient map `T` with `B(t)ᵀ T = (1, t, …, t^{r-1}, (t-τ_1)₊^{r-1}, …, (t-τ_{L0})₊^{r-1})`.
///
/// Both sides span the same spline space, so `T` is recovered exactly (up to
/// rounding) by least squares on a grid. In the truncated-power coordinates the
/// leading `r` columns are the polynomials left unpenalized by the roughness
/// penalty, and the trailing `L0` columns carry the iid `1/λ` prior.
pub fn reml_basis_transform(fixed: &SplineBasis) -> Result<DMatrix<f64>> {
    let l = fixed.size();
    let r = fixed.order();
    let interior = &fixed.knots()[r..r + fixed.interior_knot_count()];
    let grid = 10 * l + 20;
    let mut b = DMatrix::zeros(grid, l);
    let mut target = DMatrix::zeros(grid, l);
    for g in 0..grid {
        let t = g as f64 / (grid - 1) as f64;
        b.row_mut(g).copy_from(&fixed.eval(t)?.transpose());
        for j in 0..r {
            target[(g, j)] = t.powi(j as i32);
        }
        for (k, tau) in interior.iter().enumerate() {
            target[(g, r + k)] = if t >= *tau { (t - tau).powi(r as i32 - 1) } else { 0.0 };
        }
    }
    b.svd(true, true)
        .solve(&target, 1e-12)
        .map_err(|e| FmmError::Numerical(format!("spline change of basis failed: {e}")))
}

/// Splits one block of `W` into `(W₍₁₎, W₍₂₎)` after mapping each covariate's
/// `L` columns through `transform`.
fn reml_split(w: &DMatrix<f64>, transform: &DMatrix<f64>, p: usize, order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = transform.nrows();
    let r = order.min(l);
    let mut x = DMatrix::zeros(w.nrows(), p * r);
    let mut z = DMatrix::zeros(w.nrows(), p * (l - r));
    for k in 0..p {
        let mapped = w.columns(k * l, l) * transform;
        x.columns_mut(k * r, r).copy_from(&mapped.columns(0, r));
        z.columns_mut(k * (l - r), l - r).copy_from(&mapped.columns(r, l - r));
    }
    (x, z)
}

/// Precomputed pieces of `ℓ_m` that do not depend on `λ`.
pub struct RemlObjective<'a> {
    design: &'a DesignMatrices,
    /// Per-subject factorization of `R_i + U_i Ω U_iᵀ`.
    blocks: Vec<Cholesky>,
    log_det_d: f64,
    l0: usize,
    // D⁻¹-weighted Gram pieces with Z = W₍₂₎ and X = W₍₁₎
    ztdz: DMatrix<f64>,
    ztdx: DMatrix<f64>,
    xtdx: DMatrix<f64>,
    ztdy: DVector<f64>,
    xtdy: DVector<f64>,
    ytdy: f64,
}

impl<'a> RemlObjective<'a> {
    pub fn new(design: &'a DesignMatrices, variance: &VarianceState, fixed: &SplineBasis) -> Result<Self> {
        let transform = reml_basis_transform(fixed)?;
        let l0 = design.fixed_size - fixed.order().min(design.fixed_size);
        let (nx, nz) = (design.p * (design.fixed_size - l0), design.p * l0);
        let mut ztdz = DMatrix::zeros(nz, nz);
        let mut ztdx = DMatrix::zeros(nz, nx);
        let mut xtdx = DMatrix::zeros(nx, nx);
        let mut ztdy = DVector::zeros(nz);
        let mut xtdy = DVector::zeros(nx);
        let mut ytdy = 0.0;
        let mut log_det_d = 0.0;
        let mut blocks = Vec::with_capacity(design.n());
        for i in 0..design.n() {
            let u = &design.u_blocks[i];
            let m = u.nrows();
            let d = symmetrize(&(u * &variance.omega * u.transpose())) + DMatrix::identity(m, m) * variance.sigma_e2;
            let c = Cholesky::new(&d).map_err(|_| {
                FmmError::Numerical("R + UΩUᵀ is not positive definite in the REML objective".into())
            })?;
            let (x, z) = reml_split(&design.w_blocks[i], &transform, design.p, fixed.order());
            let y = &design.y_blocks[i];
            let dz = c.solve_mat(&z);
            let dx = c.solve_mat(&x);
            let dy = c.solve_vec(y);
            ztdz += z.transpose() * &dz;
            ztdx += z.transpose() * &dx;
            xtdx += x.transpose() * &dx;
            ztdy += z.transpose() * &dy;
            xtdy += x.transpose() * &dy;
            ytdy += y.dot(&dy);
            log_det_d += c.log_det();
            blocks.push(c);
        }
        Ok(Self {
            design,
            blocks,
            log_det_d,
            l0,
            ztdz: symmetrize(&ztdz),
            ztdx,
            xtdx: symmetrize(&xtdx),
            ztdy,
            xtdy,
            ytdy,
        })
    }

    pub fn eval(&self, lambda: &[f64]) -> Result<f64> {
        let p = self.design.p;
        if lambda.len() != p || lambda.iter().any(|v| !(*v > 0.0)) {
            return Err(FmmError::Domain(format!("invalid smoothing weights {lambda:?}")));
        }
        let nz = self.ztdz.nrows();
        // Σ_λ⁻¹ = D⁻¹ − D⁻¹ZS K⁻¹ SZᵀD⁻¹ with K = I + S ZᵀD⁻¹Z S and S = diag(λ_k^{-1/2} I);
        // K has every eigenvalue ≥ 1 whatever the spread of λ
        let scale = DVector::from_iterator(nz, lambda.iter().flat_map(|lam| std::iter::repeat_n(lam.sqrt().recip(), self.l0)));
        let mut k = DMatrix::from_fn(nz, nz, |a, b| scale[a] * self.ztdz[(a, b)] * scale[b]);
        for j in 0..nz {
            k[(j, j)] += 1.0;
        }
        let (log_det_sigma, xsx, xsy, ysy) = if nz == 0 {
            (self.log_det_d, self.xtdx.clone(), self.xtdy.clone(), self.ytdy)
        } else {
            let kc = Cholesky::new(&k).map_err(|_| {
                FmmError::Numerical(format!("Σ_λ is not positive definite at λ = {lambda:?}"))
            })?;
            let szx = DMatrix::from_fn(nz, self.ztdx.ncols(), |a, b| scale[a] * self.ztdx[(a, b)]);
            let szy = self.ztdy.component_mul(&scale);
            let kzx = kc.solve_mat(&szx);
            let kzy = kc.solve_vec(&szy);
            (
                self.log_det_d + kc.log_det(),
                symmetrize(&(&self.xtdx - szx.transpose() * &kzx)),
                &self.xtdy - szx.transpose() * &kzy,
                self.ytdy - szy.dot(&kzy),
            )
        };
        let xc = Cholesky::new(&xsx)
            .map_err(|_| FmmError::Numerical(format!("W₍₁₎ᵀΣ_λ⁻¹W₍₁₎ is singular at λ = {lambda:?}")))?;
        let theta1 = xc.solve_vec(&xsy);
        // rᵀΣ⁻¹r with r = Y − W₍₁₎θ₁ and θ₁ the GLS solution
        let quad = ysy - xsy.dot(&theta1);
        let value = log_det_sigma + quad + xc.log_det();
        if !value.is_finite() {
            return Err(FmmError::Numerical(format!("REML objective is not finite at λ = {lambda:?}")));
        }
        Ok(value)
    }

    pub fn subject_count(&self) -> usize {
        self.blocks.len()
    }
}

pub fn reml_lambda_objective(
    lambda: &[f64],
    design: &DesignMatrices,
    variance: &VarianceState,
    fixed: &SplineBasis,
) -> Result<f64> {
    RemlObjective::new(design, variance, fixed)?.eval(lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub at_boundary: Vec<bool>,
    pub evaluations: usize,
}

/// Coordinate-wise golden-section search on `log10 λ`, cycled until the
/// relative objective change drops below `1e-6` (at most 20 cycles). The best
/// probed point is returned.
pub fn select_lambda(
    design: &DesignMatrices,
    variance: &VarianceState,
    fixed: &SplineBasis,
    log10_bounds: (f64, f64),
) -> Result<LambdaSelection> {
    let (lo, hi) = log10_bounds;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(FmmError::InvalidConfig(format!("invalid log10 λ bounds ({lo}, {hi})")));
    }
    let objective = RemlObjective::new(design, variance, fixed)?;
    let p = design.p;
    let start = 0.0f64.clamp(lo, hi);
    let mut best_x = vec![start; p];
    let to_lambda = |x: &[f64]| x.iter().map(|v| 10f64.powf(*v)).collect::<Vec<_>>();
    let mut best = objective.eval(&to_lambda(&best_x))?;
    let mut evaluations = 1;

    for _ in 0..MAX_CYCLES {
        let before = best;
        for k in 0..p {
            let mut probe = |v: f64, best: &mut f64, best_x: &mut Vec<f64>| -> Result<f64> {
                let mut x = best_x.clone();
                x[k] = v;
                let f = objective.eval(&to_lambda(&x))?;
                evaluations += 1;
                if f < *best {
                    *best = f;
                    *best_x = x;
                }
                Ok(f)
            };
            probe(lo, &mut best, &mut best_x)?;
            probe(hi, &mut best, &mut best_x)?;
            let ratio = (5f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = (lo, hi);
            let mut c = b - ratio * (b - a);
            let mut d = a + ratio * (b - a);
            let mut fc = probe(c, &mut best, &mut best_x)?;
            let mut fd = probe(d, &mut best, &mut best_x)?;
            while b - a > GOLDEN_TOLERANCE {
                if fc <= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - ratio * (b - a);
                    fc = probe(c, &mut best, &mut best_x)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + ratio * (b - a);
                    fd = probe(d, &mut best, &mut best_x)?;
                }
            }
        }
        if (before - best).abs() <= 1e-6 * best.abs().max(1e-300) {
            break;
        }
    }
    let at_boundary = best_x
        .iter()
        .map(|x| (x - lo).abs() <= GOLDEN_TOLERANCE || (hi - x).abs() <= GOLDEN_TOLERANCE)
        .collect();
    Ok(LambdaSelection {
        lambda: to_lambda(&best_x),
        objective: best,
        at_boundary,
        evaluations,
    })
}

/// Closed-form `η` update. `H_i = U_iᵀ R_i⁻¹ U_i + Ω⁻¹ + Δ_ν`, evaluated at the
/// current `eta`; the `Ω⁻¹` term keeps `H_i` invertible when a subject has
/// fewer observations than the penalty null space.
pub fn update_eta(
    alpha: &[DVector<f64>],
    design: &DesignMatrices,
    variance: &VarianceState,
    random: &SplineBasis,
    eta: &[f64],
) -> Result<Vec<f64>> {
    let (q, l) = (design.q, design.random_size);
    if alpha.len() != design.n() || eta.len() != q {
        return Err(FmmError::Shape("η update needs one α per subject and one η per random covariate".into()));
    }
    let pen = random.penalty().matrix;
    let delta_nu = block_diag(&(0..q).map(|k| &pen * eta[k]).collect::<Vec<_>>());
    let root = sqrt_psd(&variance.omega);
    let qd = design.random_dim();
    let mut quad = vec![0.0; q];
    let mut trace = vec![0.0; q];
    for (i, u) in design.u_blocks.iter().enumerate() {
        for k in 0..q {
            let a = alpha[i].rows(k * l, l);
            quad[k] += a.dot(&(&pen * a));
        }
        // H_i⁻¹ = Ω^½ (I + Ω^½ C Ω^½)⁻¹ Ω^½ with C = UᵀU/σ² + Δ_ν
        let c = u.transpose() * u / variance.sigma_e2 + &delta_nu;
        let inner = symmetrize(&(DMatrix::identity(qd, qd) + &root * c * &root));
        let h_inv = &root * Cholesky::new(&inner)?.solve_mat(&root);
        for k in 0..q {
            trace[k] += crate::linalg::trace_of_product(&h_inv.view((k * l, k * l), (l, l)).into_owned(), &pen);
        }
    }
    (0..q)
        .map(|k| {
            let denom = quad[k] + trace[k];
            if denom > 0.0 && denom.is_finite() {
                Ok(l as f64 / denom)
            } else {
                Err(FmmError::DegenerateSmoothing(k))
            }
        })
        .collect()
}
