//! Mixed-effect prediction and its mean squared error.
//!
//! For a target `A = lᵀθ + dᵀα` the naive predictor is `Ã = lᵀθ̃ + dᵀα̃`.
//! With `s = Σ*⁻¹ U Ω* d`, `a = l − Wᵀs` and `H = (WᵀΣ*⁻¹W + Δ_β)⁻¹`, the
//! penalty bias is `−aᵀ H Δ_β θ` and the corrected predictor adds
//! `aᵀ H Δ_β θ̃` back.
//!
//! The plug-in MSE adds the variance due to estimating the variance
//! components on top of the first-order MSE. The workspace below is written
//! for `g` components; the fitted model has one (`σ_e²`, `∂Σ*/∂σ_e² = I`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{build_target, DesignMatrices, MixedEffectTarget, TargetVectors};
use crate::error::{FmmError, Result};
use crate::linalg::{block_diag, symmetrize, trace_of_product, Cholesky};
use crate::solver::{omega_star, FittedModel, ModelState, Penalties, VarianceState};
use crate::splines::SplineBasis;

/// Slack below zero tolerated for an MSE before it is reported as invalid.
pub const MSE_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub target: MixedEffectTarget,
    pub a_naive: f64,
    pub a_corrected: f64,
    pub bias_estimate: f64,
    pub mse_first_order: f64,
    pub mse_plugin: f64,
    pub interval: (f64, f64),
    /// Set when a tiny negative plug-in MSE was clamped to zero.
    pub mse_clamped: bool,
}

/// `(Â − 2√MSE, Â + 2√MSE)`. Values in `[−1e-10, 0)` are clamped to zero.
pub fn prediction_interval(a_corrected: f64, mse_plugin: f64) -> Result<(f64, f64)> {
    if mse_plugin.is_nan() || mse_plugin < -MSE_SLACK {
        return Err(FmmError::InvalidMse(mse_plugin));
    }
    let half = 2.0 * mse_plugin.max(0.0).sqrt();
    Ok((a_corrected - half, a_corrected + half))
}

/// Per-target pieces shared by the predictors and MSE terms.
#[derive(Debug, Clone)]
pub struct TargetTerms {
    /// `s = Σ*⁻¹ U Ω* d`, length `N`.
    pub s: DVector<f64>,
    /// `a = l − Wᵀ s`
    pub a: DVector<f64>,
    /// `U Ω d`, length `N`.
    pub u_omega_d: DVector<f64>,
}

/// Everything in the MSE expressions that does not depend on the target.
#[derive(Debug, Clone)]
pub struct MseWorkspace {
    pub design: DesignMatrices,
    pub variance: VarianceState,
    pub omega_star: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub alpha: Vec<DVector<f64>>,
    /// `Σ = U Ω Uᵀ + σ_e² I`
    pub sigma: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    /// `Σ*⁻¹`
    pub sigma_star_inv: DMatrix<f64>,
    /// Block-diagonal `Q = Σ*⁻¹ − Σ⁻¹`, one block per subject.
    pub q_blocks: Vec<DMatrix<f64>>,
    /// `(WᵀΣ⁻¹W)⁻¹`
    pub m_inv: DMatrix<f64>,
    /// `(WᵀΣ*⁻¹W + Δ_β)⁻¹`
    pub h: DMatrix<f64>,
    /// `H Δ_β θ̃`
    pub h_delta_theta: DVector<f64>,
    /// `M⁻¹ (I + B M⁻¹)⁻¹ B M⁻¹`, `B = WᵀQW + Δ_β`, so `H = M⁻¹ − D`.
    pub dmat: DMatrix<f64>,
    /// `Δ₁ = M⁻¹WᵀQ − D Wᵀ(Σ⁻¹ + Q)`, `pL × N`.
    pub delta1: DMatrix<f64>,
    /// `Σ*⁻¹ W`
    pub sstar_w: DMatrix<f64>,
    /// `Σ⁻¹ W M⁻¹`
    pub sinv_w_minv: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `∂Σ*/∂σ_k`
    pub derivs: Vec<DMatrix<f64>>,
    /// `G_k = P (∂Σ*/∂σ_k) P`
    pub g_mats: Vec<DMatrix<f64>>,
    /// `(2 tr(G_i Σ G_j Σ))_{ij}`
    pub sigma_w: DMatrix<f64>,
    /// `J_k = 2 P (∂Σ*/∂σ_k) P W θ̃` as columns.
    pub j_vecs: DMatrix<f64>,
    /// Jacobian of the variance score and its inverse.
    pub djac: DMatrix<f64>,
    pub djac_inv: DMatrix<f64>,
}

/// `Σ_i⁻¹ U_i Ω (I + Δ_ν Ω − Δ_ν Ω U_iᵀ Σ_i⁻¹ U_i Ω)⁻¹ Δ_ν Ω U_iᵀ Σ_i⁻¹`,
/// which equals `Σ*_i⁻¹ − Σ_i⁻¹`.
pub fn q_block(
    u_i: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    delta_nu: &DMatrix<f64>,
    sigma_inv_i: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = omega.nrows();
    let dno = delta_nu * omega;
    let inner = DMatrix::identity(k, k) + &dno - &dno * u_i.transpose() * sigma_inv_i * u_i * omega;
    let lu = inner.lu();
    let right = &dno * u_i.transpose() * sigma_inv_i;
    let solved = lu
        .solve(&right)
        .ok_or_else(|| FmmError::Numerical("singular matrix in the Σ* correction".into()))?;
    Ok(symmetrize(&(sigma_inv_i * u_i * omega * solved)))
}

/// `∂Q/∂σ_e²`, the slope of the variance score at the current state.
pub fn jacobian_d(design: &DesignMatrices, variance: &VarianceState, penalties: &Penalties) -> Result<DMatrix<f64>> {
    // with ∂Σ/∂σ_e² = ∂Σ*/∂σ_e² = I and ∂P/∂σ_e² = −P², the score
    // −tr(PΣP) + YᵀP²Y has slope 2 tr(P²ΣP) − tr(P²) − 2 (PY)ᵀP(PY)
    let state = ModelState::new(design, variance, penalties)?;
    let p = state.projection(design);
    let sigma = block_diag(
        &design
            .u_blocks
            .iter()
            .map(|u| {
                let m = u.nrows();
                symmetrize(&(u * &variance.omega * u.transpose())) + DMatrix::identity(m, m) * variance.sigma_e2
            })
            .collect::<Vec<_>>(),
    );
    let psp = &p * &sigma * &p;
    let py = &p * &design.y;
    let slope = 2.0 * trace_of_product(&p, &psp) - p.norm_squared() - 2.0 * py.dot(&(&p * &py));
    if !slope.is_finite() {
        return Err(FmmError::Numerical("variance score slope is not finite".into()));
    }
    Ok(DMatrix::from_element(1, 1, slope))
}

impl MseWorkspace {
    pub fn from_fit(model: &FittedModel, design: &DesignMatrices) -> Result<Self> {
        Self::new(design, &model.variance, &model.penalties()?)
    }

    pub fn new(design: &DesignMatrices, variance: &VarianceState, penalties: &Penalties) -> Result<Self> {
        let state = ModelState::new(design, variance, penalties)?;
        let theta = state.theta(design);
        let alpha = state.alpha(design, &theta);
        let omega_star = omega_star(&variance.omega, &penalties.delta_nu)?;
        let n = design.total_rows();
        let fd = design.fixed_dim();

        let mut sigma_blocks = Vec::with_capacity(design.n());
        let mut sigma_inv_blocks = Vec::with_capacity(design.n());
        let mut q_blocks = Vec::with_capacity(design.n());
        for (i, u) in design.u_blocks.iter().enumerate() {
            let m = u.nrows();
            let s = symmetrize(&(u * &variance.omega * u.transpose())) + DMatrix::identity(m, m) * variance.sigma_e2;
            let s_inv = Cholesky::new(&s)?.inverse();
            q_blocks.push(q_block(u, &variance.omega, &penalties.delta_nu, &s_inv)?);
            debug_assert_eq!(state.sigma_star[i].nrows(), m);
            sigma_blocks.push(s);
            sigma_inv_blocks.push(s_inv);
        }
        let sigma = block_diag(&sigma_blocks);
        let sigma_inv = block_diag(&sigma_inv_blocks);
        let sigma_star_inv = block_diag(&state.sigma_star_chol.iter().map(|c| c.inverse()).collect::<Vec<_>>());
        let q = block_diag(&q_blocks);

        let w = &design.w;
        let sinv_w = &sigma_inv * w;
        let m_mat = symmetrize(&(w.transpose() * &sinv_w));
        let m_inv = Cholesky::new(&m_mat)?.inverse();
        let h = state.normal_chol.inverse();
        let h_delta_theta = &h * (&penalties.delta_beta * &theta);

        let b = symmetrize(&(w.transpose() * &q * w + &penalties.delta_beta));
        let inner = DMatrix::identity(fd, fd) + &b * &m_inv;
        let inner_inv = inner
            .lu()
            .try_inverse()
            .ok_or_else(|| FmmError::Numerical("I + B M⁻¹ is singular".into()))?;
        let dmat = &m_inv * inner_inv * &b * &m_inv;
        let sstar_w = &sigma_star_inv * w;
        let delta1 = &m_inv * w.transpose() * &q - &dmat * sstar_w.transpose();
        let sinv_w_minv = &sinv_w * &m_inv;

        let p = state.projection(design);
        let derivs = vec![DMatrix::identity(n, n)];
        let g_mats: Vec<DMatrix<f64>> = derivs.iter().map(|d| symmetrize(&(&p * d * &p))).collect();
        let g = derivs.len();
        let g_sigma: Vec<DMatrix<f64>> = g_mats.iter().map(|gm| gm * &sigma).collect();
        let sigma_w = DMatrix::from_fn(g, g, |i, j| 2.0 * trace_of_product(&g_sigma[i], &g_sigma[j]));
        // G_k W θ̃ = P D_k P W θ̃ with P W θ̃ = Σ*⁻¹ W H Δ_β θ̃; forming P W directly
        // leaves a cancellation residual that the Jacobian inverse amplifies
        let pw_theta = &sstar_w * &h_delta_theta;
        let mut j_vecs = DMatrix::zeros(n, g);
        for (k, d) in derivs.iter().enumerate() {
            j_vecs.set_column(k, &(&p * (d * &pw_theta) * 2.0));
        }
        let djac = jacobian_d(design, variance, penalties)?;
        let djac_inv = djac.clone().lu().try_inverse().ok_or(FmmError::SingularJacobian)?;
        if djac_inv.iter().any(|v| !v.is_finite()) {
            return Err(FmmError::SingularJacobian);
        }

        Ok(Self {
            design: design.clone(),
            variance: variance.clone(),
            omega_star,
            theta,
            alpha,
            sigma,
            sigma_inv,
            sigma_star_inv,
            q_blocks,
            m_inv,
            h,
            h_delta_theta,
            dmat,
            delta1,
            sstar_w,
            sinv_w_minv,
            p,
            derivs,
            g_mats,
            sigma_w,
            j_vecs,
            djac,
            djac_inv,
        })
    }

    pub fn components(&self) -> usize {
        self.derivs.len()
    }

    fn check(&self, tv: &TargetVectors) -> Result<()> {
        if tv.l.len() != self.design.fixed_dim() {
            return Err(FmmError::Shape(format!(
                "target l has length {}, model expects {}",
                tv.l.len(),
                self.design.fixed_dim()
            )));
        }
        for (&i, di) in &tv.d {
            if i >= self.design.n() || di.len() != self.design.random_dim() {
                return Err(FmmError::Shape(format!("target weight block for subject {i} does not fit the model")));
            }
        }
        Ok(())
    }

    pub fn terms(&self, tv: &TargetVectors) -> Result<TargetTerms> {
        self.check(tv)?;
        let n = self.design.total_rows();
        let mut s = DVector::zeros(n);
        let mut u_omega_d = DVector::zeros(n);
        for (&i, di) in &tv.d {
            let u = &self.design.u_blocks[i];
            let off = self.design.offsets[i];
            let m = u.nrows();
            let sstar_i = self.sigma_star_inv.view((off, off), (m, m));
            s.rows_mut(off, m).copy_from(&(sstar_i * (u * (&self.omega_star * di))));
            u_omega_d.rows_mut(off, m).copy_from(&(u * (&self.variance.omega * di)));
        }
        let a = &tv.l - self.design.w.transpose() * &s;
        Ok(TargetTerms { s, a, u_omega_d })
    }

    pub fn predict_naive(&self, tv: &TargetVectors) -> Result<f64> {
        self.check(tv)?;
        let mut v = tv.l.dot(&self.theta);
        for (&i, di) in &tv.d {
            v += di.dot(&self.alpha[i]);
        }
        Ok(v)
    }

    /// `−lᵀ H Δ_β θ + sᵀ W H Δ_β θ` for a reference `θ`.
    pub fn bias_naive(&self, tv: &TargetVectors, theta_ref: &DVector<f64>, penalties: &Penalties) -> Result<f64> {
        let t = self.terms(tv)?;
        if theta_ref.len() != self.design.fixed_dim() {
            return Err(FmmError::Shape("reference θ has the wrong length".into()));
        }
        Ok(-t.a.dot(&(&self.h * (&penalties.delta_beta * theta_ref))))
    }

    /// `aᵀ H Δ_β θ̃`, the amount the corrected predictor adds.
    pub fn correction(&self, tv: &TargetVectors) -> Result<f64> {
        Ok(self.terms(tv)?.a.dot(&self.h_delta_theta))
    }

    pub fn predict_corrected(&self, tv: &TargetVectors) -> Result<f64> {
        Ok(self.predict_naive(tv)? + self.correction(tv)?)
    }

    pub fn mse_first_order(&self, tv: &TargetVectors) -> Result<f64> {
        let t = self.terms(tv)?;
        Ok(self.first_order_from_terms(tv, &t))
    }

    fn first_order_from_terms(&self, tv: &TargetVectors, t: &TargetTerms) -> f64 {
        let a = &t.a;
        let t1 = a.dot(&(&self.m_inv * a));
        let mut t2 = 0.0;
        for (&i, di) in &tv.d {
            let off = self.design.offsets[i];
            let m = self.design.u_blocks[i].nrows();
            let uod = t.u_omega_d.rows(off, m);
            let sinv_i = self.sigma_inv.view((off, off), (m, m));
            t2 += di.dot(&(&self.variance.omega * di)) - uod.dot(&(sinv_i * uod));
        }
        let e = self.delta1.transpose() * a;
        let sigma_e = &self.sigma * &e;
        let t3 = e.dot(&sigma_e);
        let t4 = 2.0 * sigma_e.dot(&(&t.s + &self.sinv_w_minv * a));
        let t5 = -2.0 * e.dot(&t.u_omega_d);
        t1 + t2 + t3 + t4 + t5
    }

    /// Terms added to the first-order MSE for estimating the variance
    /// components: `(V₁, V₂ trace part, V₂ cross part)`.
    pub fn plugin_terms(&self, tv: &TargetVectors) -> Result<(f64, f64, f64)> {
        let t = self.terms(tv)?;
        Ok(self.plugin_from_terms(&t))
    }

    fn plugin_from_terms(&self, t: &TargetTerms) -> (f64, f64, f64) {
        let g = self.components();
        // c = s + Kᵀa, K = H Wᵀ Σ*⁻¹
        let c = &t.s + &self.sstar_w * (&self.h * &t.a);
        let mut b = DMatrix::zeros(c.len(), g);
        for k in 0..g {
            b.set_column(k, &(-(&self.p * (&self.derivs[k] * &c))));
        }
        let sigma_b = &self.sigma * &b;
        let x = &self.djac_inv * (self.j_vecs.transpose() * &sigma_b);
        let v1 = 2.0 * (&x * &x).trace() + x.trace().powi(2);

        let lam = &b * &self.djac_inv;
        let sigma_lam = &self.sigma * &lam;
        let v2a = trace_of_product(&(lam.transpose() * &sigma_lam), &self.sigma_w);

        // u[j][k] = G_k Σ λ_j
        let u: Vec<Vec<DVector<f64>>> = (0..g)
            .map(|j| (0..g).map(|k| &self.g_mats[k] * sigma_lam.column(j)).collect())
            .collect();
        let mut v2b = 0.0;
        for j in 0..g {
            for l in 0..g {
                let right = &self.sigma * &u[l][j];
                v2b += u[j][j].dot(&right) + u[j][l].dot(&right);
            }
        }
        (v1, v2a, 4.0 * v2b)
    }

    pub fn mse_plugin(&self, tv: &TargetVectors) -> Result<f64> {
        let t = self.terms(tv)?;
        let (v1, v2a, v2b) = self.plugin_from_terms(&t);
        Ok(self.first_order_from_terms(tv, &t) + v1 + v2a + v2b)
    }

    /// Naive and corrected predictions, bias estimate, both MSEs and the
    /// interval for one target.
    pub fn predict(&self, target: &MixedEffectTarget, tv: &TargetVectors) -> Result<PredictionResult> {
        let t = self.terms(tv)?;
        let a_naive = self.predict_naive(tv)?;
        let correction = t.a.dot(&self.h_delta_theta);
        let a_corrected = a_naive + correction;
        let mse_first_order = self.first_order_from_terms(tv, &t);
        let (v1, v2a, v2b) = self.plugin_from_terms(&t);
        let mse_plugin = mse_first_order + v1 + v2a + v2b;
        let interval = prediction_interval(a_corrected, mse_plugin)?;
        Ok(PredictionResult {
            target: target.clone(),
            a_naive,
            a_corrected,
            bias_estimate: -correction,
            mse_first_order,
            mse_plugin,
            interval,
            mse_clamped: mse_plugin < 0.0,
        })
    }
}

/// Fitted model plus its MSE workspace, ready to answer target queries.
pub struct Predictor {
    pub workspace: MseWorkspace,
    fixed_basis: SplineBasis,
    random_basis: SplineBasis,
}

impl Predictor {
    pub fn new(model: &FittedModel, design: &DesignMatrices) -> Result<Self> {
        let (fixed_basis, random_basis) = model.bases()?;
        Ok(Self {
            workspace: MseWorkspace::from_fit(model, design)?,
            fixed_basis,
            random_basis,
        })
    }

    pub fn target_vectors(&self, target: &MixedEffectTarget) -> Result<TargetVectors> {
        let d = &self.workspace.design;
        if target.l0.len() != d.p {
            return Err(FmmError::Shape(format!(
                "target has {} fixed weights, model has p = {}",
                target.l0.len(),
                d.p
            )));
        }
        if target.d0.values().any(|v| v.len() != d.q) {
            return Err(FmmError::Shape(format!("target random weights must have q = {} entries", d.q)));
        }
        build_target(target, &self.fixed_basis, &self.random_basis, d.n())
    }

    pub fn predict(&self, target: &MixedEffectTarget) -> Result<PredictionResult> {
        let tv = self.target_vectors(target)?;
        self.workspace.predict(target, &tv)
    }
}
