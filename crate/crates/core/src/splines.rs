//! Clamped B-spline bases on `[0, 1]` and their roughness penalties.
//!
//! A basis of order `r` (degree `r - 1`) with `L0` equally spaced interior
//! knots has `L = L0 + r` functions. Values and derivatives are computed with
//! the Cox-de Boor triangular recursion. At an interior knot derivatives are
//! right limits; at `t = 1` they are left limits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    order: usize,
    interior_knot_count: usize,
    knots: Vec<f64>,
}

/// Integrated outer product of second derivatives, `∫₀¹ B″(t) B″(t)ᵀ dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
}

/// Builds a clamped basis of the given order with equally spaced interior knots.
pub fn make_basis(order: usize, interior_knot_count: usize) -> Result<SplineBasis> {
    SplineBasis::new(order, interior_knot_count)
}

pub fn eval_basis(basis: &SplineBasis, t: f64) -> Result<DVector<f64>> {
    basis.eval(t)
}

pub fn eval_basis_d2(basis: &SplineBasis, t: f64) -> Result<DVector<f64>> {
    basis.eval_derivative(t, 2)
}

pub fn penalty_matrix(basis: &SplineBasis) -> PenaltyMatrix {
    basis.penalty()
}

impl SplineBasis {
    pub fn new(order: usize, interior_knot_count: usize) -> Result<Self> {
        if order == 0 {
            return Err(FmmError::InvalidConfig(
                "spline order must be at least 1".into(),
            ));
        }
        let mut knots = Vec::with_capacity(interior_knot_count + 2 * order);
        knots.extend(std::iter::repeat_n(0.0, order));
        let spacing = 1.0 / (interior_knot_count + 1) as f64;
        knots.extend((1..=interior_knot_count).map(|i| i as f64 * spacing));
        knots.extend(std::iter::repeat_n(1.0, order));
        Ok(Self {
            order,
            interior_knot_count,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interior_knot_count(&self) -> usize {
        self.interior_knot_count
    }

    /// Number of basis functions `L`.
    pub fn size(&self) -> usize {
        self.interior_knot_count + self.order
    }

    /// Full clamped knot vector of length `L + r`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Distinct knot locations `0 = τ₀ < τ₁ < … < τ_{L0+1} = 1`.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.knots[self.order - 1..=self.size()].to_vec()
    }

    /// Greville abscissae `ξ_j = (t_{j+1} + … + t_{j+r−1}) / (r − 1)`; for
    /// `r ≥ 2`, `Σ_j ξ_j B_j(t) = t`.
    pub fn greville(&self) -> Vec<f64> {
        let d = self.order.saturating_sub(1).max(1);
        (0..self.size())
            .map(|j| self.knots[j + 1..=j + d].iter().sum::<f64>() / d as f64)
            .collect()
    }

    fn check_domain(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FmmError::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Index `μ` of the knot span containing `t`, with `knots[μ] <= t < knots[μ+1]`
    /// except at `t = 1`, which maps to the last non-empty span.
    fn span(&self, t: f64) -> usize {
        let last = self.size() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        let degree = self.order - 1;
        // largest μ in [degree, last] with knots[μ] <= t
        let mut lo = degree;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.eval_derivative(t, 0)
    }

    pub fn eval_d2(&self, t: f64) -> Result<DVector<f64>> {
        self.eval_derivative(t, 2)
    }

    /// Values of the `deriv`-th derivative of every basis function at `t`.
    pub fn eval_derivative(&self, t: f64, deriv: usize) -> Result<DVector<f64>> {
        Self::check_domain(t)?;
        let span = self.span(t);
        let local = self.local_derivatives(span, t, deriv);
        let degree = self.order - 1;
        let mut out = DVector::zeros(self.size());
        if deriv <= degree {
            for (j, v) in local[deriv].iter().enumerate() {
                out[span - degree + j] = *v;
            }
        }
        Ok(out)
    }

    /// Derivatives `0..=n` of the `r` functions that are nonzero on `span`
    /// (indices `span - degree ..= span`). Row `k` holds the `k`-th derivative.
    fn local_derivatives(&self, span: usize, t: f64, n: usize) -> Vec<Vec<f64>> {
        let p = self.order - 1;
        let u = &self.knots;
        let n = n.min(p);

        // ndu: upper triangle holds basis values, lower triangle knot differences
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; n + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }

        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=n {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }

        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    /// Roughness penalty `∫₀¹ B″ B″ᵀ dt`, integrated span by span with a
    /// Gauss-Legendre rule that is exact for the piecewise-polynomial integrand.
    pub fn penalty(&self) -> PenaltyMatrix {
        let size = self.size();
        let mut matrix = DMatrix::zeros(size, size);
        if self.order <= 2 {
            return PenaltyMatrix { matrix };
        }
        // integrand degree 2(r - 3) <= 2(r - 2); n nodes are exact to degree 2n - 1
        let nodes = (2 * (self.order - 2) + 1).div_ceil(2) + 1;
        let (xs, ws) = gauss_legendre(nodes);
        let degree = self.order - 1;
        let breaks = self.breakpoints();
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let span = self.span(mid);
            for (x, wt) in xs.iter().zip(&ws) {
                let t = mid + half * x;
                let local = self.local_derivatives(span, t, 2);
                let d2 = &local[2];
                let base = span - degree;
                for i in 0..=degree {
                    for j in 0..=degree {
                        matrix[(base + i, base + j)] += wt * half * d2[i] * d2[j];
                    }
                }
            }
        }
        // exact symmetry
        let sym = (&matrix + matrix.transpose()) * 0.5;
        PenaltyMatrix { matrix: sym }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // after the loop: p1 = P_n(x), p0 = P_{n-1}(x)
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        xs[i] = -x;
        xs[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}
