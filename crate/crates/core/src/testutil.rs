//! Small random instances shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::design::{build_design, DesignMatrices, LongitudinalDataset, SubjectRecord};
use crate::linalg::block_diag;
use crate::solver::{Penalties, VarianceState};
use crate::splines::SplineBasis;

pub fn dataset(n: usize, m: usize, p: usize, q: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|i| {
            let mi = 1 + (i + m) % m.max(1);
            let times: Vec<f64> = (0..mi).map(|_| rng.random::<f64>()).collect();
            let x = DMatrix::from_fn(mi, p, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() - 0.5 });
            let z = DMatrix::from_fn(mi, q, |_, _| 0.5 + rng.random::<f64>());
            // random intercept and slope carried by the first random covariate
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let y: Vec<f64> = times
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (3.0 * t).sin() + z[(j, 0)] * (a + b * t) + 0.3 * e
                })
                .collect();
            let mut order: Vec<usize> = (0..mi).collect();
            order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
            SubjectRecord {
                id: format!("s{i}"),
                times: order.iter().map(|&j| times[j]).collect(),
                y: order.iter().map(|&j| y[j]).collect(),
                x: DMatrix::from_fn(mi, p, |r, c| x[(order[r], c)]),
                z: DMatrix::from_fn(mi, q, |r, c| z[(order[r], c)]),
            }
        })
        .collect();
    LongitudinalDataset::new(subjects).unwrap()
}

pub fn design(n: usize, m: usize, order: usize, knots: usize, seed: u64) -> (DesignMatrices, SplineBasis) {
    let basis = SplineBasis::new(order, knots).unwrap();
    let data = dataset(n, m, 1, 1, seed);
    (build_design(&data, &basis, &basis).unwrap(), basis)
}

pub fn spd(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() + DMatrix::identity(k, k) * 0.3
}

pub fn variance(k: usize, sigma_e2: f64, seed: u64) -> VarianceState {
    VarianceState::new(sigma_e2, spd(k, seed)).unwrap()
}

pub fn penalties(basis: &SplineBasis, lambda: f64, eta: f64, p: usize, q: usize) -> Penalties {
    let pen = basis.penalty().matrix;
    Penalties {
        delta_beta: block_diag(&vec![&pen * lambda; p]),
        delta_nu: block_diag(&vec![&pen * eta; q]),
    }
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().unwrap()
}

/// Dense `Σ* = U Ω* Uᵀ + σ² I` with `Ω* = (Ω⁻¹ + Δ_ν)⁻¹` formed by plain inverses.
pub fn dense_sigma_star(d: &DesignMatrices, v: &VarianceState, pen: &Penalties) -> (DMatrix<f64>, DMatrix<f64>) {
    let os = dense_inverse(&(dense_inverse(&v.omega) + &pen.delta_nu));
    let blocks: Vec<DMatrix<f64>> = vec![os.clone(); d.n()];
    let u = d.u_dense();
    let n = d.total_rows();
    (&u * block_diag(&blocks) * u.transpose() + DMatrix::identity(n, n) * v.sigma_e2, os)
}

pub fn dense_sigma(d: &DesignMatrices, v: &VarianceState) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = vec![v.omega.clone(); d.n()];
    let u = d.u_dense();
    let n = d.total_rows();
    &u * block_diag(&blocks) * u.transpose() + DMatrix::identity(n, n) * v.sigma_e2
}

pub fn stack(v: &[DVector<f64>]) -> DVector<f64> {
    let len = v.iter().map(|x| x.len()).sum();
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for x in v {
        out.rows_mut(off, x.len()).copy_from(x);
        off += x.len();
    }
    out
}
