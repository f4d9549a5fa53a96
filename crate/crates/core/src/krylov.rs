//! Arnoldi approximation of `expm(tA) v` for matrix-free operators.
//!
//! The time interval is covered in substeps; a substep of length `τ` is
//! accepted when the a-posteriori estimate
//! `β h_{m+1,m} |e_mᵀ τφ(τH_m) e₁|` is below its share of the tolerance,
//! otherwise `τ` is halved. Every halving counts as a restart.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expm::expm;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovConfig {
    pub max_subspace_dim: usize,
    /// Relative to `‖v‖`.
    pub tolerance: f64,
    pub max_restarts: usize,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        KrylovConfig { max_subspace_dim: 30, tolerance: 1e-10, max_restarts: 10 }
    }
}

impl KrylovConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_subspace_dim == 0 || !(self.tolerance > 0.0) || self.max_restarts == 0 {
            return Err(Error::InvalidArgument(format!("invalid Krylov config {self:?}")));
        }
        Ok(())
    }
}

struct Arnoldi {
    basis: Vec<DVector<f64>>,
    /// Square `m × m` Hessenberg block.
    h: DMatrix<f64>,
    /// `h_{m+1,m}`, zero after a happy breakdown.
    h_next: f64,
}

fn arnoldi<F>(op: &F, start: &DVector<f64>, beta: f64, max_dim: usize) -> Arnoldi
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut basis = Vec::with_capacity(max_dim + 1);
    basis.push(start / beta);
    let mut h = DMatrix::zeros(max_dim + 1, max_dim);
    let mut scale = 0.0f64;
    let mut m = max_dim;
    let mut h_next = 0.0;
    for j in 0..max_dim {
        let mut p = op(&basis[j]);
        // Modified Gram-Schmidt with one reorthogonalization pass.
        for _ in 0..2 {
            for (i, b) in basis.iter().enumerate() {
                let coef = b.dot(&p);
                h[(i, j)] += coef;
                p.axpy(-coef, b, 1.0);
            }
        }
        let norm = p.norm();
        scale = scale.max(h.column(j).amax()).max(norm);
        h[(j + 1, j)] = norm;
        if norm <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            m = j + 1;
            h_next = 0.0;
            break;
        }
        h_next = norm;
        if j + 1 < max_dim {
            basis.push(p / norm);
        }
    }
    let h = h.view((0, 0), (m, m)).into_owned();
    basis.truncate(m);
    Arnoldi { basis, h, h_next }
}

/// `expm(t A) v` where `op` applies `A`.
pub fn expmv<F>(op: F, t: f64, v: &DVector<f64>, config: &KrylovConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    config.validate()?;
    let n = v.len();
    let beta0 = v.norm();
    if beta0 == 0.0 || t == 0.0 || n == 0 {
        return Ok(v.clone());
    }
    let max_dim = config.max_subspace_dim.min(n);
    let total = t.abs();
    let sign = t.signum();
    let mut w = v.clone();
    let mut done = 0.0;
    let mut tau = total;
    let mut restarts = 0;
    while done < total {
        tau = tau.min(total - done);
        let beta = w.norm();
        if beta == 0.0 {
            break;
        }
        let arn = arnoldi(&op, &w, beta, max_dim);
        let m = arn.h.nrows();
        loop {
            // expm([[τH, τe₁], [0, 0]]) carries both exp(τH)e₁ and τφ(τH)e₁.
            let mut aug = DMatrix::zeros(m + 1, m + 1);
            aug.view_mut((0, 0), (m, m)).copy_from(&(&arn.h * (sign * tau)));
            aug[(0, m)] = sign * tau;
            let e = expm(&aug);
            let estimate = beta * arn.h_next * e[(m - 1, m)].abs();
            let allowed = config.tolerance * beta0 * (tau / total);
            if !estimate.is_finite() || estimate > allowed {
                restarts += 1;
                if restarts > config.max_restarts {
                    return Err(Error::KrylovNonConvergence { restarts, estimate });
                }
                tau *= 0.5;
                continue;
            }
            let mut next = DVector::zeros(n);
            for (k, b) in arn.basis.iter().enumerate() {
                next.axpy(beta * e[(k, 0)], b, 1.0);
            }
            w = next;
            done += tau;
            break;
        }
    }
    Ok(w)
}

/// `t φ(tA) u`, using the augmented operator `[[A, u/σ], [0, 0]]` applied to `(0, σ)`.
pub fn phimv<F>(op: F, t: f64, u: &DVector<f64>, config: &KrylovConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = u.len();
    let sigma = u.norm();
    if sigma == 0.0 || t == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let direction = u / sigma;
    let aug_op = |x: &DVector<f64>| {
        let head = x.rows(0, n).into_owned();
        let mut out = DVector::zeros(n + 1);
        let ax = op(&head);
        out.rows_mut(0, n).copy_from(&ax);
        out.rows_mut(0, n).axpy(x[n], &direction, 1.0);
        out
    };
    let mut start = DVector::zeros(n + 1);
    start[n] = sigma;
    let res = expmv(aug_op, t, &start, config)?;
    Ok(res.rows(0, n).into_owned())
}
