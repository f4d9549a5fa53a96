//! Gaussian pushforward through the linearized flow.
//!
//! With `v(0) ~ N(0, Σ₀)` the state at time `T` is the affine image
//! `expm(TA) v(0) + Tφ(TA) b`, hence Gaussian with mean `m(T) = Tφ(TA) b`
//! and covariance `expm(TA) Σ₀ expm(TA)ᵀ`. Only the classification node is
//! needed, and its covariance is `BBᵀ` where `B` holds the first `c` rows of
//! `expm(TA) √Σ₀`, i.e. `B_i = √Σ₀ᵀ expm(TAᵀ) e_i`.
//!
//! `√Σ₀ = (I_n ⊗ P)(Diag(d) + qqᵀ)` is parameterized by `d, q ∈ R^{(c-1)n}`.
//! Everything that does not depend on `(d, q)` is cached in a
//! [`ClassNodePropagator`], so re-evaluating moments for a new covariance costs
//! `O(c² n)` per datum.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::expm::{expm, phi_augmented};
use crate::flow::{assemble_linearized, solve_ldaf, FlowParams, FlowSolver};
use crate::manifold::{AssignmentState, GraphShape, TangentField};

/// Floor for the diagonal `d` after random initialization or a gradient step.
pub const MIN_DIAGONAL: f64 = 1e-4;

/// Low-rank parameterization of the initial covariance factor.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankCov {
    shape: GraphShape,
    d: DVector<f64>,
    q: DVector<f64>,
}

impl LowRankCov {
    pub fn new(shape: GraphShape, d: DVector<f64>, q: DVector<f64>) -> Result<Self> {
        let k = shape.tangent_dim();
        if d.len() != k || q.len() != k {
            return Err(Error::shape(format!("length {k}"), format!("lengths {} and {}", d.len(), q.len())));
        }
        for (index, &value) in d.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositive { index, value });
            }
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariance vector q".into()));
        }
        Ok(LowRankCov { shape, d, q })
    }

    /// Entries of `d` and `q` drawn from `N(0.1, 0.01)`, `d` floored at
    /// [`MIN_DIAGONAL`].
    pub fn random_prior(shape: GraphShape, rng: &mut impl Rng) -> Self {
        let k = shape.tangent_dim();
        let normal = Normal::<f64>::new(0.1, 0.1).expect("valid normal");
        let d = DVector::from_fn(k, |_, _| normal.sample(rng).max(MIN_DIAGONAL));
        let q = DVector::from_fn(k, |_, _| normal.sample(rng));
        LowRankCov { shape, d, q }
    }

    pub fn isotropic(shape: GraphShape, sigma: f64) -> Result<Self> {
        let k = shape.tangent_dim();
        LowRankCov::new(shape, DVector::from_element(k, sigma), DVector::zeros(k))
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn k(&self) -> usize {
        self.d.len()
    }

    /// `(αd, αq)`; note the factor scales by `α` on the diagonal but `α²` on
    /// the rank-one part.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        LowRankCov::new(self.shape, &self.d * alpha, &self.q * alpha)
    }

    /// Gradient step `(d, q) -= step * (gd, gq)`, flooring `d`.
    pub fn step(&self, step: f64, gd: &DVector<f64>, gq: &DVector<f64>) -> Self {
        let d = (&self.d - gd * step).map(|x| if x.is_finite() { x.max(MIN_DIAGONAL) } else { x });
        let q = &self.q - gq * step;
        LowRankCov { shape: self.shape, d, q }
    }

    /// Gradient step in `(log d, q)` given the gradient in `(d, q)`:
    /// `d ← d·exp(-step·d·gd)`, `q ← q - step·gq`, flooring `d`.
    pub fn step_log_diagonal(&self, step: f64, gd: &DVector<f64>, gq: &DVector<f64>) -> Self {
        let d = self.d.zip_map(gd, |d, g| (d * (-step * d * g).exp()).max(MIN_DIAGONAL));
        let q = &self.q - gq * step;
        LowRankCov { shape: self.shape, d, q }
    }

    /// `M x = Diag(d) x + q (qᵀ x)`.
    pub fn inner_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let dot = self.q.dot(x);
        self.d.component_mul(x) + &self.q * dot
    }

    /// `√Σ₀ z`, an element of `T_0`.
    pub fn factor_apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let c = self.shape.classes();
        let m = self.inner_apply(z);
        let mut out = DVector::zeros(self.shape.dim());
        for (o, y) in out.as_mut_slice().chunks_mut(c).zip(m.as_slice().chunks(c - 1)) {
            o[..c - 1].copy_from_slice(y);
            o[c - 1] = -y.iter().sum::<f64>();
        }
        out
    }

    /// `√Σ₀ᵀ w = M (I ⊗ Pᵀ) w`.
    pub fn factor_transpose_apply(&self, w: &DVector<f64>) -> DVector<f64> {
        self.inner_apply(&coords_transpose(w, self.shape.classes()))
    }

    /// Dense `M = Diag(d) + qqᵀ`.
    pub fn dense_inner(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.d) + &self.q * self.q.transpose()
    }

    /// Dense `√Σ₀`, an `N × k` matrix.
    pub fn dense_factor(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut out = DMatrix::zeros(self.shape.dim(), k);
        for j in 0..k {
            let mut e = DVector::zeros(k);
            e[j] = 1.0;
            out.set_column(j, &self.factor_apply(&e));
        }
        out
    }
}

/// `(I ⊗ Pᵀ) w`: per node block, `w_j - w_{c-1}` for `j < c - 1`.
fn coords_transpose(w: &DVector<f64>, c: usize) -> DVector<f64> {
    let blocks = w.len() / c;
    let mut out = DVector::zeros(blocks * (c - 1));
    for (o, b) in out.as_mut_slice().chunks_mut(c - 1).zip(w.as_slice().chunks(c)) {
        for j in 0..c - 1 {
            o[j] = b[j] - b[c - 1];
        }
    }
    out
}

/// Classification-node marginal in `P`-coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalMoments {
    /// `m̂`, the first `c - 1` entries of the node mean.
    pub mean_hat: DVector<f64>,
    /// `Σ̂`, the leading `(c-1) × (c-1)` block of the node covariance.
    pub cov_hat: DMatrix<f64>,
    /// Lower-triangular `H` with `HHᵀ = Σ̂` (plus jitter, if any was needed).
    pub chol: DMatrix<f64>,
    /// Feature logits of the classification node, `F(x)_I`.
    pub logits_shift: DVector<f64>,
}

impl MarginalMoments {
    pub fn classes(&self) -> usize {
        self.logits_shift.len()
    }

    /// Deterministic moments: zero covariance, used for the mean classifier.
    pub fn point_mass(mean_hat: DVector<f64>, logits_shift: DVector<f64>) -> Self {
        let k = mean_hat.len();
        MarginalMoments { mean_hat, cov_hat: DMatrix::zeros(k, k), chol: DMatrix::zeros(k, k), logits_shift }
    }
}

/// Per-datum cache of everything in the node marginal that is independent of
/// the covariance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassNodePropagator {
    shape: GraphShape,
    /// Column `i` is `(I ⊗ Pᵀ) expm(TAᵀ) e_i`, so `B_i = M g_i`.
    g: DMatrix<f64>,
    /// `m(T)_I`, sums to zero.
    mean: DVector<f64>,
    logits_shift: DVector<f64>,
}

impl ClassNodePropagator {
    pub fn new(
        params: &FlowParams,
        s0: &AssignmentState,
        t: f64,
        logits_shift: DVector<f64>,
        solver: &FlowSolver,
    ) -> Result<Self> {
        let shape = params.shape();
        let (n, c) = (shape.dim(), shape.classes());
        if logits_shift.len() != c {
            return Err(Error::shape(format!("length {c}"), format!("length {}", logits_shift.len())));
        }
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("time must be positive, got {t}")));
        }
        let sys = assemble_linearized(params, s0)?;
        let mut g = DMatrix::zeros(shape.tangent_dim(), c);
        let mean;
        if solver.uses_dense(n) {
            // One exponential of [[TA, Tb], [0, 0]] yields expm(TA) and Tφ(TA)b.
            let e = expm(&phi_augmented(&sys.dense(), t, sys.b().as_vector()));
            mean = DVector::from_fn(c, |i, _| e[(i, n)]);
            for i in 0..c {
                let row = DVector::from_fn(n, |j, _| e[(i, j)]);
                g.set_column(i, &coords_transpose(&row, c));
            }
        } else {
            let m = solver.phi_apply(&sys, t, sys.b().as_vector())?;
            mean = m.rows(0, c).into_owned();
            for i in 0..c {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                let w = solver.expm_transpose_apply(&sys, t, &e)?;
                g.set_column(i, &coords_transpose(&w, c));
            }
        }
        let mut mean = mean;
        let avg = mean.sum() / c as f64;
        mean.add_scalar_mut(-avg);
        Ok(ClassNodePropagator { shape, g, mean, logits_shift })
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    /// Node mean `m(T)_I`.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn logits_shift(&self) -> &DVector<f64> {
        &self.logits_shift
    }

    /// Logits of the mean classifier, `m(T)_I + F(x)_I`.
    pub fn mean_logits(&self) -> DVector<f64> {
        &self.mean + &self.logits_shift
    }

    /// `B`, the `c × k` matrix of the first `c` rows of `expm(TA)√Σ₀`.
    pub fn b_rows(&self, cov: &LowRankCov) -> DMatrix<f64> {
        let dg = DMatrix::from_fn(self.g.nrows(), self.g.ncols(), |r, i| cov.d()[r] * self.g[(r, i)]);
        let qg = self.g.tr_mul(cov.q());
        let mg = dg + cov.q() * qg.transpose();
        mg.transpose()
    }

    /// Full node covariance `Σ̃ = BBᵀ` (`c × c`).
    pub fn node_covariance(&self, cov: &LowRankCov) -> DMatrix<f64> {
        let b = self.b_rows(cov);
        &b * b.transpose()
    }

    pub fn moments(&self, cov: &LowRankCov) -> Result<MarginalMoments> {
        let c = self.shape.classes();
        let b = self.b_rows(cov);
        let bh = b.rows(0, c - 1);
        let cov_hat = symmetrized(&(bh * bh.transpose()));
        let chol = cholesky_jittered(&cov_hat)?;
        Ok(MarginalMoments {
            mean_hat: self.mean.rows(0, c - 1).into_owned(),
            cov_hat,
            chol,
            logits_shift: self.logits_shift.clone(),
        })
    }

    /// Gradient of a scalar `f(m̂, H)` with respect to `(d, q)` given
    /// `∂f/∂H`. `m̂` does not depend on `(d, q)`.
    pub fn moments_grad(
        &self,
        cov: &LowRankCov,
        moments: &MarginalMoments,
        upstream_chol: &DMatrix<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let c = self.shape.classes();
        let sigma_bar = cholesky_backward(&moments.chol, upstream_chol);
        let b = self.b_rows(cov);
        let bh = b.rows(0, c - 1);
        // Σ̂ = B̂B̂ᵀ with symmetric Σ̄  =>  B̄ = 2 Σ̄ B̂.
        let b_bar = (&sigma_bar * bh) * 2.0;
        let gh = self.g.columns(0, c - 1);
        // B̂ = Ĝᵀ M  =>  M̄ = Ĝ B̄; then d̄ = diag(M̄), q̄ = (M̄ + M̄ᵀ) q.
        let k = cov.k();
        let gd = DVector::from_fn(k, |j, _| (0..c - 1).map(|i| gh[(j, i)] * b_bar[(i, j)]).sum());
        let gq = gh * (&b_bar * cov.q()) + b_bar.tr_mul(&gh.tr_mul(cov.q()));
        (gd, gq)
    }
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor, retrying with jitter `1e-12 · tr/(c-1)` escalated by
/// factors of ten up to `1e-6 · tr/(c-1)`.
pub fn cholesky_jittered(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let dim = cov.nrows();
    let base = cov.trace() / dim as f64;
    if !(base > 0.0) || !base.is_finite() {
        return Err(Error::CholeskyFailed { jitter: 0.0 });
    }
    let mut rel = 1e-12;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let jitter = rel * base;
        let shifted = cov + DMatrix::<f64>::identity(dim, dim) * jitter;
        if let Some(ch) = Cholesky::<f64, Dyn>::new(shifted) {
            return Ok(ch.l());
        }
        rel *= 10.0;
    }
    Err(Error::CholeskyFailed { jitter: 1e-6 * base })
}

/// Reverse-mode Cholesky: given `Σ = LLᵀ` and `L̄`, returns the symmetric
/// `Σ̄ = ½ (S + Sᵀ)` with `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, where `Φ` keeps the lower
/// triangle and halves the diagonal.
pub fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.tr_mul(&l_bar.lower_triangle());
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // S = L⁻ᵀ P L⁻¹ via two triangular solves.
    let x = l.tr_solve_lower_triangular(&p).unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
    let s = l
        .tr_solve_lower_triangular(&x.transpose())
        .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN))
        .transpose();
    symmetrized(&s)
}

/// Node-independent mean `m(T) = Tφ(TA) b`.
pub fn push_mean(params: &FlowParams, s0: &AssignmentState, t: f64, solver: &FlowSolver) -> Result<TangentField> {
    solve_ldaf(params, s0, t, solver)
}

/// Classification-node marginal moments for covariance parameters `cov`.
pub fn push_marginal(
    params: &FlowParams,
    s0: &AssignmentState,
    cov: &LowRankCov,
    t: f64,
    logits_shift: DVector<f64>,
    solver: &FlowSolver,
) -> Result<MarginalMoments> {
    check_cov(params, cov)?;
    ClassNodePropagator::new(params, s0, t, logits_shift, solver)?.moments(cov)
}

/// Gradient of a scalar function of `(m̂, H)` with respect to `(d, q)`.
/// `upstream_mean` is accepted for completeness; `m̂` is independent of the
/// covariance so it contributes nothing.
#[allow(clippy::too_many_arguments)]
pub fn push_marginal_grad(
    params: &FlowParams,
    s0: &AssignmentState,
    cov: &LowRankCov,
    t: f64,
    logits_shift: DVector<f64>,
    solver: &FlowSolver,
    upstream_mean: &DVector<f64>,
    upstream_chol: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_cov(params, cov)?;
    solver.require_dense(params.shape().dim())?;
    let c = params.shape().classes();
    if upstream_mean.len() != c - 1 || upstream_chol.shape() != (c - 1, c - 1) {
        return Err(Error::shape(format!("upstream of size {}", c - 1), "mismatched upstream"));
    }
    let prop = ClassNodePropagator::new(params, s0, t, logits_shift, solver)?;
    let moments = prop.moments(cov)?;
    Ok(prop.moments_grad(cov, &moments, upstream_chol))
}

fn check_cov(params: &FlowParams, cov: &LowRankCov) -> Result<()> {
    if params.shape() != cov.shape() {
        return Err(Error::shape(format!("{:?}", params.shape()), format!("{:?}", cov.shape())));
    }
    Ok(())
}
