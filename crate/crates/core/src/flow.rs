//! Deep assignment flows and their linearization.
//!
//! Linearizing the tangent-space flow `v' = Π₀ Ω exp_{s0}(v)` at `v = 0`
//! gives `v' = A v + b` with `A = Π₀ Ω R_{s0}` and `b = Π₀ Ω s0`, whose
//! solution from `v(0) = 0` is `v(t) = tφ(tA) b`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expm::{expm, expm_frechet, phi_times};
use crate::krylov::{expmv, phimv, KrylovConfig};
use crate::manifold::{lift_raw, project_blocks, AssignmentState, GraphShape, TangentField};

/// Largest `N` for which the dense Padé path is used by default.
pub const DEFAULT_DENSE_LIMIT: usize = 512;

/// Symmetric interaction matrix `Ω ∈ R^{N×N}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    shape: GraphShape,
    omega: DMatrix<f64>,
}

impl FlowParams {
    pub fn new(shape: GraphShape, omega: DMatrix<f64>) -> Result<Self> {
        let n = shape.dim();
        if omega.shape() != (n, n) {
            return Err(Error::shape(format!("{n}x{n}"), format!("{:?}", omega.shape())));
        }
        let asym = (&omega - omega.transpose()).amax();
        if asym > 1e-12 * omega.amax().max(1.0) {
            return Err(Error::InvalidArgument(format!("Ω is not symmetric (max asymmetry {asym:e})")));
        }
        let mut p = FlowParams { shape, omega };
        p.symmetrize();
        Ok(p)
    }

    pub fn zeros(shape: GraphShape) -> Self {
        let n = shape.dim();
        FlowParams { shape, omega: DMatrix::zeros(n, n) }
    }

    /// Builds `Ω̂ ⊗ I_c`, the interaction of a plain S-flow.
    pub fn kronecker(shape: GraphShape, node_weights: &DMatrix<f64>) -> Result<Self> {
        let (n, c) = (shape.nodes(), shape.classes());
        if node_weights.shape() != (n, n) {
            return Err(Error::shape(format!("{n}x{n}"), format!("{:?}", node_weights.shape())));
        }
        let omega =
            DMatrix::from_fn(n * c, n * c, |r, s| if r % c == s % c { node_weights[(r / c, s / c)] } else { 0.0 });
        FlowParams::new(shape, omega)
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// Replaces `Ω` by its symmetric part.
    pub fn symmetrize(&mut self) {
        let n = self.omega.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.omega[(i, j)] + self.omega[(j, i)]);
                self.omega[(i, j)] = m;
                self.omega[(j, i)] = m;
            }
        }
    }

    /// Applies an additive update and restores symmetry.
    pub fn update(&mut self, delta: &DMatrix<f64>) {
        self.omega += delta;
        self.symmetrize();
    }
}

/// `A = Π₀ Ω R_{s0}` (matrix-free) and `b = Π₀ Ω s0`.
#[derive(Clone, Debug)]
pub struct LinearizedSystem<'a> {
    omega: &'a DMatrix<f64>,
    s0: AssignmentState,
    b: TangentField,
}

pub fn assemble_linearized<'a>(params: &'a FlowParams, s0: &AssignmentState) -> Result<LinearizedSystem<'a>> {
    if params.shape != s0.shape() {
        return Err(Error::shape(format!("{:?}", params.shape), format!("{:?}", s0.shape())));
    }
    let mut b = &params.omega * s0.as_vector();
    project_blocks(b.as_mut_slice(), params.shape.classes());
    Ok(LinearizedSystem { omega: &params.omega, s0: s0.clone(), b: TangentField::from_raw(params.shape, b) })
}

impl<'a> LinearizedSystem<'a> {
    pub fn shape(&self) -> GraphShape {
        self.s0.shape()
    }

    pub fn dim(&self) -> usize {
        self.s0.shape().dim()
    }

    pub fn s0(&self) -> &AssignmentState {
        &self.s0
    }

    pub fn b(&self) -> &TangentField {
        &self.b
    }

    fn replicator(&self, u: &mut [f64]) {
        let c = self.shape().classes();
        for (u, s) in u.chunks_mut(c).zip(self.s0.as_vector().as_slice().chunks(c)) {
            let dot: f64 = s.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            for j in 0..c {
                u[j] = s[j] * (u[j] - dot);
            }
        }
    }

    /// `A u`.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut r = u.clone();
        self.replicator(r.as_mut_slice());
        let mut out = self.omega * r;
        project_blocks(out.as_mut_slice(), self.shape().classes());
        out
    }

    /// `Aᵀ u = R_{s0} Ω Π₀ u`.
    pub fn apply_transpose(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut p = u.clone();
        project_blocks(p.as_mut_slice(), self.shape().classes());
        let mut out = self.omega * p;
        self.replicator(out.as_mut_slice());
        out
    }

    /// Dense `A`.
    pub fn dense(&self) -> DMatrix<f64> {
        let c = self.shape().classes();
        let n = self.dim();
        let s = self.s0.as_vector();
        // Ω R: column block i of Ω multiplied by the symmetric R_i.
        let mut a = DMatrix::zeros(n, n);
        for blk in 0..n / c {
            let off = blk * c;
            for row in 0..n {
                let dot: f64 = (0..c).map(|k| self.omega[(row, off + k)] * s[off + k]).sum();
                for j in 0..c {
                    a[(row, off + j)] = s[off + j] * (self.omega[(row, off + j)] - dot);
                }
            }
        }
        for mut col in a.column_iter_mut() {
            project_blocks(col.as_mut_slice(), c);
        }
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Dense for `N` up to the dense limit, Krylov above.
    Auto,
    Dense,
    Krylov,
}

/// Evaluates matrix functions of a linearized system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSolver {
    pub backend: Backend,
    pub krylov: KrylovConfig,
    pub dense_limit: usize,
}

impl Default for FlowSolver {
    fn default() -> Self {
        FlowSolver { backend: Backend::Auto, krylov: KrylovConfig::default(), dense_limit: DEFAULT_DENSE_LIMIT }
    }
}

impl FlowSolver {
    pub fn dense() -> Self {
        FlowSolver { backend: Backend::Dense, ..Default::default() }
    }

    pub fn krylov() -> Self {
        FlowSolver { backend: Backend::Krylov, ..Default::default() }
    }

    pub(crate) fn uses_dense(&self, n: usize) -> bool {
        match self.backend {
            Backend::Dense => true,
            Backend::Krylov => false,
            Backend::Auto => n <= self.dense_limit,
        }
    }

    pub(crate) fn require_dense(&self, n: usize) -> Result<()> {
        if n > self.dense_limit {
            return Err(Error::DenseLimitExceeded { n, limit: self.dense_limit });
        }
        Ok(())
    }

    fn check(&self, sys: &LinearizedSystem<'_>, u: &DVector<f64>) -> Result<()> {
        sys.shape().check_len(u.len())
    }

    /// `t φ(tA) u`.
    pub fn phi_apply(&self, sys: &LinearizedSystem<'_>, t: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(sys, u)?;
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("time must be positive, got {t}")));
        }
        if self.uses_dense(sys.dim()) {
            Ok(phi_times(&sys.dense(), t, u))
        } else {
            phimv(|x| sys.apply(x), t, u, &self.krylov)
        }
    }

    /// `expm(tA) u`.
    pub fn expm_apply(&self, sys: &LinearizedSystem<'_>, t: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(sys, u)?;
        if self.uses_dense(sys.dim()) {
            Ok(expm(&(sys.dense() * t)) * u)
        } else {
            expmv(|x| sys.apply(x), t, u, &self.krylov)
        }
    }

    /// `expm(tAᵀ) u`.
    pub fn expm_transpose_apply(&self, sys: &LinearizedSystem<'_>, t: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(sys, u)?;
        if self.uses_dense(sys.dim()) {
            Ok(expm(&(sys.dense().transpose() * t)) * u)
        } else {
            expmv(|x| sys.apply_transpose(x), t, u, &self.krylov)
        }
    }

    /// `L(tA, tE) u`, the Fréchet derivative of the exponential at `tA` in
    /// direction `tE`, applied to `u`. Dense path only.
    pub fn frechet_expm_apply(
        &self,
        sys: &LinearizedSystem<'_>,
        t: f64,
        direction: &DMatrix<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check(sys, u)?;
        let n = sys.dim();
        self.require_dense(n)?;
        if direction.shape() != (n, n) {
            return Err(Error::shape(format!("{n}x{n}"), format!("{:?}", direction.shape())));
        }
        let (_, l) = expm_frechet(&(sys.dense() * t), &(direction * t))?;
        Ok(l * u)
    }
}

/// `v(T) = Tφ(TA) b`, the linearized flow at time `T`.
pub fn solve_ldaf(params: &FlowParams, s0: &AssignmentState, t: f64, solver: &FlowSolver) -> Result<TangentField> {
    let sys = assemble_linearized(params, s0)?;
    let v = solver.phi_apply(&sys, t, sys.b().as_vector())?;
    let mut v = v;
    // Exact arithmetic keeps v in T_0; remove the rounding drift.
    project_blocks(v.as_mut_slice(), params.shape.classes());
    Ok(TangentField::from_raw(params.shape, v))
}

/// Explicit Euler on the tangent-space flow `v' = Π₀ Ω exp_{s0}(v)`; the
/// state stays on the manifold by construction. Validation oracle only.
pub fn integrate_nonlinear_daf(
    params: &FlowParams,
    s0: &AssignmentState,
    t: f64,
    step: f64,
) -> Result<AssignmentState> {
    if params.shape != s0.shape() {
        return Err(Error::shape(format!("{:?}", params.shape), format!("{:?}", s0.shape())));
    }
    if !(step > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("need step > 0 and t >= 0, got {step}, {t}")));
    }
    let steps = (t / step - 1e-9).ceil().max(0.0) as usize;
    if steps == 0 {
        return Ok(s0.clone());
    }
    let h = t / steps as f64;
    let c = params.shape.classes();
    let mut v = DVector::zeros(params.shape.dim());
    for _ in 0..steps {
        let s = lift_raw(s0, &v);
        let mut f = &params.omega * s.as_vector();
        project_blocks(f.as_mut_slice(), c);
        v.axpy(h, &f, 1.0);
    }
    Ok(lift_raw(s0, &v))
}
