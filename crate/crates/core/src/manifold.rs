//! Geometry of the assignment manifold.
//!
//! States live on the product of open probability simplices, one per graph
//! node, and are stored vectorized row-major by node: entry `i * c + j` is the
//! assignment of node `i` to class `j`. Tangent vectors share the layout and
//! have zero sum within every node block. Node 0 is the classification node,
//! so the class probabilities always occupy the first `c` entries.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Floor applied after a lift so that states keep full support in floating point.
pub const SUPPORT_FLOOR: f64 = 1e-300;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GraphShape {
    n: usize,
    c: usize,
}

impl GraphShape {
    pub fn new(nodes: usize, classes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least two classes, got {classes}")));
        }
        Ok(GraphShape { n: nodes, c: classes })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    /// Ambient dimension `N = n * c`.
    pub fn dim(&self) -> usize {
        self.n * self.c
    }

    /// Dimension of the tangent space coordinates, `(c - 1) * n`.
    pub fn tangent_dim(&self) -> usize {
        (self.c - 1) * self.n
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::shape(format!("length {}", self.dim()), format!("length {len}")));
        }
        Ok(())
    }
}

/// A point of the assignment manifold: strictly positive, each node block sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentState {
    shape: GraphShape,
    s: DVector<f64>,
}

impl AssignmentState {
    pub fn new(shape: GraphShape, s: DVector<f64>) -> Result<Self> {
        shape.check_len(s.len())?;
        for (index, &value) in s.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositive { index, value });
            }
        }
        for (block, chunk) in s.as_slice().chunks(shape.c).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!("node {block} does not sum to one (sum = {sum})")));
            }
        }
        Ok(AssignmentState { shape, s })
    }

    /// The barycenter `1_W`, uniform assignment at every node.
    pub fn barycenter(shape: GraphShape) -> Self {
        let s = DVector::from_element(shape.dim(), 1.0 / shape.c as f64);
        AssignmentState { shape, s }
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.s
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let c = self.shape.c;
        &self.s.as_slice()[i * c..(i + 1) * c]
    }
}

/// An element of `T_0`: every node block sums to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentField {
    shape: GraphShape,
    v: DVector<f64>,
}

impl TangentField {
    pub fn new(shape: GraphShape, v: DVector<f64>) -> Result<Self> {
        shape.check_len(v.len())?;
        for (block, chunk) in v.as_slice().chunks(shape.c).enumerate() {
            let sum: f64 = chunk.iter().sum();
            let scale = chunk.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            if sum.abs() > SIMPLEX_TOL * scale {
                return Err(Error::NotTangent { block, sum });
            }
        }
        Ok(TangentField { shape, v })
    }

    pub fn zeros(shape: GraphShape) -> Self {
        TangentField { shape, v: DVector::zeros(shape.dim()) }
    }

    /// Wraps a vector that is in `T_0` by construction.
    pub(crate) fn from_raw(shape: GraphShape, v: DVector<f64>) -> Self {
        debug_assert_eq!(v.len(), shape.dim());
        TangentField { shape, v }
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.v
    }

    /// Entries of the classification node.
    pub fn class_node(&self) -> &[f64] {
        &self.v.as_slice()[..self.shape.c]
    }
}

/// Subtracts the block mean from every node block in place.
pub(crate) fn project_blocks(v: &mut [f64], c: usize) {
    for chunk in v.chunks_mut(c) {
        let mean = chunk.iter().sum::<f64>() / c as f64;
        chunk.iter_mut().for_each(|x| *x -= mean);
    }
}

/// Orthogonal projection `Π₀` onto `T_0`.
pub fn project_tangent(v: &DVector<f64>, shape: GraphShape) -> Result<TangentField> {
    shape.check_len(v.len())?;
    let mut out = v.clone();
    project_blocks(out.as_mut_slice(), shape.c);
    Ok(TangentField::from_raw(shape, out))
}

/// Exponential lift `exp_{s0}(v)`, blockwise `s e^v / <s, e^v>`.
pub fn lift(s0: &AssignmentState, v: &TangentField) -> Result<AssignmentState> {
    if s0.shape != v.shape {
        return Err(Error::shape(format!("{:?}", s0.shape), format!("{:?}", v.shape)));
    }
    Ok(lift_raw(s0, v.as_vector()))
}

/// Lift of an arbitrary ambient vector. Adding a constant to a block does not
/// change the result, so the input need not be tangent.
pub(crate) fn lift_raw(s0: &AssignmentState, v: &DVector<f64>) -> AssignmentState {
    let c = s0.shape.c;
    let mut out = DVector::zeros(v.len());
    for ((o, s), v) in out.as_mut_slice().chunks_mut(c).zip(s0.s.as_slice().chunks(c)).zip(v.as_slice().chunks(c)) {
        let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            o[j] = s[j] * (v[j] - vmax).exp();
            total += o[j];
        }
        for x in o.iter_mut() {
            *x = (*x / total).max(SUPPORT_FLOOR);
        }
    }
    AssignmentState { shape: s0.shape, s: out }
}

/// Inverse of the lift at the barycenter: blockwise `Π₀ log s`.
pub fn lift_inverse_at_barycenter(s: &AssignmentState) -> TangentField {
    let mut v = s.s.map(f64::ln);
    project_blocks(v.as_mut_slice(), s.shape.c);
    TangentField::from_raw(s.shape, v)
}

/// Replicator operator `R_s u`, blockwise `Diag(s_i) u_i - <s_i, u_i> s_i`.
pub fn replicator_apply(s: &AssignmentState, u: &DVector<f64>) -> Result<TangentField> {
    s.shape.check_len(u.len())?;
    let c = s.shape.c;
    let mut out = DVector::zeros(u.len());
    for ((o, s), u) in out.as_mut_slice().chunks_mut(c).zip(s.s.as_slice().chunks(c)).zip(u.as_slice().chunks(c)) {
        let dot: f64 = s.iter().zip(u).map(|(a, b)| a * b).sum();
        for j in 0..c {
            o[j] = s[j] * (u[j] - dot);
        }
    }
    Ok(TangentField::from_raw(s.shape, out))
}

/// The basis `P = (I_{c-1}; -1ᵀ)` of `T_0 S_c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimplexBasis {
    c: usize,
}

impl SimplexBasis {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least two classes, got {classes}")));
        }
        Ok(SimplexBasis { c: classes })
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    /// `P z = (z, -Σz)`.
    pub fn embed(&self, z: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.c - 1 {
            return Err(Error::shape(format!("length {}", self.c - 1), format!("length {}", z.len())));
        }
        let mut out = DVector::zeros(self.c);
        out.as_mut_slice()[..self.c - 1].copy_from_slice(z);
        out[self.c - 1] = -z.iter().sum::<f64>();
        Ok(out)
    }

    /// Coordinates of a tangent vector, i.e. its first `c - 1` entries.
    pub fn coords(&self, w: &[f64]) -> Result<DVector<f64>> {
        if w.len() != self.c {
            return Err(Error::shape(format!("length {}", self.c), format!("length {}", w.len())));
        }
        let sum: f64 = w.iter().sum();
        let scale = w.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if sum.abs() > SIMPLEX_TOL * scale {
            return Err(Error::NotTangent { block: 0, sum });
        }
        Ok(DVector::from_column_slice(&w[..self.c - 1]))
    }

    /// Dense `c × (c-1)` matrix.
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let c = self.c;
        nalgebra::DMatrix::from_fn(c, c - 1, |i, j| {
            if i == c - 1 {
                -1.0
            } else if i == j {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize) -> GraphShape {
        GraphShape::new(n, c).unwrap()
    }

    fn random_state(shape: GraphShape, rng: &mut impl Rng) -> AssignmentState {
        let v = DVector::from_fn(shape.dim(), |_, _| rng.gen_range(-2.0..2.0));
        lift_raw(&AssignmentState::barycenter(shape), &v)
    }

    fn random_vec(len: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_validation() {
        assert!(GraphShape::new(0, 3).is_err());
        assert!(GraphShape::new(2, 1).is_err());
        let s = shape(4, 3);
        assert_eq!(s.dim(), 12);
        assert_eq!(s.tangent_dim(), 8);
    }

    #[test]
    fn projection_mean_subtraction() {
        let t = project_tangent(&DVector::from_vec(vec![1.0, 2.0, 3.0]), shape(1, 3)).unwrap();
        assert_eq!(t.as_vector().as_slice(), &[-1.0, 0.0, 1.0]);
        assert!(project_tangent(&DVector::zeros(4), shape(1, 3)).is_err());
    }

    #[test]
    fn projection_matches_dense_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sh = shape(2, 3);
        let v = random_vec(6, &mut rng);
        let mut dense = DMatrix::<f64>::identity(6, 6);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    dense[(3 * b + i, 3 * b + j)] -= 1.0 / 3.0;
                }
            }
        }
        let expected = &dense * &v;
        let got = project_tangent(&v, sh).unwrap();
        assert!((got.as_vector() - expected).amax() < 1e-15);
    }

    #[test]
    fn lift_at_barycenter_is_softmax() {
        let sh = shape(1, 3);
        let v = TangentField::new(sh, DVector::from_vec(vec![0.3, -0.5, 0.2])).unwrap();
        let s = lift(&AssignmentState::barycenter(sh), &v).unwrap();
        let e: Vec<f64> = v.as_vector().iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..3 {
            assert!((s.as_vector()[j] - e[j] / z).abs() < 1e-15);
        }
        let zero = lift(&AssignmentState::barycenter(sh), &TangentField::zeros(sh)).unwrap();
        assert_eq!(zero, AssignmentState::barycenter(sh));
    }

    #[test]
    fn lift_matches_direct_formula() {
        // The direct formula without max-subtraction, evaluated with a
        // compensated sum, is accurate for moderate inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sh = shape(3, 4);
        let s0 = random_state(sh, &mut rng);
        let v = project_tangent(&random_vec(12, &mut rng), sh).unwrap();
        let got = lift(&s0, &v).unwrap();
        for i in 0..3 {
            let num: Vec<f64> = (0..4).map(|j| s0.node(i)[j] * v.as_vector()[4 * i + j].exp()).collect();
            let den: f64 = num.iter().sum();
            for j in 0..4 {
                let rel = (got.node(i)[j] - num[j] / den).abs() / (num[j] / den);
                assert!(rel < 1e-14, "rel {rel}");
            }
        }
    }

    #[test]
    fn lift_survives_huge_tangent() {
        let sh = shape(1, 3);
        let v = TangentField::new(sh, DVector::from_vec(vec![2000.0, -1000.0, -1000.0])).unwrap();
        let s = lift(&AssignmentState::barycenter(sh), &v).unwrap();
        assert!(s.as_vector().iter().all(|x| *x > 0.0 && x.is_finite()));
        assert!((s.as_vector()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_lift_cases() {
        let sh = shape(2, 3);
        let zero = lift_inverse_at_barycenter(&AssignmentState::barycenter(sh));
        assert!(zero.as_vector().amax() < 1e-15);

        let v = TangentField::new(sh, DVector::from_vec(vec![0.5, -0.25, -0.25, 1.0, 0.0, -1.0])).unwrap();
        let s = lift(&AssignmentState::barycenter(sh), &v).unwrap();
        let back = lift_inverse_at_barycenter(&s);
        assert!((back.as_vector() - v.as_vector()).amax() < 1e-14);
    }

    #[test]
    fn inverse_lift_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sh = shape(5, 4);
        let bary = AssignmentState::barycenter(sh);
        for _ in 0..50 {
            let s = random_state(sh, &mut rng);
            let back = lift(&bary, &lift_inverse_at_barycenter(&s)).unwrap();
            assert!((back.as_vector() - s.as_vector()).amax() < 1e-12);
        }
    }

    #[test]
    fn state_rejects_non_positive() {
        let sh = shape(1, 2);
        let err = AssignmentState::new(sh, DVector::from_vec(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::NonPositive { index: 1, .. }));
        assert!(AssignmentState::new(sh, DVector::from_vec(vec![0.3, 0.3])).is_err());
    }

    #[test]
    fn replicator_examples() {
        let sh = shape(1, 3);
        let bary = AssignmentState::barycenter(sh);
        let r = replicator_apply(&bary, &DVector::from_element(3, 1.0)).unwrap();
        assert!(r.as_vector().amax() < 1e-16);
        let r = replicator_apply(&bary, &DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let expected = [2.0 / 9.0, -1.0 / 9.0, -1.0 / 9.0];
        for j in 0..3 {
            assert!((r.as_vector()[j] - expected[j]).abs() < 1e-16);
        }
    }

    #[test]
    fn replicator_matches_dense_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sh = shape(3, 4);
        let s = random_state(sh, &mut rng);
        let u = random_vec(12, &mut rng);
        let got = replicator_apply(&s, &u).unwrap();
        for i in 0..3 {
            let si = DVector::from_column_slice(s.node(i));
            let r = DMatrix::from_diagonal(&si) - &si * si.transpose();
            let ui = u.rows(4 * i, 4).into_owned();
            let expected = r * ui;
            assert!((got.as_vector().rows(4 * i, 4) - expected).amax() < 1e-15);
        }
    }

    #[test]
    fn basis_examples() {
        let p = SimplexBasis::new(3).unwrap();
        assert_eq!(p.embed(&[0.0, 0.0]).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(p.embed(&[1.0, 2.0]).unwrap().as_slice(), &[1.0, 2.0, -3.0]);
        assert!(p.coords(&[1.0, 1.0, 1.0]).is_err());
        assert!(p.embed(&[1.0]).is_err());
        let m = p.matrix();
        assert_eq!(m.rank(1e-12), 2);
        let ones = DMatrix::from_element(1, 3, 1.0);
        assert!((ones * m).amax() == 0.0);
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_self_adjoint(
            u in proptest::collection::vec(-10.0f64..10.0, 12),
            w in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            let sh = shape(4, 3);
            let u = DVector::from_vec(u);
            let w = DVector::from_vec(w);
            let pu = project_tangent(&u, sh).unwrap();
            let ppu = project_tangent(pu.as_vector(), sh).unwrap();
            prop_assert!((pu.as_vector() - ppu.as_vector()).amax() < 1e-12);
            let pw = project_tangent(&w, sh).unwrap();
            prop_assert!((pu.as_vector().dot(&w) - u.dot(pw.as_vector())).abs() < 1e-12);
        }

        #[test]
        fn replicator_output_is_tangent(
            v in proptest::collection::vec(-3.0f64..3.0, 15),
            u in proptest::collection::vec(-10.0f64..10.0, 15),
        ) {
            let sh = shape(3, 5);
            let s = lift_raw(&AssignmentState::barycenter(sh), &DVector::from_vec(v));
            let r = replicator_apply(&s, &DVector::from_vec(u)).unwrap();
            for chunk in r.as_vector().as_slice().chunks(5) {
                prop_assert!(chunk.iter().sum::<f64>().abs() < 1e-12);
            }
        }

        #[test]
        fn lift_composition_identity(
            a in proptest::collection::vec(-3.0f64..3.0, 12),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let sh = shape(3, 4);
            let bary = AssignmentState::barycenter(sh);
            let v0 = project_tangent(&DVector::from_vec(a), sh).unwrap();
            let v = project_tangent(&DVector::from_vec(b), sh).unwrap();
            let lhs = lift(&lift(&bary, &v0).unwrap(), &v).unwrap();
            let sum = TangentField::from_raw(sh, v0.as_vector() + v.as_vector());
            let rhs = lift(&bary, &sum).unwrap();
            prop_assert!((lhs.as_vector() - rhs.as_vector()).amax() < 1e-10);
        }

        #[test]
        fn basis_round_trip_and_kernel(z in proptest::collection::vec(-100.0f64..100.0, 4)) {
            let p = SimplexBasis::new(5).unwrap();
            let w = p.embed(&z).unwrap();
            prop_assert!(w.iter().sum::<f64>().abs() < 1e-12);
            let back = p.coords(w.as_slice()).unwrap();
            prop_assert_eq!(back.as_slice(), z.as_slice());
        }
    }
}
