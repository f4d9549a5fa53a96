//! Expected empirical risk of the stochastic classifier.
//!
//! For one datum the risk is `E_{ξ~N(0,I)} ℓ(P(m̂ + Hξ) + F(x)_I, y)`, an
//! integral over `R^{c-1}`; substituting `ξ = Φ⁻¹(u)` moves it to the unit
//! cube where Sobol points are used. One point set is shared by all data.
//!
//! The deterministic QMC rule uses the first `n` Sobol points (index 0
//! included) XOR-shifted by `2^-(m+1)` in every coordinate, `m = ⌈log₂ n⌉`.
//! Every coordinate of the first `2^m` points is a permutation of `j/2^m`, so
//! the shift moves the points to cell midpoints and keeps them away from the
//! boundary where `Φ⁻¹` is infinite.

mod directions;
mod normal;
mod sobol;

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use normal::{gauss_cdf, gauss_icdf, gauss_sf};
pub use sobol::{sobol_points, Directions, SobolStream, MAX_DIM};

use crate::error::{Error, Result};
use crate::par;
use crate::pushforward::MarginalMoments;

/// Default number of integration points, `2^13`.
pub const DEFAULT_POINTS: usize = 1 << 13;
/// Number of randomly shifted replicates behind an error estimate.
pub const DEFAULT_REPLICATES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Misclassification indicator; ties count as errors.
    ZeroOne,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::ZeroOne => "01",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "01" | "zero_one" => Ok(LossKind::ZeroOne),
            _ => Err(Error::InvalidArgument(format!("unknown loss {s:?}"))),
        }
    }

    pub fn eval(self, logits: &[f64], label: usize) -> f64 {
        match self {
            LossKind::CrossEntropy => log_sum_exp(logits) - logits[label],
            LossKind::ZeroOne => {
                let target = logits[label];
                let wrong = logits.iter().enumerate().any(|(j, &z)| j != label && z >= target);
                if wrong || !target.is_finite() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `softmax(z) - e_label`, the cross-entropy gradient.
fn ce_grad(z: &[f64], label: usize, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(z) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    out[label] -= 1.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Qmc,
    Mc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Qmc => "qmc",
            Method::Mc => "mc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskEstimate {
    pub value: f64,
    pub n_points: usize,
    pub method: Method,
    pub error_estimate: Option<f64>,
}

/// Integration nodes already mapped to standard normal space, `n × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    normals: Vec<f64>,
    method: Method,
}

impl PointSet {
    /// Deterministic midpoint-shifted Sobol net.
    pub fn qmc(dim: usize, n: usize) -> Result<Self> {
        let m = n.max(1).next_power_of_two().trailing_zeros();
        if m >= 32 {
            return Err(Error::InvalidArgument(format!("too many points: {n}")));
        }
        let shift = vec![1u32 << (31 - m); dim];
        PointSet::qmc_shifted(dim, n, &shift)
    }

    /// First `n` Sobol points from index 0 with a digital (XOR) shift.
    pub fn qmc_shifted(dim: usize, n: usize, shift: &[u32]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("point count must be positive".into()));
        }
        if shift.len() != dim {
            return Err(Error::shape(format!("shift of length {dim}"), format!("length {}", shift.len())));
        }
        let directions = Directions::new(dim)?;
        let mut normals = vec![0.0; n * dim];
        let mut bits = vec![0u32; dim];
        for (i, row) in normals.chunks_mut(dim).enumerate() {
            directions.point_bits(i as u64, &mut bits);
            for ((z, &b), &s) in row.iter_mut().zip(&bits).zip(shift) {
                let x = b ^ s;
                let u = if x == 0 { 0.5 * sobol::to_unit(1) } else { sobol::to_unit(x) };
                *z = normal::icdf_unchecked(u);
            }
        }
        Ok(PointSet { dim, normals, method: Method::Qmc })
    }

    /// `n` i.i.d. standard normal points.
    pub fn mc(dim: usize, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::InvalidArgument("point count and dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normals = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(PointSet { dim, normals, method: Method::Mc })
    }

    pub fn from_normals(dim: usize, normals: Vec<f64>, method: Method) -> Result<Self> {
        if dim == 0 || normals.is_empty() || normals.len() % dim != 0 {
            return Err(Error::shape(format!("multiple of {dim}"), format!("{}", normals.len())));
        }
        Ok(PointSet { dim, normals, method })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.normals.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn normal(&self, j: usize) -> &[f64] {
        &self.normals[j * self.dim..(j + 1) * self.dim]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.normals.chunks(self.dim)
    }
}

/// Logits `P(m̂ + Hξ) + shift` for a standard normal `ξ`.
fn logits_at(mom: &MarginalMoments, xi: &[f64], out: &mut [f64]) {
    let k = mom.mean_hat.len();
    let mut last = 0.0;
    for i in 0..k {
        let mut y = mom.mean_hat[i];
        for (j, &x) in xi.iter().enumerate().take(i + 1) {
            y += mom.chol[(i, j)] * x;
        }
        out[i] = y + mom.logits_shift[i];
        last -= y;
    }
    out[k] = last + mom.logits_shift[k];
}

/// Logits at a unit-cube point `u`, i.e. with `ξ = Φ⁻¹(u)`.
pub fn standardized_logits(mom: &MarginalMoments, u: &[f64]) -> Result<DVector<f64>> {
    let k = mom.mean_hat.len();
    if u.len() != k {
        return Err(Error::shape(format!("point of dimension {k}"), format!("{}", u.len())));
    }
    let xi = u.iter().map(|&x| gauss_icdf(x)).collect::<Result<Vec<_>>>()?;
    let mut out = DVector::zeros(k + 1);
    logits_at(mom, &xi, out.as_mut_slice());
    Ok(out)
}

fn check_batch(moments: &[MarginalMoments], labels: &[usize], points: &PointSet) -> Result<()> {
    if moments.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", moments.len()), format!("{}", labels.len())));
    }
    if moments.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for (mom, &y) in moments.iter().zip(labels) {
        if mom.mean_hat.len() != points.dim() {
            return Err(Error::shape(format!("dimension {}", points.dim()), format!("{}", mom.mean_hat.len())));
        }
        if y >= mom.classes() {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
    }
    Ok(())
}

/// Average loss of one datum over the point set.
pub fn datum_risk(mom: &MarginalMoments, label: usize, loss: LossKind, points: &PointSet) -> f64 {
    let mut z = vec![0.0; points.dim() + 1];
    let mut total = 0.0;
    for xi in points.rows() {
        logits_at(mom, xi, &mut z);
        total += loss.eval(&z, label);
    }
    total / points.len() as f64
}

fn batch_mean(moments: &[MarginalMoments], labels: &[usize], loss: LossKind, points: &PointSet) -> f64 {
    par::sum(moments.len(), |k| datum_risk(&moments[k], labels[k], loss, points)) / moments.len() as f64
}

/// `(1/m) Σ_k (1/n) Σ_j ℓ(logits_k(ξ_j), y_k)`.
pub fn expected_risk(
    moments: &[MarginalMoments],
    labels: &[usize],
    loss: LossKind,
    points: &PointSet,
) -> Result<RiskEstimate> {
    check_batch(moments, labels, points)?;
    let value = batch_mean(moments, labels, loss, points);
    if !value.is_finite() {
        return Err(Error::NonFinite("expected risk".into()));
    }
    Ok(RiskEstimate { value, n_points: points.len(), method: points.method(), error_estimate: None })
}

/// QMC estimate with an error estimate: the sample standard deviation of
/// `replicates` estimates on randomly shifted nets of the same size.
pub fn expected_risk_replicated(
    moments: &[MarginalMoments],
    labels: &[usize],
    loss: LossKind,
    n_points: usize,
    replicates: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    let dim = moments.first().ok_or(Error::Empty("batch"))?.mean_hat.len();
    let mut est = expected_risk(moments, labels, loss, &PointSet::qmc(dim, n_points)?)?;
    if replicates >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            let shift: Vec<u32> = (0..dim).map(|_| rng.gen()).collect();
            let points = PointSet::qmc_shifted(dim, n_points, &shift)?;
            values.push(batch_mean(moments, labels, loss, &points));
        }
        let mean = values.iter().sum::<f64>() / replicates as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (replicates - 1) as f64;
        est.error_estimate = Some(var.sqrt());
    }
    Ok(est)
}

/// Monte Carlo estimate with `n_points` i.i.d. normal draws shared across
/// the batch; the error estimate is the standard error over draws.
pub fn mc_expected_risk(
    moments: &[MarginalMoments],
    labels: &[usize],
    loss: LossKind,
    n_points: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    let dim = moments.first().ok_or(Error::Empty("batch"))?.mean_hat.len();
    let points = PointSet::mc(dim, n_points, seed)?;
    check_batch(moments, labels, &points)?;
    // Per-draw batch averages, so the standard error accounts for sharing.
    let per_draw = par::map(points.len(), |j| {
        let mut z = vec![0.0; dim + 1];
        let xi = points.normal(j);
        let mut total = 0.0;
        for (mom, &y) in moments.iter().zip(labels) {
            logits_at(mom, xi, &mut z);
            total += loss.eval(&z, y);
        }
        total / moments.len() as f64
    });
    let n = per_draw.len() as f64;
    let value = per_draw.iter().sum::<f64>() / n;
    let var =
        if per_draw.len() > 1 { per_draw.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(RiskEstimate { value, n_points, method: Method::Mc, error_estimate: Some((var / n).sqrt()) })
}

/// Streaming Monte Carlo risk of a single datum, returning the mean and its
/// standard error; memory use is independent of `n_points`.
pub fn mc_datum_reference(
    mom: &MarginalMoments,
    label: usize,
    loss: LossKind,
    n_points: usize,
    seed: u64,
) -> (f64, f64) {
    let dim = mom.mean_hat.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = vec![0.0; dim];
    let mut z = vec![0.0; dim + 1];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_points {
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        logits_at(mom, &xi, &mut z);
        let l = loss.eval(&z, label);
        sum += l;
        sum_sq += l * l;
    }
    let n = n_points as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

/// Gradient of a scalar with respect to one datum's moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentGrad {
    pub mean_hat: DVector<f64>,
    /// Lower triangular.
    pub chol: DMatrix<f64>,
    pub logits_shift: DVector<f64>,
}

/// Flat layout of a per-point gradient: `[shift (c) | mean (c-1) | H lower, row-major]`.
struct GradLayout {
    c: usize,
}

impl GradLayout {
    fn len(&self) -> usize {
        let k = self.c - 1;
        self.c + k + k * (k + 1) / 2
    }

    fn point_grad(
        &self,
        mom: &MarginalMoments,
        label: usize,
        xi: &[f64],
        z: &mut [f64],
        g: &mut [f64],
        out: &mut [f64],
    ) {
        let c = self.c;
        let k = c - 1;
        logits_at(mom, xi, z);
        ce_grad(z, label, g);
        out[..c].copy_from_slice(g);
        let mut pos = c + k;
        for i in 0..k {
            // (Pᵀg)_i = g_i - g_{c-1}
            let pg = g[i] - g[k];
            out[c + i] = pg;
            for &x in &xi[..=i] {
                out[pos] = pg * x;
                pos += 1;
            }
        }
    }

    fn unpack(&self, flat: &[f64]) -> MomentGrad {
        let c = self.c;
        let k = c - 1;
        let mut chol = DMatrix::zeros(k, k);
        let mut pos = c + k;
        for i in 0..k {
            for j in 0..=i {
                chol[(i, j)] = flat[pos];
                pos += 1;
            }
        }
        MomentGrad {
            mean_hat: DVector::from_column_slice(&flat[c..c + k]),
            chol,
            logits_shift: DVector::from_column_slice(&flat[..c]),
        }
    }
}

fn require_differentiable(loss: LossKind) -> Result<()> {
    match loss {
        LossKind::CrossEntropy => Ok(()),
        LossKind::ZeroOne => Err(Error::NotDifferentiable("01 loss has no gradient; use the cross-entropy surrogate")),
    }
}

/// Per-datum gradients of `upstream · expected_risk` computed as the point
/// average of integrand gradients.
pub fn expected_risk_grad(
    moments: &[MarginalMoments],
    labels: &[usize],
    loss: LossKind,
    points: &PointSet,
    upstream: f64,
) -> Result<Vec<MomentGrad>> {
    require_differentiable(loss)?;
    check_batch(moments, labels, points)?;
    let layout = GradLayout { c: points.dim() + 1 };
    let scale = upstream / (points.len() as f64 * moments.len() as f64);
    Ok(par::map(moments.len(), |k| {
        let c = layout.c;
        let (mut z, mut g) = (vec![0.0; c], vec![0.0; c]);
        let mut term = vec![0.0; layout.len()];
        let mut acc = vec![0.0; layout.len()];
        for xi in points.rows() {
            layout.point_grad(&moments[k], labels[k], xi, &mut z, &mut g, &mut term);
            for (a, t) in acc.iter_mut().zip(&term) {
                *a += t;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
        layout.unpack(&acc)
    }))
}

/// The same gradient by reverse-mode differentiation of the estimator: the
/// adjoint `upstream` flows through the batch mean and the point mean to each
/// term, which then pulls back through its integrand. For power-of-two batch
/// and point counts with unit upstream the adjoints are exact powers of two,
/// so this agrees bit for bit with [`expected_risk_grad`].
pub fn expected_risk_backprop(
    moments: &[MarginalMoments],
    labels: &[usize],
    loss: LossKind,
    points: &PointSet,
    upstream: f64,
) -> Result<Vec<MomentGrad>> {
    require_differentiable(loss)?;
    check_batch(moments, labels, points)?;
    let layout = GradLayout { c: points.dim() + 1 };
    let datum_adjoint = upstream / moments.len() as f64;
    let term_adjoint = datum_adjoint / points.len() as f64;
    Ok(par::map(moments.len(), |k| {
        let c = layout.c;
        let (mut z, mut g) = (vec![0.0; c], vec![0.0; c]);
        let mut term = vec![0.0; layout.len()];
        let mut acc = vec![0.0; layout.len()];
        for xi in points.rows() {
            layout.point_grad(&moments[k], labels[k], xi, &mut z, &mut g, &mut term);
            for (a, t) in acc.iter_mut().zip(&term) {
                *a += term_adjoint * t;
            }
        }
        layout.unpack(&acc)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub n_points: usize,
    pub datum_id: usize,
    pub abs_error: f64,
}

/// Per-datum absolute errors of QMC and MC estimates against a large Monte
/// Carlo reference, for each point count.
pub fn integration_benchmark(
    moments: &[MarginalMoments],
    labels: &[usize],
    loss: LossKind,
    point_counts: &[usize],
    reference_points: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let dim = moments.first().ok_or(Error::Empty("batch"))?.mean_hat.len();
    let reference = par::map(moments.len(), |k| {
        let stream_seed = seed ^ 0x5eed_0000_0000_0000 ^ k as u64;
        mc_datum_reference(&moments[k], labels[k], loss, reference_points, stream_seed).0
    });
    let mut rows = Vec::new();
    for (ci, &n) in point_counts.iter().enumerate() {
        let qmc = PointSet::qmc(dim, n)?;
        let mc = PointSet::mc(dim, n, seed.wrapping_add(ci as u64 + 1))?;
        check_batch(moments, labels, &qmc)?;
        let errors = par::map(moments.len(), |k| {
            (
                (datum_risk(&moments[k], labels[k], loss, &qmc) - reference[k]).abs(),
                (datum_risk(&moments[k], labels[k], loss, &mc) - reference[k]).abs(),
            )
        });
        for (k, (eq, em)) in errors.into_iter().enumerate() {
            rows.push(BenchRow { method: Method::Qmc, n_points: n, datum_id: k, abs_error: eq });
            rows.push(BenchRow { method: Method::Mc, n_points: n, datum_id: k, abs_error: em });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(mut w: impl Write, rows: &[BenchRow]) -> io::Result<()> {
    writeln!(w, "method,n_points,datum_id,abs_error")?;
    for r in rows {
        writeln!(w, "{},{},{},{:e}", r.method.as_str(), r.n_points, r.datum_id, r.abs_error)?;
    }
    Ok(())
}
