//! PAC-Bayes-λ bound, KL divergence of low-rank Gaussians, posterior
//! optimization and certificates.
//!
//! Both distributions live on the `k = (c-1)n` dimensional coordinate space of
//! `T₀` with covariances `M²` and `M̃²`, `M = Diag(d) + qqᵀ`. All quantities are
//! evaluated in `O(k)` by writing the matrices involved as a diagonal plus a
//! few rank-one terms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::par;
use crate::pushforward::{ClassNodePropagator, LowRankCov};
use crate::quadrature::{expected_risk, expected_risk_grad, expected_risk_replicated, LossKind, PointSet};

/// `Diag(diag) + Σ_t u_t v_tᵀ`.
struct DiagPlusLowRank {
    diag: DVector<f64>,
    terms: Vec<(DVector<f64>, DVector<f64>)>,
}

impl DiagPlusLowRank {
    fn frobenius_sq(&self) -> f64 {
        let mut total = self.diag.norm_squared();
        for (u, v) in &self.terms {
            total += 2.0 * self.diag.iter().zip(u.iter()).zip(v.iter()).map(|((d, a), b)| d * a * b).sum::<f64>();
        }
        for (us, vs) in &self.terms {
            for (ut, vt) in &self.terms {
                total += us.dot(ut) * vs.dot(vt);
            }
        }
        total
    }

    fn diagonal(&self) -> DVector<f64> {
        let mut out = self.diag.clone();
        for (u, v) in &self.terms {
            out += u.component_mul(v);
        }
        out
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = self.diag.component_mul(x);
        for (u, v) in &self.terms {
            out.axpy(v.dot(x), u, 1.0);
        }
        out
    }

    fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = self.diag.component_mul(x);
        for (u, v) in &self.terms {
            out.axpy(u.dot(x), v, 1.0);
        }
        out
    }

    /// `(Diag(p) - α a aᵀ) · self`.
    fn left_mul_inverse(&self, inv: &ShermanMorrison) -> DiagPlusLowRank {
        let diag = inv.p.component_mul(&self.diag);
        let mut terms = Vec::with_capacity(self.terms.len() + 1);
        for (u, v) in &self.terms {
            let pu = inv.p.component_mul(u) - &inv.a * (inv.alpha * inv.a.dot(u));
            terms.push((pu, v.clone()));
        }
        terms.push((&inv.a * -inv.alpha, inv.a.component_mul(&self.diag)));
        DiagPlusLowRank { diag, terms }
    }
}

/// `M⁻¹ = Diag(p) - α a aᵀ` with `p = 1/d`, `a = q/d`, `α = 1/(1 + qᵀa)`.
struct ShermanMorrison {
    p: DVector<f64>,
    a: DVector<f64>,
    alpha: f64,
    /// `log det M = Σ log dᵢ + log(1 + qᵀD⁻¹q)`.
    logdet: f64,
}

impl ShermanMorrison {
    fn new(cov: &LowRankCov) -> Self {
        let p = cov.d().map(|x| 1.0 / x);
        let a = cov.q().component_mul(&p);
        let s = cov.q().dot(&a);
        let logdet = cov.d().iter().map(|x| x.ln()).sum::<f64>() + s.ln_1p();
        ShermanMorrison { p, a, alpha: 1.0 / (1.0 + s), logdet }
    }

    fn inverse_diagonal(&self) -> DVector<f64> {
        &self.p - self.a.map(|x| self.alpha * x * x)
    }
}

fn check_pair(post: &LowRankCov, prior: &LowRankCov) -> Result<()> {
    if post.shape() != prior.shape() {
        return Err(Error::shape(format!("{:?}", prior.shape()), format!("{:?}", post.shape())));
    }
    Ok(())
}

/// `X = M̃⁻¹ M` in diagonal-plus-rank-two form.
fn ratio(post: &LowRankCov, prior_inv: &ShermanMorrison) -> DiagPlusLowRank {
    let m = DiagPlusLowRank { diag: post.d().clone(), terms: vec![(post.q().clone(), post.q().clone())] };
    m.left_mul_inverse(prior_inv)
}

/// `KL(N(0, M²) ‖ N(0, M̃²)) = ½(‖M̃⁻¹M‖_F² - k) + log det M̃ - log det M`.
pub fn kl_lowrank(post: &LowRankCov, prior: &LowRankCov) -> Result<f64> {
    check_pair(post, prior)?;
    let prior_inv = ShermanMorrison::new(prior);
    let post_inv = ShermanMorrison::new(post);
    let x = ratio(post, &prior_inv);
    let kl = 0.5 * (x.frobenius_sq() - post.k() as f64) + prior_inv.logdet - post_inv.logdet;
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    // Round-off can leave a tiny negative value when the two coincide.
    Ok(kl.max(0.0))
}

/// Gradient of [`kl_lowrank`] with respect to the posterior `(d, q)`.
pub fn kl_lowrank_grad(post: &LowRankCov, prior: &LowRankCov) -> Result<(DVector<f64>, DVector<f64>)> {
    check_pair(post, prior)?;
    let prior_inv = ShermanMorrison::new(prior);
    let post_inv = ShermanMorrison::new(post);
    // ½‖X‖² has gradient Y = M̃⁻¹X with respect to M; -log det M has -M⁻¹.
    let y = ratio(post, &prior_inv).left_mul_inverse(&prior_inv);
    let q = post.q();
    let gd = y.diagonal() - post_inv.inverse_diagonal();
    // M⁻¹q = α a for the posterior's own Sherman–Morrison factors.
    let gq = y.apply(q) + y.apply_transpose(q) - &post_inv.a * (2.0 * post_inv.alpha);
    Ok((gd, gq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    pub emp_risk: f64,
    pub kl: f64,
    pub m: usize,
    pub epsilon: f64,
    pub lambda: f64,
}

impl BoundInputs {
    /// Ranges required for a meaningful bound: `Ê ∈ [0, 1]`, `ε ∈ (0, 1)`.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.emp_risk) {
            return Err(Error::InvalidArgument(format!("empirical risk {} outside [0,1]", self.emp_risk)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0,1)", self.epsilon)));
        }
        check_common(self.kl, self.m, self.lambda)
    }
}

fn check_common(kl: f64, m: usize, lambda: f64) -> Result<()> {
    if !(kl >= 0.0) || !kl.is_finite() {
        return Err(Error::InvalidArgument(format!("KL {kl} must be finite and non-negative")));
    }
    if m == 0 {
        return Err(Error::Empty("validation set"));
    }
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside (0,2)")));
    }
    Ok(())
}

/// `ln(2√m / ε)`.
pub fn log_term(m: usize, epsilon: f64) -> f64 {
    (2.0 * (m as f64).sqrt() / epsilon).ln()
}

/// `Ê/(1 - λ/2) + (KL + ln(2√m/ε)) / (mλ(1 - λ/2))`.
///
/// Only `λ`, `m`, `KL` and `ε > 0` are checked here, so the formula can be
/// evaluated for surrogate risks during training.
pub fn bound_eval(inputs: &BoundInputs) -> Result<f64> {
    check_common(inputs.kl, inputs.m, inputs.lambda)?;
    if !(inputs.epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {} must be positive", inputs.epsilon)));
    }
    let BoundInputs { emp_risk, kl, m, epsilon, lambda } = *inputs;
    let damp = 1.0 - 0.5 * lambda;
    Ok(emp_risk / damp + (kl + log_term(m, epsilon)) / (m as f64 * lambda * damp))
}

/// Minimizer of the bound over `λ ∈ (0, 2)`:
/// `λ* = 2 / (√(2mÊ / (KL + ln(2√m/ε)) + 1) + 1)`.
pub fn lambda_opt(emp_risk: f64, kl: f64, m: usize, epsilon: f64) -> Result<f64> {
    check_common(kl, m, 1.0)?;
    if !(emp_risk >= 0.0) || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid risk {emp_risk} or epsilon {epsilon}")));
    }
    let complexity = kl + log_term(m, epsilon);
    Ok(2.0 / ((2.0 * m as f64 * emp_risk / complexity + 1.0).sqrt() + 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorConfig {
    pub alternations: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Integration points for the surrogate risk during training.
    pub n_points: usize,
    pub epsilon: f64,
    /// Stop once successive λ values differ by less than this.
    pub lambda_tol: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig { alternations: 10, epochs: 5, lr: 0.1, n_points: 1024, epsilon: 0.05, lambda_tol: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub alternation: usize,
    pub lambda: f64,
    pub surrogate_risk: f64,
    pub kl: f64,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    MaxAlternations,
    Diverged,
}

impl OptimStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimStatus::Converged => "converged",
            OptimStatus::MaxAlternations => "max_alternations",
            OptimStatus::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorFit {
    /// The iterate with the lowest surrogate bound seen, so never worse than
    /// the prior.
    pub posterior: LowRankCov,
    pub lambda: f64,
    pub trace: Vec<TraceEntry>,
    pub status: OptimStatus,
}

struct Objective<'a> {
    prior: &'a LowRankCov,
    data: &'a [ClassNodePropagator],
    labels: &'a [usize],
    points: PointSet,
    epsilon: f64,
}

impl Objective<'_> {
    fn risk_and_kl(&self, post: &LowRankCov) -> Result<(f64, f64)> {
        let moments = par::try_map(self.data.len(), |k| self.data[k].moments(post))?;
        let risk = expected_risk(&moments, self.labels, LossKind::CrossEntropy, &self.points)?.value;
        Ok((risk, kl_lowrank(post, self.prior)?))
    }

    fn bound(&self, risk: f64, kl: f64, lambda: f64) -> Result<f64> {
        bound_eval(&BoundInputs { emp_risk: risk, kl, m: self.data.len(), epsilon: self.epsilon, lambda })
    }

    /// Gradient of the surrogate bound at fixed λ with respect to `(d, q)`.
    fn gradient(&self, post: &LowRankCov, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = self.data.len();
        let damp = 1.0 - 0.5 * lambda;
        let moments = par::try_map(m, |k| self.data[k].moments(post))?;
        let risk_grads = expected_risk_grad(&moments, self.labels, LossKind::CrossEntropy, &self.points, 1.0 / damp)?;
        let per_datum = par::map(m, |k| self.data[k].moments_grad(post, &moments[k], &risk_grads[k].chol));
        let (mut gd, mut gq) = kl_lowrank_grad(post, self.prior)?;
        let kl_weight = 1.0 / (m as f64 * lambda * damp);
        gd *= kl_weight;
        gq *= kl_weight;
        for (d, q) in per_datum {
            gd += d;
            gq += q;
        }
        if gd.iter().chain(gq.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("posterior gradient".into()));
        }
        Ok((gd, gq))
    }
}

/// Cross-entropy surrogate bound at fixed `λ` and its gradient with respect
/// to the posterior `(d, q)`.
pub fn surrogate_bound_grad(
    posterior: &LowRankCov,
    prior: &LowRankCov,
    data: &[ClassNodePropagator],
    labels: &[usize],
    points: &PointSet,
    epsilon: f64,
    lambda: f64,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    check_data(data, labels, prior)?;
    let obj = Objective { prior, data, labels, points: points.clone(), epsilon };
    let (risk, kl) = obj.risk_and_kl(posterior)?;
    let bound = obj.bound(risk, kl, lambda)?;
    let (gd, gq) = obj.gradient(posterior, lambda)?;
    Ok((bound, gd, gq))
}

/// Smallest step tried by the backtracking search, relative to the nominal
/// learning rate.
const MIN_STEP_FRACTION: f64 = 1.0 / (1u64 << 30) as f64;

impl Objective<'_> {
    /// One gradient step in `(log d, q)` with Armijo backtracking from `lr`;
    /// `None` when no step size decreases the bound.
    fn descend(
        &self,
        post: &LowRankCov,
        current: f64,
        lambda: f64,
        lr: f64,
    ) -> Result<Option<(LowRankCov, f64, f64, f64)>> {
        let (gd, gq) = self.gradient(post, lambda)?;
        // Squared norm of the gradient in the (log d, q) coordinates.
        let slope: f64 = gd.iter().zip(post.d().iter()).map(|(g, d)| (g * d).powi(2)).sum::<f64>() + gq.norm_squared();
        if slope == 0.0 || lr == 0.0 {
            return Ok(None);
        }
        let mut step = lr;
        while step >= lr * MIN_STEP_FRACTION {
            let cand = post.step_log_diagonal(step, &gd, &gq);
            // A candidate whose covariance cannot be factorized is rejected
            // like one that increases the bound.
            if let Ok((risk, kl)) = self.risk_and_kl(&cand) {
                if let Ok(bound) = self.bound(risk, kl, lambda) {
                    if bound <= current - 1e-4 * step * slope {
                        return Ok(Some((cand, risk, kl, bound)));
                    }
                }
            }
            step *= 0.5;
        }
        Ok(None)
    }
}

fn check_data(data: &[ClassNodePropagator], labels: &[usize], prior: &LowRankCov) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if data.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", data.len()), format!("{}", labels.len())));
    }
    if data[0].shape() != prior.shape() {
        return Err(Error::shape(format!("{:?}", prior.shape()), format!("{:?}", data[0].shape())));
    }
    Ok(())
}

/// Alternates the exact λ update with `epochs` gradient steps on the
/// cross-entropy surrogate bound, starting from the prior. Steps are taken in
/// `(log d, q)` and backtracked until the bound decreases: the KL term has
/// curvature of order `1/d̃²` wherever the prior diagonal is small, so no fixed
/// step in `d` is stable.
pub fn optimize_posterior(
    prior: &LowRankCov,
    data: &[ClassNodePropagator],
    labels: &[usize],
    config: &PosteriorConfig,
) -> Result<PosteriorFit> {
    check_data(data, labels, prior)?;
    if config.alternations == 0 || !(config.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid posterior config {config:?}")));
    }
    let c = prior.shape().classes();
    let obj =
        Objective { prior, data, labels, points: PointSet::qmc(c - 1, config.n_points)?, epsilon: config.epsilon };
    let m = data.len();

    let mut post = prior.clone();
    let (risk, kl) = obj.risk_and_kl(&post)?;
    let mut lambda = lambda_opt(risk, kl, m, config.epsilon)?;
    let mut last_bound = obj.bound(risk, kl, lambda)?;
    let mut trace = vec![TraceEntry { alternation: 0, lambda, surrogate_risk: risk, kl, bound: last_bound }];
    let mut best = (last_bound, post.clone(), lambda);
    let mut rises = 0;
    let mut status = OptimStatus::MaxAlternations;

    for alternation in 1..=config.alternations {
        let (mut risk, mut kl) = obj.risk_and_kl(&post)?;
        let mut current = obj.bound(risk, kl, lambda)?;
        for _ in 0..config.epochs {
            match obj.descend(&post, current, lambda, config.lr)? {
                Some((next, r, k, b)) => {
                    (post, risk, kl, current) = (next, r, k, b);
                }
                None => break,
            }
        }
        let next = lambda_opt(risk, kl, m, config.epsilon)?;
        let bound = obj.bound(risk, kl, next)?;
        trace.push(TraceEntry { alternation, lambda: next, surrogate_risk: risk, kl, bound });
        if bound < best.0 {
            best = (bound, post.clone(), next);
        }
        rises = if bound > last_bound { rises + 1 } else { 0 };
        last_bound = bound;
        let step = (next - lambda).abs();
        lambda = next;
        if rises >= 3 {
            status = OptimStatus::Diverged;
            break;
        }
        if step < config.lambda_tol {
            status = OptimStatus::Converged;
            break;
        }
    }
    Ok(PosteriorFit { posterior: best.1, lambda: best.2, trace, status })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifyConfig {
    pub epsilon: f64,
    pub n_points: usize,
    /// Shifted replicates for the error estimate; below 2 disables it.
    pub replicates: usize,
    /// Add the error estimate to `Ê` before bounding.
    pub padding: bool,
    pub seed: u64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            epsilon: 0.05,
            n_points: crate::quadrature::DEFAULT_POINTS,
            replicates: 8,
            padding: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub bound: f64,
    pub lambda_star: f64,
    pub kl: f64,
    /// QMC expected empirical 01 risk.
    pub emp_risk_01: f64,
    pub emp_risk_error: Option<f64>,
    /// Risk value entering the bound (`emp_risk_01`, plus the error estimate
    /// when padded).
    pub bounded_risk: f64,
    pub padding: bool,
    pub epsilon: f64,
    pub m: usize,
    pub n_points: usize,
    pub provenance: BTreeMap<String, String>,
}

/// Issues a 01-loss certificate for `posterior` against `prior` on held-out
/// data.
pub fn certify(
    posterior: &LowRankCov,
    prior: &LowRankCov,
    data: &[ClassNodePropagator],
    labels: &[usize],
    config: &CertifyConfig,
    provenance: BTreeMap<String, String>,
) -> Result<Certificate> {
    check_data(data, labels, prior)?;
    let moments = par::try_map(data.len(), |k| data[k].moments(posterior))?;
    let est =
        expected_risk_replicated(&moments, labels, LossKind::ZeroOne, config.n_points, config.replicates, config.seed)?;
    let kl = kl_lowrank(posterior, prior)?;
    let bounded_risk = match (config.padding, est.error_estimate) {
        (true, Some(e)) => (est.value + e).min(1.0),
        _ => est.value,
    };
    let m = data.len();
    let lambda_star = lambda_opt(bounded_risk, kl, m, config.epsilon)?;
    let inputs = BoundInputs { emp_risk: bounded_risk, kl, m, epsilon: config.epsilon, lambda: lambda_star };
    inputs.validate()?;
    Ok(Certificate {
        bound: bound_eval(&inputs)?,
        lambda_star,
        kl,
        emp_risk_01: est.value,
        emp_risk_error: est.error_estimate,
        bounded_risk,
        padding: config.padding,
        epsilon: config.epsilon,
        m,
        n_points: config.n_points,
        provenance,
    })
}

impl Certificate {
    pub fn inputs(&self) -> BoundInputs {
        BoundInputs {
            emp_risk: self.bounded_risk,
            kl: self.kl,
            m: self.m,
            epsilon: self.epsilon,
            lambda: self.lambda_star,
        }
    }

    /// Recomputes the bound from the stored fields; returns the absolute
    /// discrepancy.
    pub fn verify(&self) -> Result<f64> {
        let inputs = self.inputs();
        inputs.validate()?;
        Ok((bound_eval(&inputs)? - self.bound).abs())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# PAC-Bayes-lambda risk certificate\n");
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("loss", "01".into());
        kv("bound", self.bound.to_string());
        kv("lambda_star", self.lambda_star.to_string());
        kv("kl", self.kl.to_string());
        kv("emp_risk_01", self.emp_risk_01.to_string());
        kv("emp_risk_error", self.emp_risk_error.map_or_else(|| "none".into(), |e| e.to_string()));
        kv("bounded_risk", self.bounded_risk.to_string());
        kv("padding", self.padding.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("m", self.m.to_string());
        kv("n_points", self.n_points.to_string());
        for (k, v) in &self.provenance {
            kv(&format!("provenance.{k}"), v.clone());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut provenance = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
            if let Some(p) = k.strip_prefix("provenance.") {
                provenance.insert(p.to_string(), v.to_string());
            } else if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Format(format!("duplicate key {k}")));
            }
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| Error::Format(format!("missing key {k}")));
        if take("loss")? != "01" {
            return Err(Error::Format("certificates are issued for 01 loss only".into()));
        }
        let bound = parse_num(&take("bound")?)?;
        let lambda_star = parse_num(&take("lambda_star")?)?;
        let kl = parse_num(&take("kl")?)?;
        let emp_risk_01 = parse_num(&take("emp_risk_01")?)?;
        let emp_risk_error = match take("emp_risk_error")?.as_str() {
            "none" => None,
            v => Some(parse_num(v)?),
        };
        let bounded_risk = parse_num(&take("bounded_risk")?)?;
        let padding = take("padding")?.parse().map_err(|_| Error::Format("padding must be a boolean".into()))?;
        let epsilon = parse_num(&take("epsilon")?)?;
        let m = parse_num(&take("m")?)?;
        let n_points = parse_num(&take("n_points")?)?;
        if let Some(k) = fields.keys().next() {
            return Err(Error::Format(format!("unknown key {k}")));
        }
        Ok(Certificate {
            bound,
            lambda_star,
            kl,
            emp_risk_01,
            emp_risk_error,
            bounded_risk,
            padding,
            epsilon,
            m,
            n_points,
            provenance,
        })
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("cannot parse number {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::GraphShape;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cov(shape: GraphShape, rng: &mut impl Rng) -> LowRankCov {
        let k = shape.tangent_dim();
        let d = DVector::from_fn(k, |_, _| rng.gen_range(0.2..2.0));
        let q = DVector::from_fn(k, |_, _| rng.gen_range(-0.5..0.5));
        LowRankCov::new(shape, d, q).unwrap()
    }

    fn dense_kl(post: &LowRankCov, prior: &LowRankCov) -> f64 {
        let m = post.dense_inner();
        let mt = prior.dense_inner();
        let sigma = &m * &m;
        let sigma_t = &mt * &mt;
        let k = m.nrows() as f64;
        let logdet = |s: &DMatrix<f64>| SymmetricEigen::new(s.clone()).eigenvalues.iter().map(|x| x.ln()).sum::<f64>();
        let tr = sigma_t.clone().lu().solve(&sigma).unwrap().trace();
        0.5 * (tr - k + logdet(&sigma_t) - logdet(&sigma))
    }

    #[test]
    fn kl_zero_at_prior_and_positive_elsewhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = GraphShape::new(5, 3).unwrap();
        let prior = random_cov(shape, &mut rng);
        assert!(kl_lowrank(&prior, &prior).unwrap() < 1e-12);
        for _ in 0..100 {
            let dd = DVector::from_fn(10, |_, _| rng.gen_range(-0.05..0.05));
            let dq = DVector::from_fn(10, |_, _| rng.gen_range(-0.05..0.05));
            let post = LowRankCov::new(shape, prior.d() + dd, prior.q() + dq).unwrap();
            assert!(kl_lowrank(&post, &prior).unwrap() > 0.0);
        }
    }

    #[test]
    fn kl_isotropic_closed_form() {
        let shape = GraphShape::new(4, 3).unwrap();
        let sigma: f64 = 1.7;
        let post = LowRankCov::isotropic(shape, sigma).unwrap();
        let prior = LowRankCov::isotropic(shape, 1.0).unwrap();
        let want = 8.0 / 2.0 * (sigma * sigma - 1.0 - 2.0 * sigma.ln());
        assert!((kl_lowrank(&post, &prior).unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn kl_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = GraphShape::new(10, 3).unwrap();
        for _ in 0..10 {
            let post = random_cov(shape, &mut rng);
            let prior = random_cov(shape, &mut rng);
            let got = kl_lowrank(&post, &prior).unwrap();
            let want = dense_kl(&post, &prior);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = GraphShape::new(6, 3).unwrap();
        let post = random_cov(shape, &mut rng);
        let prior = random_cov(shape, &mut rng);
        let (gd, gq) = kl_lowrank_grad(&post, &prior).unwrap();
        let h = 1e-6;
        for j in 0..post.k() {
            let mut dp = post.d().clone();
            let mut dm = post.d().clone();
            dp[j] += h;
            dm[j] -= h;
            let fp = kl_lowrank(&LowRankCov::new(shape, dp, post.q().clone()).unwrap(), &prior).unwrap();
            let fm = kl_lowrank(&LowRankCov::new(shape, dm, post.q().clone()).unwrap(), &prior).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gd[j]).abs() <= 1e-6 * fd.abs().max(1.0), "d[{j}]");
            let mut qp = post.q().clone();
            let mut qm = post.q().clone();
            qp[j] += h;
            qm[j] -= h;
            let fp = kl_lowrank(&LowRankCov::new(shape, post.d().clone(), qp).unwrap(), &prior).unwrap();
            let fm = kl_lowrank(&LowRankCov::new(shape, post.d().clone(), qm).unwrap(), &prior).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gq[j]).abs() <= 1e-6 * fd.abs().max(1.0), "q[{j}]");
        }
    }

    #[test]
    fn kl_grad_diagonal_case() {
        let shape = GraphShape::new(3, 3).unwrap();
        let d = DVector::from_vec(vec![0.5, 1.0, 1.5, 2.0, 0.3, 0.9]);
        let dt = DVector::from_vec(vec![1.0, 0.7, 1.2, 0.4, 0.3, 2.0]);
        let post = LowRankCov::new(shape, d.clone(), DVector::zeros(6)).unwrap();
        let prior = LowRankCov::new(shape, dt.clone(), DVector::zeros(6)).unwrap();
        let (gd, gq) = kl_lowrank_grad(&post, &prior).unwrap();
        for i in 0..6 {
            let want = d[i] / (dt[i] * dt[i]) - 1.0 / d[i];
            assert!((gd[i] - want).abs() < 1e-14);
        }
        assert_eq!(gq.amax(), 0.0);
    }

    #[test]
    fn kl_minimized_at_prior_along_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = GraphShape::new(4, 4).unwrap();
        let prior = random_cov(shape, &mut rng);
        let dir_d = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let dir_q = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let grid: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.002).collect();
        let values: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let post = LowRankCov::new(shape, prior.d() + &dir_d * t, prior.q() + &dir_q * t).unwrap();
                kl_lowrank(&post, &prior).unwrap()
            })
            .collect();
        let argmin = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(grid[argmin], 0.0);
    }

    #[test]
    fn bound_examples() {
        let zero = BoundInputs { emp_risk: 0.0, kl: 0.0, m: 1, epsilon: 2.0, lambda: 0.7 };
        assert_eq!(bound_eval(&zero).unwrap(), 0.0);
        let b = bound_eval(&BoundInputs { emp_risk: 0.05, kl: 10.0, m: 10_000, epsilon: 0.05, lambda: 1.0 }).unwrap();
        let want = 0.05 / 0.5 + (10.0 + 4000f64.ln()) / 5000.0;
        assert!((b - want).abs() < 1e-15);
        assert!((b - 0.1036588).abs() < 1e-6);
        assert!(bound_eval(&BoundInputs { lambda: 2.0, ..zero }).is_err());
        assert!(bound_eval(&BoundInputs { lambda: 0.0, ..zero }).is_err());
        let mut prev = 0.0;
        for i in 1..=8 {
            let lambda = 2.0 - 10f64.powi(-i);
            let v = bound_eval(&BoundInputs { emp_risk: 0.05, kl: 10.0, m: 10_000, epsilon: 0.05, lambda }).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 1e4);
    }

    #[test]
    fn lambda_opt_against_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((lambda_opt(0.0, 3.0, 100, 0.05).unwrap() - 1.0).abs() < 1e-15);
        for _ in 0..20 {
            let emp = rng.gen_range(0.0..0.5);
            let kl = rng.gen_range(0.0..50.0);
            let m = rng.gen_range(10..100_000);
            let eps = rng.gen_range(0.001..0.2);
            let star = lambda_opt(emp, kl, m, eps).unwrap();
            assert!(star > 0.0 && star < 2.0);
            let f = |l: f64| bound_eval(&BoundInputs { emp_risk: emp, kl, m, epsilon: eps, lambda: l }).unwrap();
            let grid: Vec<f64> = (1..10_000).map(|i| i as f64 * 2.0 / 10_000.0).collect();
            let best = grid.iter().copied().min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
            assert!((best - star).abs() <= 2e-4);
            assert!(f(star) <= f(best) + 1e-15);
        }
        let l3 = lambda_opt(0.1, 5.0, 1_000, 0.05).unwrap();
        let l5 = lambda_opt(0.1, 5.0, 100_000, 0.05).unwrap();
        let l7 = lambda_opt(0.1, 5.0, 10_000_000, 0.05).unwrap();
        assert!(l3 > l5 && l5 > l7 && l7 > 0.0);
    }

    #[test]
    fn certificate_round_trip() {
        let mut provenance = BTreeMap::new();
        provenance.insert("config_hash".into(), "abc123".into());
        provenance.insert("seed".into(), "7".into());
        let cert = Certificate {
            bound: 0.1 + 1e-17,
            lambda_star: 0.123456789012345,
            kl: 3.0e-7,
            emp_risk_01: 1.0 / 3.0,
            emp_risk_error: Some(2.5e-5),
            bounded_risk: 1.0 / 3.0,
            padding: false,
            epsilon: 0.05,
            m: 2000,
            n_points: 8192,
            provenance,
        };
        let text = cert.to_text();
        let back = Certificate::parse(&text).unwrap();
        assert_eq!(back, cert);
        assert_eq!(back.to_text(), text);
        assert!(Certificate::parse(&text.replace("loss = 01", "loss = cross_entropy")).is_err());
        assert!(Certificate::parse(&format!("{text}extra = 1\n")).is_err());
    }

    fn small_problem(
        rng: &mut impl Rng,
        m: usize,
        prior_diag: f64,
    ) -> (Vec<ClassNodePropagator>, Vec<usize>, LowRankCov) {
        use crate::flow::{FlowParams, FlowSolver};
        use crate::manifold::{lift, project_tangent, AssignmentState};
        let shape = GraphShape::new(4, 3).unwrap();
        let n = shape.dim();
        let w = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4));
        let params = FlowParams::new(shape, (&w + w.transpose()) * 0.5).unwrap();
        let props = (0..m)
            .map(|_| {
                let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5));
                let s0 = lift(&AssignmentState::barycenter(shape), &project_tangent(&v, shape).unwrap()).unwrap();
                let shift = DVector::from_column_slice(&v.as_slice()[..3]);
                let shift = shift.add_scalar(-shift.mean());
                ClassNodePropagator::new(&params, &s0, 1.0, shift, &FlowSolver::default()).unwrap()
            })
            .collect();
        let labels = (0..m).map(|_| rng.gen_range(0..3)).collect();
        let k = shape.tangent_dim();
        let d = DVector::from_fn(k, |j, _| if j % 3 == 0 { prior_diag } else { rng.gen_range(0.2..0.8) });
        let q = DVector::from_fn(k, |_, _| rng.gen_range(-0.3..0.3));
        (props, labels, LowRankCov::new(shape, d, q).unwrap())
    }

    #[test]
    fn zero_learning_rate_is_a_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (props, labels, prior) = small_problem(&mut rng, 12, 0.5);
        let cfg = PosteriorConfig { lr: 0.0, n_points: 128, ..Default::default() };
        let fit = optimize_posterior(&prior, &props, &labels, &cfg).unwrap();
        assert_eq!(fit.posterior, prior);
        assert_eq!(fit.status, OptimStatus::Converged);
        assert_eq!(fit.trace.len(), 2);
        assert_eq!(fit.lambda, fit.trace[0].lambda);
        assert_eq!(fit.trace[0].kl, 0.0);
    }

    #[test]
    fn bound_trace_never_increases_even_with_stiff_prior() {
        // Diagonal entries at the floor make the KL curvature ~1e8 in those
        // coordinates; a fixed step of 0.1 would diverge.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (props, labels, prior) = small_problem(&mut rng, 16, crate::pushforward::MIN_DIAGONAL);
        let cfg = PosteriorConfig { n_points: 128, lambda_tol: 1e-12, ..Default::default() };
        let fit = optimize_posterior(&prior, &props, &labels, &cfg).unwrap();
        assert!(fit.trace.len() > 2);
        for w in fit.trace.windows(2) {
            assert!(w[1].bound <= w[0].bound, "{:?}", fit.trace);
        }
        assert!(fit.trace.last().unwrap().bound < fit.trace[0].bound);
        assert!(fit.lambda > 0.0 && fit.lambda < 2.0);
        assert!(fit.posterior.d().iter().all(|&d| d >= crate::pushforward::MIN_DIAGONAL));
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (props, labels, prior) = small_problem(&mut rng, 6, 0.5);
        let post = prior.step_log_diagonal(
            0.05,
            &DVector::from_element(prior.k(), 1.0),
            &DVector::from_element(prior.k(), 0.3),
        );
        let points = PointSet::qmc(2, 64).unwrap();
        let (_, gd, gq) = surrogate_bound_grad(&post, &prior, &props, &labels, &points, 0.05, 0.8).unwrap();
        let h = 1e-6;
        for j in 0..prior.k() {
            for which in 0..2 {
                let eval = |delta: f64| {
                    let (mut d, mut q) = (post.d().clone(), post.q().clone());
                    if which == 0 {
                        d[j] += delta
                    } else {
                        q[j] += delta
                    }
                    let p = LowRankCov::new(post.shape(), d, q).unwrap();
                    surrogate_bound_grad(&p, &prior, &props, &labels, &points, 0.05, 0.8).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if which == 0 { gd[j] } else { gq[j] };
                assert!((an - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{which} {j}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn certificate_verifies_and_bounds_empirical_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (props, labels, prior) = small_problem(&mut rng, 32, 0.5);
        let cfg = CertifyConfig { n_points: 1024, ..Default::default() };
        let cert = certify(&prior, &prior, &props, &labels, &cfg, BTreeMap::new()).unwrap();
        assert_eq!(cert.kl, 0.0);
        assert!(cert.verify().unwrap() <= 1e-12);
        assert!(cert.bound >= cert.emp_risk_01);
        assert!(cert.emp_risk_error.is_some());
        let padded =
            certify(&prior, &prior, &props, &labels, &CertifyConfig { padding: true, ..cfg }, BTreeMap::new()).unwrap();
        assert!(padded.bounded_risk >= padded.emp_risk_01 && padded.bound >= cert.bound);
    }
}
