//! Prior training: empirical risk minimization of the mean classifier.
//!
//! The gradient of the cross-entropy of `v(T)_I + F(x)_I` is propagated
//! through `v(T)`, the last column of `expm(T Ã)` with `Ã = [[A, b], [0, 0]]`.
//! For a loss `⟨Ȳ, expm(X)⟩` the adjoint of `X` is the Fréchet derivative
//! `L(Xᵀ, Ȳ)`, read off a `2(N+1)` block exponential. From `Ā, b̄` the chain
//! continues through `A = Π₀ΩR_{s₀}`, `b = Π₀Ωs₀`, the lift `s₀ = exp_{1}(v⁰)`
//! and the affine feature map.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::{Dataset, Split};
use super::model::{forward_deterministic, is_error, FeatureKind, FeatureMap, ModelBundle};
use crate::error::{Error, Result};
use crate::expm::{expm, expm_frechet};
use crate::flow::{assemble_linearized, FlowParams, FlowSolver};
use crate::manifold::{project_blocks, GraphShape};
use crate::par;
use crate::pushforward::LowRankCov;
use crate::quadrature::{expected_risk, expected_risk_grad, LossKind, PointSet};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub n_nodes: usize,
    pub t: f64,
    pub feature: FeatureKind,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Applied to `Ω` only.
    pub weight_decay: f64,
    /// Minibatch size; the full training split when at least its size.
    pub batch_size: usize,
    pub seed: u64,
    /// Also fit the covariance by gradient descent on the expected
    /// cross-entropy of the training split (off by default).
    pub train_covariance: bool,
    pub covariance_steps: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            n_nodes: 10,
            t: 1.0,
            feature: FeatureKind::Linear,
            steps: 200,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 128,
            seed: 0,
            train_covariance: false,
            covariance_steps: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Minibatch cross-entropy before the update.
    pub loss: f64,
    /// Minibatch 01 error before the update.
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<TrainLogEntry>,
    /// Full training-split cross-entropy before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Gradient with respect to the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    /// Symmetric part of `∂L/∂Ω`.
    pub omega: DMatrix<f64>,
    pub weight: Option<DMatrix<f64>>,
    pub bias: Option<DVector<f64>>,
}

impl ParamGrad {
    fn zeros_like(model: &ModelBundle) -> Self {
        let n = model.shape.dim();
        let (weight, bias) = match &model.features {
            FeatureMap::Identity { .. } => (None, None),
            FeatureMap::Linear { weight, .. } => (Some(DMatrix::zeros(n, weight.ncols())), Some(DVector::zeros(n))),
        };
        ParamGrad { omega: DMatrix::zeros(n, n), weight, bias }
    }

    fn add_scaled(&mut self, other: &ParamGrad, s: f64) {
        self.omega += &other.omega * s;
        if let (Some(a), Some(b)) = (&mut self.weight, &other.weight) {
            *a += b * s;
        }
        if let (Some(a), Some(b)) = (&mut self.bias, &other.bias) {
            *a += b * s;
        }
    }

    fn is_finite(&self) -> bool {
        self.omega.iter().all(|x| x.is_finite())
            && self.weight.as_ref().is_none_or(|w| w.iter().all(|x| x.is_finite()))
            && self.bias.as_ref().is_none_or(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// `Π₀` applied to every column.
fn project_columns(m: &mut DMatrix<f64>, c: usize) {
    for mut col in m.column_iter_mut() {
        project_blocks(col.as_mut_slice(), c);
    }
}

/// Cross-entropy of one datum, its logits and the parameter gradient.
pub fn datum_loss_grad(
    model: &ModelBundle,
    x: &[f64],
    label: usize,
    solver: &FlowSolver,
) -> Result<(f64, DVector<f64>, ParamGrad)> {
    let shape = model.shape;
    let (n, c) = (shape.dim(), shape.classes());
    solver.require_dense(n + 1)?;
    let t = model.t;
    let (s0, v0) = model.initial_state(x)?;
    let sys = assemble_linearized(&model.flow, &s0)?;
    let a = sys.dense();
    let b = sys.b().as_vector();

    // Forward: v = last column of expm(X), X = [[tA, tb], [0, 0]].
    let mut x_mat = DMatrix::zeros(n + 1, n + 1);
    x_mat.view_mut((0, 0), (n, n)).copy_from(&(&a * t));
    x_mat.view_mut((0, n), (n, 1)).copy_from(&(b * t));
    let e = expm(&x_mat);
    let logits = DVector::from_fn(c, |i, _| e[(i, n)] + v0[i]);
    let loss = LossKind::CrossEntropy.eval(logits.as_slice(), label);
    let max = logits.max();
    let probs = logits.map(|z| (z - max).exp());
    let mut g = &probs / probs.sum();
    g[label] -= 1.0;

    // Backward through the exponential.
    let mut y_bar = DMatrix::zeros(n + 1, n + 1);
    for i in 0..c {
        y_bar[(i, n)] = g[i];
    }
    let (_, l) = expm_frechet(&x_mat.transpose(), &y_bar)?;
    let a_bar = l.view((0, 0), (n, n)) * t;
    let b_bar = l.view((0, n), (n, 1)).column(0) * t;

    // A = Π₀ΩR, b = Π₀Ωs₀.
    let s = s0.as_vector();
    let mut r = DMatrix::zeros(n, n);
    for blk in 0..shape.nodes() {
        let o = blk * c;
        for i in 0..c {
            for j in 0..c {
                r[(o + i, o + j)] = if i == j { s[o + i] } else { 0.0 } - s[o + i] * s[o + j];
            }
        }
    }
    let mut pa = a_bar.clone();
    project_columns(&mut pa, c);
    let mut pb = b_bar.clone();
    project_blocks(pb.as_mut_slice(), c);
    let mut omega_bar = &pa * &r + &pb * s.transpose();
    omega_bar = (&omega_bar + omega_bar.transpose()) * 0.5;

    let omega = model.flow.omega();
    let r_bar = omega * &pa;
    let mut s_bar = omega * &pb;
    for blk in 0..shape.nodes() {
        let o = blk * c;
        for i in 0..c {
            let mut acc = r_bar[(o + i, o + i)];
            for j in 0..c {
                acc -= (r_bar[(o + i, o + j)] + r_bar[(o + j, o + i)]) * s[o + j];
            }
            s_bar[o + i] += acc;
        }
    }
    // The lift's Jacobian at the barycentre base point is R_{s₀}.
    let mut v0_bar = &r * s_bar;
    for i in 0..c {
        v0_bar[i] += g[i];
    }
    project_blocks(v0_bar.as_mut_slice(), c);
    let (weight, bias) = match &model.features {
        FeatureMap::Identity { .. } => (None, None),
        FeatureMap::Linear { .. } => {
            let xv = DVector::from_column_slice(x);
            (Some(&v0_bar * xv.transpose()), Some(v0_bar))
        }
    };
    Ok((loss, logits, ParamGrad { omega: omega_bar, weight, bias }))
}

/// Mean cross-entropy, mean 01 error and mean gradient over `rows`.
pub fn batch_loss_grad(
    model: &ModelBundle,
    data: &Dataset,
    rows: &[usize],
    solver: &FlowSolver,
) -> Result<(f64, f64, ParamGrad)> {
    if rows.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let parts = par::try_map(rows.len(), |k| datum_loss_grad(model, data.row(rows[k]), data.label(rows[k]), solver))?;
    let scale = 1.0 / rows.len() as f64;
    let mut grad = ParamGrad::zeros_like(model);
    let (mut loss, mut errors) = (0.0, 0.0);
    for (k, (l, logits, g)) in parts.iter().enumerate() {
        loss += l;
        errors += is_error(logits.as_slice(), data.label(rows[k])) as u8 as f64;
        grad.add_scaled(g, scale);
    }
    Ok((loss * scale, errors * scale, grad))
}

/// Mean cross-entropy of the mean classifier over `rows`.
pub fn mean_loss(model: &ModelBundle, data: &Dataset, rows: &[usize], solver: &FlowSolver) -> Result<f64> {
    let losses = par::try_map(rows.len(), |k| {
        let (logits, _) = forward_deterministic(model, data.row(rows[k]), solver)?;
        Ok::<_, Error>(LossKind::CrossEntropy.eval(logits.as_slice(), data.label(rows[k])))
    })?;
    Ok(losses.iter().sum::<f64>() / rows.len().max(1) as f64)
}

/// Freshly initialized, untrained model for the given input dimension.
pub fn init_model(input_dim: usize, classes: usize, config: &PriorConfig) -> Result<ModelBundle> {
    let shape = GraphShape::new(config.n_nodes, classes)?;
    let n = shape.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let features = match config.feature {
        FeatureKind::Identity => {
            if input_dim != n {
                return Err(Error::shape(
                    format!("input dimension {n} for the identity feature map"),
                    format!("{input_dim}"),
                ));
            }
            FeatureMap::Identity { shape }
        }
        FeatureKind::Linear => {
            let scale = 1.0 / (input_dim as f64).sqrt();
            let w = DMatrix::from_fn(n, input_dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            FeatureMap::linear(shape, w, DVector::zeros(n))?
        }
    };
    let scale = 0.1 / (n as f64).sqrt();
    let m = DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let flow = FlowParams::new(shape, (&m + m.transpose()) * 0.5)?;
    let mut cov_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0f1_0000);
    let prior = LowRankCov::random_prior(shape, &mut cov_rng);
    if !(config.t > 0.0) {
        return Err(Error::InvalidArgument(format!("integration time {} must be positive", config.t)));
    }
    Ok(ModelBundle { shape, features, flow, prior, posterior: None, t: config.t, metadata: BTreeMap::new() })
}

/// Trains `Ω` and the feature map on the rows tagged [`Split::Train`] only.
pub fn train_prior(data: &Dataset, config: &PriorConfig, solver: &FlowSolver) -> Result<(ModelBundle, TrainReport)> {
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.momentum) || config.batch_size == 0 {
        return Err(Error::InvalidArgument(format!("invalid prior config {config:?}")));
    }
    let mut model = init_model(data.dim(), data.classes(), config)?;
    let initial_loss = mean_loss(&model, data, &train, solver)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut velocity = ParamGrad::zeros_like(&model);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = if config.batch_size >= train.len() {
            train.clone()
        } else {
            let mut picks = sample(&mut rng, train.len(), config.batch_size).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| train[i]).collect()
        };
        let (loss, error, mut grad) = batch_loss_grad(&model, data, &batch, solver)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged(format!("non-finite training loss {loss} at step {step}")));
        }
        log.push(TrainLogEntry { step, loss, error });
        grad.omega += model.flow.omega() * config.weight_decay;
        let mut decayed = ParamGrad::zeros_like(&model);
        decayed.add_scaled(&velocity, config.momentum);
        decayed.add_scaled(&grad, 1.0);
        velocity = decayed;
        model.flow.update(&(&velocity.omega * -config.lr));
        if let FeatureMap::Linear { weight, bias, .. } = &mut model.features {
            if let (Some(vw), Some(vb)) = (&velocity.weight, &velocity.bias) {
                *weight -= vw * config.lr;
                *bias -= vb * config.lr;
            }
        }
    }
    if config.train_covariance {
        model.prior = fit_covariance(&model, data, &train, config, solver)?;
    }
    let final_loss = mean_loss(&model, data, &train, solver)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite final training loss {final_loss}")));
    }
    model.metadata.insert("prior.seed".into(), config.seed.to_string());
    model.metadata.insert("prior.steps".into(), config.steps.to_string());
    model.metadata.insert("dataset.sha256".into(), data.content_hash());
    Ok((model, TrainReport { log, initial_loss, final_loss }))
}

/// Plain gradient descent on the expected training cross-entropy with
/// respect to the covariance parameters.
fn fit_covariance(
    model: &ModelBundle,
    data: &Dataset,
    rows: &[usize],
    config: &PriorConfig,
    solver: &FlowSolver,
) -> Result<LowRankCov> {
    let props = model.propagators(data, rows, solver)?;
    let labels: Vec<usize> = rows.iter().map(|&i| data.label(i)).collect();
    let points = PointSet::qmc(model.shape.classes() - 1, 256)?;
    let mut cov = model.prior.clone();
    for _ in 0..config.covariance_steps {
        let moments = par::try_map(props.len(), |k| props[k].moments(&cov))?;
        let grads = expected_risk_grad(&moments, &labels, LossKind::CrossEntropy, &points, 1.0)?;
        let parts = par::map(props.len(), |k| props[k].moments_grad(&cov, &moments[k], &grads[k].chol));
        let mut gd = DVector::zeros(cov.k());
        let mut gq = DVector::zeros(cov.k());
        for (d, q) in parts {
            gd += d;
            gq += q;
        }
        cov = cov.step(config.lr, &gd, &gq);
    }
    let moments = par::try_map(props.len(), |k| props[k].moments(&cov))?;
    expected_risk(&moments, &labels, LossKind::CrossEntropy, &points)?;
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::{SyntheticKind, SyntheticSpec};

    fn blobs(m: usize, seed: u64) -> Dataset {
        SyntheticSpec { kind: SyntheticKind::GaussianBlobs, dim: 4, classes: 3, separation: 6.0 }
            .sample(m, seed)
            .unwrap()
    }

    fn perturbed(model: &ModelBundle, f: impl FnOnce(&mut ModelBundle)) -> ModelBundle {
        let mut m = model.clone();
        f(&mut m);
        m
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = blobs(5, 1);
        let config = PriorConfig { n_nodes: 3, ..Default::default() };
        let mut model = init_model(4, 3, &config).unwrap();
        // Larger coupling so the flow contributes noticeably.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = model.shape.dim();
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
        model.flow = FlowParams::new(model.shape, (&m + m.transpose()) * 0.5).unwrap();
        let solver = FlowSolver::default();
        let rows: Vec<usize> = (0..5).collect();
        let (_, _, grad) = batch_loss_grad(&model, &data, &rows, &solver).unwrap();
        let loss = |m: &ModelBundle| mean_loss(m, &data, &rows, &solver).unwrap();
        let h = 1e-6;
        for _ in 0..10 {
            let dir = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let dir = (&dir + dir.transpose()) * 0.5;
            let plus = perturbed(&model, |m| m.flow.update(&(&dir * h)));
            let minus = perturbed(&model, |m| m.flow.update(&(&dir * -h)));
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grad.omega.component_mul(&dir).sum();
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "omega: {fd} vs {an}");
        }
        let gw = grad.weight.clone().unwrap();
        let gb = grad.bias.clone().unwrap();
        for (i, j) in [(0, 0), (4, 2), (8, 3), (2, 1)] {
            let bump = |s: f64| {
                perturbed(&model, |m| {
                    if let FeatureMap::Linear { weight, .. } = &mut m.features {
                        weight[(i, j)] += s;
                    }
                })
            };
            let fd = (loss(&bump(h)) - loss(&bump(-h))) / (2.0 * h);
            assert!((fd - gw[(i, j)]).abs() <= 1e-4 * fd.abs().max(1e-3), "W[{i},{j}]: {fd} vs {}", gw[(i, j)]);
            let bump = |s: f64| {
                perturbed(&model, |m| {
                    if let FeatureMap::Linear { bias, .. } = &mut m.features {
                        bias[i] += s;
                    }
                })
            };
            let fd = (loss(&bump(h)) - loss(&bump(-h))) / (2.0 * h);
            assert!((fd - gb[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "b[{i}]");
        }
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let data = blobs(30, 3);
        let config = PriorConfig { n_nodes: 3, steps: 0, ..Default::default() };
        let (model, report) = train_prior(&data, &config, &FlowSolver::default()).unwrap();
        assert_eq!(model.flow, init_model(4, 3, &config).unwrap().flow);
        assert!(report.log.is_empty());
    }

    #[test]
    fn training_reduces_loss_and_fits_blobs() {
        let data = blobs(150, 4);
        let config = PriorConfig { n_nodes: 4, steps: 60, batch_size: 64, ..Default::default() };
        let solver = FlowSolver::default();
        let (model, report) = train_prior(&data, &config, &solver).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let rows: Vec<usize> = (0..data.len()).collect();
        let (_, error, _) = batch_loss_grad(&model, &data, &rows, &solver).unwrap();
        assert!(error <= 0.05, "training error {error}");
    }

    #[test]
    fn validation_rows_never_read() {
        let mut data = blobs(60, 5);
        data.assign_splits(Some(0.25), 0.0, 1).unwrap();
        let config = PriorConfig { n_nodes: 3, steps: 5, batch_size: 16, ..Default::default() };
        let solver = FlowSolver::default();
        let (a, _) = train_prior(&data, &config, &solver).unwrap();
        // Rewrite every validation row with sentinel features and labels.
        let val = data.indices(Split::Validation);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..data.len() {
            if val.contains(&i) {
                features.extend_from_slice(&[1e6; 4]);
                labels.push(2);
            } else {
                features.extend_from_slice(data.row(i));
                labels.push(data.label(i));
            }
        }
        let mut poisoned = Dataset::new(4, 3, features, labels).unwrap();
        poisoned.assign_splits(Some(0.25), 0.0, 1).unwrap();
        assert_eq!(poisoned.indices(Split::Validation), val);
        let (b, _) = train_prior(&poisoned, &config, &solver).unwrap();
        assert_eq!(a.flow, b.flow);
        assert_eq!(a.features, b.features);
        assert_eq!(a.prior, b.prior);
    }
}
