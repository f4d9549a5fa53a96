//! Error rates of the deterministic and stochastic classifiers.

use super::dataset::Dataset;
use super::model::{forward_deterministic, is_error, ModelBundle};
use crate::error::{Error, Result};
use crate::flow::FlowSolver;
use crate::par;
use crate::pushforward::{ClassNodePropagator, LowRankCov, MarginalMoments};
use crate::quadrature::{expected_risk, LossKind, PointSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax of the mean classifier.
    Deterministic,
    /// Argmax of the expected class probabilities under the covariance.
    StochasticMean,
    /// Expected 01 risk of a randomly drawn classifier.
    StochasticExpected,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Deterministic => "deterministic",
            EvalMode::StochasticMean => "stochastic_mean",
            EvalMode::StochasticExpected => "stochastic_expected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(EvalMode::Deterministic),
            "stochastic_mean" => Ok(EvalMode::StochasticMean),
            "stochastic_expected" => Ok(EvalMode::StochasticExpected),
            _ => Err(Error::InvalidArgument(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

fn probability_vote(mom: &MarginalMoments, points: &PointSet) -> Vec<f64> {
    let c = mom.classes();
    let k = c - 1;
    let mut avg = vec![0.0; c];
    let mut z = vec![0.0; c];
    for j in 0..points.len() {
        let xi = points.normal(j);
        let mut last = 0.0;
        for i in 0..k {
            let mut y = mom.mean_hat[i];
            for (l, &x) in xi.iter().enumerate().take(i + 1) {
                y += mom.chol[(i, l)] * x;
            }
            z[i] = y + mom.logits_shift[i];
            last -= y;
        }
        z[k] = last + mom.logits_shift[k];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        for (a, v) in avg.iter_mut().zip(&z) {
            *a += (v - max).exp() / total;
        }
    }
    avg
}

/// Error rate from cached propagators.
pub fn evaluate_propagators(
    props: &[ClassNodePropagator],
    labels: &[usize],
    mode: EvalMode,
    cov: &LowRankCov,
    n_points: usize,
) -> Result<f64> {
    if props.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let m = props.len() as f64;
    match mode {
        EvalMode::Deterministic => {
            Ok(par::sum(props.len(), |k| is_error(props[k].mean_logits().as_slice(), labels[k]) as u8 as f64) / m)
        }
        EvalMode::StochasticMean => {
            let points = PointSet::qmc(cov.shape().classes() - 1, n_points)?;
            let errors = par::try_map(props.len(), |k| {
                let mom = props[k].moments(cov)?;
                Ok::<_, Error>(is_error(&probability_vote(&mom, &points), labels[k]) as u8 as f64)
            })?;
            Ok(errors.iter().sum::<f64>() / m)
        }
        EvalMode::StochasticExpected => {
            let points = PointSet::qmc(cov.shape().classes() - 1, n_points)?;
            let moments = par::try_map(props.len(), |k| props[k].moments(cov))?;
            Ok(expected_risk(&moments, labels, LossKind::ZeroOne, &points)?.value)
        }
    }
}

/// Error rate on the given rows under `cov` (ignored for the deterministic
/// mode).
pub fn evaluate(
    model: &ModelBundle,
    data: &Dataset,
    rows: &[usize],
    mode: EvalMode,
    cov: &LowRankCov,
    n_points: usize,
    solver: &FlowSolver,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if mode == EvalMode::Deterministic {
        let errors = par::try_map(rows.len(), |k| {
            let (logits, _) = forward_deterministic(model, data.row(rows[k]), solver)?;
            Ok::<_, Error>(is_error(logits.as_slice(), data.label(rows[k])) as u8 as f64)
        })?;
        return Ok(errors.iter().sum::<f64>() / rows.len() as f64);
    }
    let props = model.propagators(data, rows, solver)?;
    let labels: Vec<usize> = rows.iter().map(|&i| data.label(i)).collect();
    evaluate_propagators(&props, &labels, mode, cov, n_points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::{SyntheticKind, SyntheticSpec};
    use crate::pipeline::train::{train_prior, PriorConfig};
    use crate::quadrature::mc_expected_risk;

    #[test]
    fn modes_agree_in_the_delta_limit() {
        let data = SyntheticSpec { kind: SyntheticKind::GaussianBlobs, dim: 3, classes: 3, separation: 2.0 }
            .sample(90, 1)
            .unwrap();
        let config = PriorConfig { n_nodes: 3, steps: 10, batch_size: 32, ..Default::default() };
        let solver = FlowSolver::default();
        let (model, _) = train_prior(&data, &config, &solver).unwrap();
        let rows: Vec<usize> = (0..data.len()).collect();
        let tiny = model.prior.scaled(1e-7).unwrap();
        let det = evaluate(&model, &data, &rows, EvalMode::Deterministic, &tiny, 64, &solver).unwrap();
        let exp = evaluate(&model, &data, &rows, EvalMode::StochasticExpected, &tiny, 64, &solver).unwrap();
        let mean = evaluate(&model, &data, &rows, EvalMode::StochasticMean, &tiny, 64, &solver).unwrap();
        assert!(det > 0.0);
        assert_eq!(det, exp);
        assert_eq!(det, mean);
    }

    #[test]
    fn expected_mode_matches_sampling() {
        let data = SyntheticSpec { kind: SyntheticKind::GaussianBlobs, dim: 3, classes: 3, separation: 2.0 }
            .sample(40, 2)
            .unwrap();
        let config = PriorConfig { n_nodes: 3, steps: 5, batch_size: 40, ..Default::default() };
        let solver = FlowSolver::default();
        let (model, _) = train_prior(&data, &config, &solver).unwrap();
        let rows: Vec<usize> = (0..data.len()).collect();
        let cov = model.prior.scaled(3.0).unwrap();
        let qmc = evaluate(&model, &data, &rows, EvalMode::StochasticExpected, &cov, 8192, &solver).unwrap();
        let props = model.propagators(&data, &rows, &solver).unwrap();
        let moments: Vec<_> = props.iter().map(|p| p.moments(&cov).unwrap()).collect();
        let mc = mc_expected_risk(&moments, data.labels(), LossKind::ZeroOne, 1 << 18, 3).unwrap();
        assert!((qmc - mc.value).abs() <= 3.0 * mc.error_estimate.unwrap() + 1e-4, "{qmc} vs {}", mc.value);
    }
}
