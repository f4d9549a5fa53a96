//! Sequential vs rayon-parallel execution of the data-parallel kernels.
//!
//! With the `parallel` feature disabled both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ldaf_core::flow::{FlowParams, FlowSolver};
use ldaf_core::manifold::{lift, project_tangent, AssignmentState, GraphShape};
use ldaf_core::par::{self, Mode};
use ldaf_core::pushforward::{ClassNodePropagator, LowRankCov, MarginalMoments};
use ldaf_core::quadrature::{expected_risk, expected_risk_grad, LossKind, PointSet};

const DATA: usize = 256;

fn problem() -> (FlowParams, Vec<AssignmentState>, LowRankCov) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = GraphShape::new(10, 3).unwrap();
    let n = shape.dim();
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
    let params = FlowParams::new(shape, (&m + m.transpose()) * 0.5).unwrap();
    let states = (0..DATA)
        .map(|_| {
            let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            lift(&AssignmentState::barycenter(shape), &project_tangent(&v, shape).unwrap()).unwrap()
        })
        .collect();
    let cov = LowRankCov::random_prior(shape, &mut rng);
    (params, states, cov)
}

fn modes() -> [(&'static str, Mode); 2] {
    [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)]
}

fn bench(c: &mut Criterion) {
    let (params, states, cov) = problem();
    let solver = FlowSolver::default();
    let build = || -> Vec<ClassNodePropagator> {
        par::map(states.len(), |k| {
            ClassNodePropagator::new(&params, &states[k], 1.0, DVector::zeros(3), &solver).unwrap()
        })
    };
    let props = build();
    let moments: Vec<MarginalMoments> = props.iter().map(|p| p.moments(&cov).unwrap()).collect();
    let labels: Vec<usize> = (0..DATA).map(|k| k % 3).collect();
    let points = PointSet::qmc(2, 4096).unwrap();

    let mut group = c.benchmark_group("propagators");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_mode(mode);
            b.iter(build)
        });
    }
    group.finish();

    let mut group = c.benchmark_group("expected_risk_ce");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_mode(mode);
            b.iter(|| expected_risk(&moments, &labels, LossKind::CrossEntropy, &points).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("expected_risk_grad");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_mode(mode);
            b.iter(|| expected_risk_grad(&moments, &labels, LossKind::CrossEntropy, &points, 1.0).unwrap())
        });
    }
    group.finish();
    par::set_mode(Mode::Parallel);
}

criterion_group!(benches, bench);
criterion_main!(benches);
