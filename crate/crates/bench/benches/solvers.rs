use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use semalign::admm::run_centralized;
use semalign::federation::{build_nodes, run_federated};
use semalign::harness::{ExperimentConfig, Scenario};
use semalign::linalg::{complex_gaussian, gram, sylvester_solve, trace_ball_project};
use semalign::rng::substream;
use semalign::semantic::pair_matrix;
use semalign::{AdmmOptions, AdmmState, AlignmentProblem};

fn default_problem() -> AlignmentProblem {
    let cfg = ExperimentConfig::default();
    let sc = Scenario::prepare(&cfg, 27).unwrap();
    let x = pair_matrix(&sc.x_train).unwrap();
    let ys = sc.y_train.iter().map(|y| pair_matrix(y).unwrap()).collect();
    AlignmentProblem::new(x, ys, sc.channels.clone(), cfg.p_t, cfg.rho).unwrap()
}

fn sylvester(c: &mut Criterion) {
    let mut group = c.benchmark_group("sylvester_solve");
    for &(p, q) in &[(8usize, 16usize), (16, 32), (32, 64)] {
        let mut rng = substream(1, "bench", 0);
        let a = gram(&complex_gaussian(p, p + 1, 1.0, &mut rng));
        let b = gram(&complex_gaussian(q, q + 1, 1.0, &mut rng));
        let rhs = complex_gaussian(p, q, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{p}x{q}")), &(), |bench, _| {
            bench.iter(|| sylvester_solve(black_box(&a), black_box(&b), 0.5, black_box(&rhs)).unwrap())
        });
    }
    group.finish();
}

fn projection(c: &mut Criterion) {
    let mut rng = substream(2, "bench", 0);
    let z = complex_gaussian(8, 16, 1.0, &mut rng);
    c.bench_function("trace_ball_project_8x16", |b| b.iter(|| trace_ball_project(black_box(&z), 1.0).unwrap()));
}

fn admm_iteration(c: &mut Criterion) {
    let problem = default_problem();
    let opts = AdmmOptions { iterations: 1, ..AdmmOptions::default() };
    let init = AdmmState::initial(&problem, 27);
    c.bench_function("admm_iteration_centralized", |b| {
        b.iter(|| run_centralized(&problem, &opts, init.clone()).unwrap())
    });
    c.bench_function("admm_iteration_federated", |b| {
        b.iter(|| {
            let (mut ap, mut users) = build_nodes(&problem, &init, opts.aggregation, true).unwrap();
            run_federated(&mut ap, &mut users, &opts, &problem).unwrap()
        })
    });
}

criterion_group!(benches, sylvester, projection, admm_iteration);
criterion_main!(benches);
