use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cuot::autodiff::{Graph, Tensor};
use cuot::divergence::EntropyKind;
use cuot::experiment::{Preset, Scale};
use cuot::metrics::{w2_exact, EmpiricalDistribution};
use cuot::nets::ArchConfig;
use cuot::oracle::{solve_primal, DiscreteInstance, SolverOptions};
use cuot::rng;
use cuot::synthdata::{sample_target, Dataset, DatasetKind};
use cuot::trainer::{run_epochs, TrainState};

fn filled(rows: usize, cols: usize, phase: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i as f64) * 0.37 + phase).sin())
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn matmul_backward(c: &mut Criterion) {
    let a = filled(256, 128, 0.1);
    let w = filled(128, 128, 0.7);
    c.bench_function("matmul_silu_backward_256x128x128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(a.clone());
            let wv = g.leaf(w.clone());
            let h = g.matmul(x, wv).unwrap();
            let s = g.silu(h).unwrap();
            let m = g.mean(s).unwrap();
            g.backward(m).unwrap()
        })
    });
}

fn exact_w2(c: &mut Criterion) {
    let mut group = c.benchmark_group("w2_exact");
    for n in [100, 400] {
        let pa = sample_target(DatasetKind::Moons, n, 0.05, 1)
            .unwrap()
            .points();
        let pb = sample_target(DatasetKind::Moons, n, 0.05, 2)
            .unwrap()
            .points();
        let (da, db) = (
            EmpiricalDistribution::new(pa).unwrap(),
            EmpiricalDistribution::new(pb).unwrap(),
        );
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| w2_exact(&da, &db).unwrap())
        });
    }
    group.finish();
}

fn oracle_solve(c: &mut Criterion) {
    let inst = DiscreteInstance::random(
        &mut rng::stream(0, 1),
        1,
        5,
        5,
        (EntropyKind::Kl, EntropyKind::Kl),
        1.0,
    );
    let opts = SolverOptions::default();
    c.bench_function("oracle_solve_5x5_kl", |b| {
        b.iter(|| solve_primal(&inst, &opts).unwrap())
    });
}

fn training_iteration(c: &mut Criterion) {
    // One epoch of one iteration: n_train equals the batch size.
    let mut cfg = Preset::Clean {
        kind: DatasetKind::Circles,
        method: cuot::experiment::Method::Cuotm,
    }
    .config(0, Scale::Desk);
    cfg.arch = ArchConfig::with_width(32);
    cfg.batch_size = 64;
    cfg.data.n_train = 64;
    cfg.data.n_test = 64;
    cfg.eval_every = 1_000_000;
    cfg.eval_points = 64;
    let data = Dataset::generate(&cfg.data, 0).unwrap();
    let fresh = TrainState::new(cfg).unwrap();
    c.bench_function("train_iteration_d32_m64", |b| {
        b.iter_batched(
            || fresh.clone(),
            |mut s| run_epochs(&mut s, &data, 1).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(
    benches,
    matmul_backward,
    exact_w2,
    oracle_solve,
    training_iteration
);
criterion_main!(benches);
