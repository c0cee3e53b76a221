use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use unilabel::graph::{continuous_block, normalize_adjacency};
use unilabel::kernels::{matmul_with, Matrix};
use unilabel::solver::{initial_betas, solve_mappings, SolverConfig};
use unilabel::synth::{generate_world, WorldConfig};
use unilabel::trainer::{run_pipeline, Schedule, TrainConfig};
use unilabel::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, 512, 256);
    let b = random(&mut rng, 256, 256);
    let mut group = c.benchmark_group("matmul_512x256x256");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| matmul_with(exec, black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn solver(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sizes = vec![24; 8];
    let labels: usize = sizes.iter().sum();
    let raw = random(&mut rng, 40, labels).scale(3.0);
    let adjacency = normalize_adjacency(&raw, &sizes).unwrap();
    let blocks: Vec<Matrix> = (0..sizes.len())
        .map(|d| continuous_block(&adjacency, &sizes, d).unwrap())
        .collect();
    let betas = initial_betas(&sizes);
    let config = SolverConfig::default();
    let mut group = c.benchmark_group("solve_mappings_8x24");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| solve_mappings(black_box(&blocks), &betas, &config, exec).unwrap())
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let world = generate_world(&WorldConfig::canonical(), 0).unwrap();
    let schedule = Schedule {
        multihead_iters: 40,
        gnn_iters: 10,
        seg_iters: 10,
        cycles: 2,
        final_iters: 40,
        ..Schedule::default()
    };
    let mut group = c.benchmark_group("pipeline_short");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = TrainConfig {
            schedule: schedule.clone(),
            exec,
            ..TrainConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| run_pipeline(&world.taxonomies, &world, world.config.obs_dim, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, solver, pipeline);
criterion_main!(benches);
