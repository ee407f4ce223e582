use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tlab_core::deep_linear::{empirical_gradients, init_balanced, min_norm_solution, population_gradients};
use tlab_core::relu_mf::{
    make_teacher, population_gradients_relu, projection_norms, random_student, sample_teacher_dataset,
    DEFAULT_EIG_CUTOFF,
};
use tlab_core::rng::{gaussian_matrix, rng_from};
use tlab_core::task_gen::{empirical_w1, make_task_pair, sample_dataset};
use tlab_core::InitMode;

fn linear_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear_gradients");
    for d in [100, 200, 500] {
        let pair = make_task_pair(d, 0.5, 1).unwrap();
        let data = sample_dataset(&pair.beta_tgt, d / 2, 0.2, 2).unwrap();
        let net = init_balanced(2, d, 1e-2, 1.0, InitMode::Gaussian, 3).unwrap();
        group.bench_with_input(BenchmarkId::new("population", d), &d, |b, _| {
            b.iter(|| population_gradients(black_box(&net), black_box(&pair.beta_src)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("empirical", d), &d, |b, _| {
            b.iter(|| empirical_gradients(black_box(&net), black_box(&data)).unwrap())
        });
    }
    group.finish();
}

fn pseudoinverse(c: &mut Criterion) {
    let pair = make_task_pair(200, 0.5, 4).unwrap();
    let data = sample_dataset(&pair.beta_tgt, 100, 0.2, 5).unwrap();
    c.bench_function("min_norm_solution_100x200", |b| {
        b.iter(|| min_norm_solution(black_box(&data.x), black_box(&data.y)).unwrap())
    });
}

fn relu_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("relu");
    group.sample_size(20);
    let teacher = make_teacher(50, 50, 6).unwrap();
    for m in [100, 400] {
        let student = random_student(m, 50, 7).unwrap();
        group.bench_with_input(BenchmarkId::new("population_gradients", m), &m, |b, _| {
            b.iter(|| population_gradients_relu(black_box(&student), black_box(&teacher)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("projection_norms", m), &m, |b, _| {
            b.iter(|| projection_norms(black_box(&student), black_box(&teacher), DEFAULT_EIG_CUTOFF).unwrap())
        });
    }
    let student = random_student(400, 50, 8).unwrap();
    let data = sample_teacher_dataset(&teacher, 800, 0.0, 9).unwrap();
    group.bench_function("activations_800x400", |b| b.iter(|| black_box(&student).activations(black_box(&data.x))));
    group.finish();
}

fn wasserstein(c: &mut Criterion) {
    let mut group = c.benchmark_group("empirical_w1");
    group.sample_size(10);
    for m in [100, 300] {
        let mut rng = rng_from(10);
        let a = gaussian_matrix(&mut rng, m, 201);
        let b = gaussian_matrix(&mut rng, m, 201);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |bench, _| {
            bench.iter(|| empirical_w1(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, linear_gradients, pseudoinverse, relu_kernels, wasserstein);
criterion_main!(benches);
