//! Criterion benches for the data-parallel kernels, comparing the rayon
//! path against the sequential fallback via the runtime override.
//!
//! Build without the `parallel` feature to benchmark the purely sequential
//! build: `cargo bench -p veil-tensor --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use veil_tensor::{nn, ops, set_force_sequential, Tensor};

fn randn(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Tensor::from_vec(data, shape)
}

fn modes() -> Vec<(&'static str, bool)> {
    if veil_tensor::parallel_enabled() {
        vec![("parallel", false), ("sequential", true)]
    } else {
        vec![("sequential", true)]
    }
}

fn bench_conv_forward(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let x = randn(&[16, 64, 16, 16], &mut rng);
    let w = nn::he_normal::<f32>(&[64, 64, 3, 3], 64 * 9, &mut rng);
    let mut group = c.benchmark_group("conv2d_fwd_64x64x3_b16");
    for (name, force_seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_force_sequential(force_seq);
            b.iter(|| veil_tensor::no_grad(|| ops::conv2d(&x, &w, 1, 1)));
            set_force_sequential(false);
        });
    }
    group.finish();
}

fn bench_conv_train_step(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let x = randn(&[16, 64, 16, 16], &mut rng);
    let w = nn::he_normal::<f32>(&[64, 64, 3, 3], 64 * 9, &mut rng);
    let mut group = c.benchmark_group("conv2d_fwd_bwd_64x64x3_b16");
    for (name, force_seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_force_sequential(force_seq);
            b.iter(|| {
                let y = ops::conv2d(&x, &w, 1, 1);
                let loss = ops::mean_all(&ops::mul(&y, &y));
                loss.backward(false)
            });
            set_force_sequential(false);
        });
    }
    group.finish();
}

fn bench_instance_norm(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let x = randn(&[16, 64, 16, 16], &mut rng);
    let norm = nn::InstanceNorm2d::<f32>::new(64);
    let mut group = c.benchmark_group("instance_norm_b16");
    for (name, force_seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_force_sequential(force_seq);
            b.iter(|| veil_tensor::no_grad(|| norm.forward(&x)));
            set_force_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(
    kernels,
    bench_conv_forward,
    bench_conv_train_step,
    bench_instance_norm
);
criterion_main!(kernels);
