//! Quick wall-clock timing of the kernels at training-relevant sizes.
//! Run with `cargo run --release -p veil-tensor --example timing`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use veil_tensor::{nn, ops, Tensor};

fn randn(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Tensor::from_vec(data, shape)
}

fn time<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    // warmup
    f();
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{label:44} {:>9.3} ms", dt * 1e3);
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);

    let x8 = randn(&[16, 8, 64, 64], &mut rng);
    let w_stem = nn::he_normal::<f32>(&[16, 8, 7, 7], 8 * 49, &mut rng);
    time("conv 8->16 k7 s1 @64x64 b16 fwd", 10, || {
        let _ = veil_tensor::no_grad(|| ops::conv2d(&x8, &w_stem, 1, 3));
    });

    let xr = randn(&[16, 64, 16, 16], &mut rng);
    let w_res = nn::he_normal::<f32>(&[64, 64, 3, 3], 64 * 9, &mut rng);
    time("conv 64->64 k3 s1 @16x16 b16 fwd", 20, || {
        let _ = veil_tensor::no_grad(|| ops::conv2d(&xr, &w_res, 1, 1));
    });

    time("conv 64->64 k3 fwd+bwd", 20, || {
        let y = ops::conv2d(&xr, &w_res, 1, 1);
        let loss = ops::mean_all(&ops::mul(&y, &y));
        let _ = loss.backward(false);
    });

    let xin = randn(&[16, 64, 16, 16], &mut rng);
    let inorm = nn::InstanceNorm2d::<f32>::new(64);
    time("instance norm @16x16x64 b16 fwd", 50, || {
        let _ = veil_tensor::no_grad(|| inorm.forward(&xin));
    });

    // rough generator-scale stack: stem + 2 down + 6 res + 2 up + final
    let mut convs: Vec<nn::Conv2d<f32>> = Vec::new();
    for _ in 0..12 {
        convs.push(nn::Conv2d::new(64, 64, 3, 1, 1, false, &mut rng));
    }
    let norms: Vec<nn::InstanceNorm2d<f32>> = (0..12).map(|_| nn::InstanceNorm2d::new(64)).collect();
    time("6 res blocks fwd+bwd @16x16x64 b16", 5, || {
        let mut h = xr.clone();
        for i in 0..12 {
            h = ops::relu(&norms[i].forward(&convs[i].forward(&h)));
        }
        let loss = ops::mean_all(&ops::mul(&h, &h));
        let _ = loss.backward(false);
    });
}
