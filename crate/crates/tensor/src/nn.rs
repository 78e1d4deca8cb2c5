//! Neural-network layers built on the op set.
//!
//! Layers own their parameters as trainable leaf tensors; `named_params`
//! exposes them for the optimizer and for checkpointing.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            E::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(data, shape).requires_grad()
}

pub struct Conv2d<E: Scalar> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Scalar> Conv2d<E> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = he_normal(&[c_out, c_in, k, k], c_in * k * k, rng);
        let bias = bias.then(|| Tensor::zeros(&[1, c_out, 1, 1]).requires_grad());
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.pad);
        match &self.bias {
            Some(b) => ops::add(&y, &ops::broadcast_to(b, y.shape())),
            None => y,
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Transposed convolution; weight layout `[C_in, C_out, k, k]`, spatial
/// upsampling factor equal to `stride`.
pub struct ConvTranspose2d<E: Scalar> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Scalar> ConvTranspose2d<E> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(k, 2 * pad + stride, "kernel must satisfy k = 2*pad + stride for exact upsampling");
        let weight = he_normal(&[c_in, c_out, k, k], c_in * k * k, rng);
        let bias = bias.then(|| Tensor::zeros(&[1, c_out, 1, 1]).requires_grad());
        ConvTranspose2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let (_, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let out_hw = (h * self.stride, w * self.stride);
        let y = ops::conv2d_input_grad(x, &self.weight, self.stride, self.pad, out_hw);
        match &self.bias {
            Some(b) => ops::add(&y, &ops::broadcast_to(b, y.shape())),
            None => y,
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Instance normalization with affine parameters; statistics are computed
/// per sample and channel at both train and inference time.
pub struct InstanceNorm2d<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: E,
}

impl<E: Scalar> InstanceNorm2d<E> {
    pub fn new(c: usize) -> Self {
        InstanceNorm2d {
            gamma: Tensor::ones(&[1, c, 1, 1]).requires_grad(),
            beta: Tensor::zeros(&[1, c, 1, 1]).requires_grad(),
            eps: E::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let n = x.shape()[0];
        // var = E[x^2] - mu^2; the eps guard keeps it positive.
        let mu = ops::mean_axes(x, &[2, 3]);
        let m2 = ops::mean_axes(&ops::mul(x, x), &[2, 3]);
        let var = ops::sub(&m2, &ops::mul(&mu, &mu));
        let inv = {
            let denom = ops::sqrt(&ops::add_scalar(&var, self.eps));
            ops::div(&Tensor::ones(denom.shape()), &denom)
        };
        // y = x * a + b with a = gamma * inv, b = beta - mu * a;
        // a and b live on the small [N,C,1,1] statistics.
        let stat_shape = mu.shape().to_vec();
        let gamma_n = ops::broadcast_to(&self.gamma, &stat_shape);
        let beta_n = ops::broadcast_to(&self.beta, &stat_shape);
        let a = ops::mul(&gamma_n, &inv);
        let b = ops::sub(&beta_n, &ops::mul(&mu, &a));
        let _ = n;
        ops::add_nc(&ops::mul_nc(x, &a), &b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct Linear<E: Scalar> {
    pub weight: Tensor<E>, // [in, out]
    pub bias: Tensor<E>,   // [1, out]
}

impl<E: Scalar> Linear<E> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: he_normal(&[c_in, c_out], c_in, rng),
            bias: Tensor::zeros(&[1, c_out]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let y = ops::matmul(x, &self.weight);
        ops::add(&y, &ops::broadcast_to(&self.bias, y.shape()))
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Row-wise softmax of a 2-d tensor, stabilized by a constant max shift
/// (exactly gradient-neutral).
pub fn softmax_rows<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let m = ops::max_axis1_const(x);
    let shifted = ops::sub(x, &ops::broadcast_to(&m, x.shape()));
    let e = ops::exp(&shifted);
    let s = ops::sum_axes(&e, &[1]);
    ops::div(&e, &ops::broadcast_to(&s, x.shape()))
}

/// Row-wise log-softmax with the same constant-shift stabilization.
pub fn log_softmax_rows<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let m = ops::max_axis1_const(x);
    let shifted = ops::sub(x, &ops::broadcast_to(&m, x.shape()));
    let log_z = ops::ln(&ops::sum_axes(&ops::exp(&shifted), &[1]));
    ops::sub(&shifted, &ops::broadcast_to(&log_z, x.shape()))
}

/// Row-wise Euclidean norms of a 2-d tensor, shape [N, 1].
pub fn row_norms<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    ops::sqrt(&ops::sum_axes(&ops::mul(x, x), &[1]))
}

/// Normalize each row to unit Euclidean norm.
pub fn l2_normalize_rows<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let n = row_norms(x);
    ops::div(x, &ops::broadcast_to(&n, x.shape()))
}

/// Global average pooling `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    ops::reshape(&ops::mean_axes(x, &[2, 3]), &[n, c])
}
