//! Auxiliary face matcher: a small convolutional embedding network emitting
//! unit-norm descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use veil_tensor::nn::{global_avg_pool, l2_normalize_rows, row_norms, Conv2d, Linear};
use veil_tensor::{ops, Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatcherConfig {
    pub resolution: usize,
    pub descriptor_dim: usize,
    pub base_width: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            resolution: 64,
            descriptor_dim: 128,
            base_width: 16,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim < 2 {
            return Err(Error::config("descriptor_dim must be >= 2"));
        }
        if self.resolution % 16 != 0 {
            return Err(Error::config(format!(
                "matcher resolution {} must be divisible by 16",
                self.resolution
            )));
        }
        Ok(())
    }
}

pub struct Matcher<E: Scalar> {
    pub cfg: MatcherConfig,
    convs: Vec<Conv2d<E>>,
    proj: Linear<E>,
}

impl<E: Scalar> Matcher<E> {
    pub fn new(cfg: MatcherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = cfg.base_width;
        let widths = [w, 2 * w, 4 * w, 4 * w];
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &wi in &widths {
            convs.push(Conv2d::new(c_in, wi, 4, 2, 1, true, &mut rng));
            c_in = wi;
        }
        let proj = Linear::new(c_in, cfg.descriptor_dim, &mut rng);
        Ok(Matcher { cfg, convs, proj })
    }

    fn embed(&self, x: &Tensor<E>) -> Tensor<E> {
        let r = self.cfg.resolution;
        assert_eq!(&x.shape()[1..], &[3, r, r], "matcher input shape {:?}", x.shape());
        let mut h = x.clone();
        for conv in &self.convs {
            h = ops::relu(&conv.forward(&h));
        }
        self.proj.forward(&global_avg_pool(&h))
    }

    /// Unit-norm descriptors `[N, descriptor_dim]`. A zero embedding is a
    /// numerical error and is reported rather than normalized.
    pub fn descriptor(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let raw = self.embed(x);
        let norms = row_norms(&raw);
        let min_norm = norms
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.to_f64_()));
        if min_norm < 1e-12 {
            return Err(Error::Numerical(format!(
                "descriptor with near-zero pre-normalization norm ({min_norm:.3e})"
            )));
        }
        Ok(l2_normalize_rows(&raw))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            conv.named_params(&format!("conv{i}"), &mut out);
        }
        self.proj.named_params("proj", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// A non-trainable copy: parameters become constant leaves so SAN
    /// training cannot touch them (gradients still flow through to inputs).
    pub fn frozen_copy(&self) -> Matcher<E> {
        Matcher {
            cfg: self.cfg,
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    weight: c.weight.detach(),
                    bias: c.bias.as_ref().map(|b| b.detach()),
                    stride: c.stride,
                    pad: c.pad,
                })
                .collect(),
            proj: Linear {
                weight: self.proj.weight.detach(),
                bias: self.proj.bias.detach(),
            },
        }
    }
}

/// A unit-norm face descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceDescriptor {
    values: Vec<f32>,
}

impl FaceDescriptor {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let norm: f64 = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!(
                "descriptor norm {norm} deviates from 1 by more than 1e-6"
            )));
        }
        Ok(FaceDescriptor { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Split a `[N, D]` descriptor tensor into row descriptors.
    pub fn from_rows(t: &Tensor<f32>) -> Result<Vec<FaceDescriptor>> {
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let data = t.data();
        (0..n)
            .map(|i| FaceDescriptor::new(data[i * d..(i + 1) * d].to_vec()))
            .collect()
    }
}

/// Cosine similarity of unit descriptors: symmetric, in [-1, 1].
pub fn match_score(d1: &FaceDescriptor, d2: &FaceDescriptor) -> Result<f64> {
    if d1.dim() != d2.dim() {
        return Err(Error::domain(format!(
            "descriptor dims differ: {} vs {}",
            d1.dim(),
            d2.dim()
        )));
    }
    let dot: f64 = d1
        .values
        .iter()
        .zip(&d2.values)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}
