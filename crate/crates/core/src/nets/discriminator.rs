//! Shared-trunk discriminator with a real/synthetic score head and an
//! attribute-probability head. Leaky-ReLU trunk, no normalization, bias on
//! all convolutions; conditioned by concatenated label planes.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use veil_tensor::nn::Conv2d;
use veil_tensor::{ops, Scalar, Tensor};

use super::{grouped_softmax, ATTR_LOGITS};
use crate::data::LABEL_CHANNELS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub trunk_depth: usize,
    pub leaky_slope: f64,
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 64,
            trunk_depth: 4,
            leaky_slope: 0.01,
            base_width: 16,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leaky_slope <= 0.0 {
            return Err(Error::config("leaky_slope must be > 0"));
        }
        if self.trunk_depth < 1 || self.base_width < 1 {
            return Err(Error::config("trunk_depth and base_width must be >= 1"));
        }
        let div = 1usize << self.trunk_depth;
        if self.resolution % div != 0 || self.resolution / div < 1 {
            return Err(Error::config(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.trunk_depth
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        (0..self.trunk_depth)
            .map(|i| self.base_width << i.min(3))
            .collect()
    }
}

pub struct Discriminator<E: Scalar> {
    pub cfg: DiscriminatorConfig,
    trunk: Vec<Conv2d<E>>,
    src_head: Conv2d<E>,
    attr_head: Conv2d<E>,
    slope: E,
}

impl<E: Scalar> Discriminator<E> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let widths = cfg.widths();
        let mut trunk = Vec::new();
        let mut c_in = 3 + LABEL_CHANNELS;
        for &w in &widths {
            trunk.push(Conv2d::new(c_in, w, 4, 2, 1, true, &mut rng));
            c_in = w;
        }
        let fs = cfg.resolution >> cfg.trunk_depth;
        let src_head = Conv2d::new(c_in, 1, fs, 1, 0, true, &mut rng);
        let attr_head = Conv2d::new(c_in, ATTR_LOGITS, fs, 1, 0, true, &mut rng);
        Ok(Discriminator {
            cfg,
            trunk,
            src_head,
            attr_head,
            slope: E::from_f64(cfg.leaky_slope),
        })
    }

    fn trunk_features(&self, x: &Tensor<E>, labels: &Tensor<E>) -> Tensor<E> {
        let r = self.cfg.resolution;
        assert_eq!(&x.shape()[1..], &[3, r, r], "discriminator input shape {:?}", x.shape());
        assert_eq!(&labels.shape()[1..], &[LABEL_CHANNELS, r, r]);
        let mut h = ops::concat_c(&[x, labels]);
        for conv in &self.trunk {
            h = ops::leaky_relu(&conv.forward(&h), self.slope);
        }
        h
    }

    /// Returns (src score `[N,1]`, attribute probabilities `[N,7]` with each
    /// group summing to 1).
    pub fn forward(&self, x: &Tensor<E>, labels: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
        let h = self.trunk_features(x, labels);
        let n = h.shape()[0];
        let src = ops::reshape(&self.src_head.forward(&h), &[n, 1]);
        let logits = ops::reshape(&self.attr_head.forward(&h), &[n, ATTR_LOGITS]);
        (src, grouped_softmax(&logits))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, conv) in self.trunk.iter().enumerate() {
            conv.named_params(&format!("trunk{i}"), &mut out);
        }
        self.src_head.named_params("src_head", &mut out);
        self.attr_head.named_params("attr_head", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}
