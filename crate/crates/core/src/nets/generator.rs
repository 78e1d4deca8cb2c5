//! Conditional encoder/decoder generator with residual bottleneck.
//!
//! Input is the image concatenated with 5 broadcast label planes. Layout:
//! 7x7 stem conv, `n_downsamples` stride-2 convs doubling width, residual
//! blocks at the bottleneck, mirrored transposed convs, and a final 1x1 conv
//! with tanh. Convolutions carry no bias; instance norm provides the affine
//! terms.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use veil_tensor::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d};
use veil_tensor::{ops, Scalar, Tensor};

use crate::data::LABEL_CHANNELS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub n_downsamples: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 64,
            base_width: 16,
            n_residual_blocks: 6,
            n_downsamples: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_residual_blocks < 1 {
            return Err(Error::config("n_residual_blocks must be >= 1"));
        }
        if self.base_width < 1 || self.n_downsamples < 1 {
            return Err(Error::config("base_width and n_downsamples must be >= 1"));
        }
        let div = 1usize << self.n_downsamples;
        if self.resolution % div != 0 || self.resolution / div < 4 {
            return Err(Error::config(format!(
                "resolution {} not divisible by 2^{} (or bottleneck too small)",
                self.resolution, self.n_downsamples
            )));
        }
        Ok(())
    }
}

struct ResidualBlock<E: Scalar> {
    conv1: Conv2d<E>,
    norm1: InstanceNorm2d<E>,
    conv2: Conv2d<E>,
    norm2: InstanceNorm2d<E>,
}

impl<E: Scalar> ResidualBlock<E> {
    fn new(width: usize, rng: &mut ChaCha12Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(width, width, 3, 1, 1, false, rng),
            norm1: InstanceNorm2d::new(width),
            conv2: Conv2d::new(width, width, 3, 1, 1, false, rng),
            norm2: InstanceNorm2d::new(width),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let h = ops::relu(&self.norm1.forward(&self.conv1.forward(x)));
        let h = self.norm2.forward(&self.conv2.forward(&h));
        ops::add(x, &h)
    }
}

pub struct Generator<E: Scalar> {
    pub cfg: GeneratorConfig,
    stem: Conv2d<E>,
    stem_norm: InstanceNorm2d<E>,
    downs: Vec<(Conv2d<E>, InstanceNorm2d<E>)>,
    blocks: Vec<ResidualBlock<E>>,
    ups: Vec<(ConvTranspose2d<E>, InstanceNorm2d<E>)>,
    final_conv: Conv2d<E>,
}

impl<E: Scalar> Generator<E> {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w0 = cfg.base_width;
        let stem = Conv2d::new(3 + LABEL_CHANNELS, w0, 7, 1, 3, false, &mut rng);
        let stem_norm = InstanceNorm2d::new(w0);

        let mut downs = Vec::new();
        let mut w = w0;
        for _ in 0..cfg.n_downsamples {
            downs.push((Conv2d::new(w, w * 2, 4, 2, 1, false, &mut rng), InstanceNorm2d::new(w * 2)));
            w *= 2;
        }

        let blocks = (0..cfg.n_residual_blocks)
            .map(|_| ResidualBlock::new(w, &mut rng))
            .collect();

        let mut ups = Vec::new();
        for _ in 0..cfg.n_downsamples {
            ups.push((
                ConvTranspose2d::new(w, w / 2, 4, 2, 1, false, &mut rng),
                InstanceNorm2d::new(w / 2),
            ));
            w /= 2;
        }

        let final_conv = Conv2d::new(w, 3, 1, 1, 0, false, &mut rng);
        Ok(Generator { cfg, stem, stem_norm, downs, blocks, ups, final_conv })
    }

    /// `x [N,3,H,W]`, `labels [N,5,H,W]` -> `[N,3,H,W]` in (-1, 1).
    pub fn forward(&self, x: &Tensor<E>, labels: &Tensor<E>) -> Tensor<E> {
        let r = self.cfg.resolution;
        assert_eq!(&x.shape()[1..], &[3, r, r], "generator input shape {:?}", x.shape());
        assert_eq!(&labels.shape()[1..], &[LABEL_CHANNELS, r, r]);
        let mut h = ops::relu(&self.stem_norm.forward(&self.stem.forward(&ops::concat_c(&[x, labels]))));
        for (conv, norm) in &self.downs {
            h = ops::relu(&norm.forward(&conv.forward(&h)));
        }
        for block in &self.blocks {
            h = block.forward(&h);
        }
        for (deconv, norm) in &self.ups {
            h = ops::relu(&norm.forward(&deconv.forward(&h)));
        }
        ops::tanh(&self.final_conv.forward(&h))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.stem.named_params("stem", &mut out);
        self.stem_norm.named_params("stem_norm", &mut out);
        for (i, (conv, norm)) in self.downs.iter().enumerate() {
            conv.named_params(&format!("down{i}"), &mut out);
            norm.named_params(&format!("down{i}_norm"), &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.named_params(&format!("res{i}.conv1"), &mut out);
            b.norm1.named_params(&format!("res{i}.norm1"), &mut out);
            b.conv2.named_params(&format!("res{i}.conv2"), &mut out);
            b.norm2.named_params(&format!("res{i}.norm2"), &mut out);
        }
        for (i, (deconv, norm)) in self.ups.iter().enumerate() {
            deconv.named_params(&format!("up{i}"), &mut out);
            norm.named_params(&format!("up{i}_norm"), &mut out);
        }
        self.final_conv.named_params("final", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}
