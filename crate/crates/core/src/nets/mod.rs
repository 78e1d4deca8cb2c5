//! The three parameterized networks: generator, shared-trunk dual-head
//! discriminator, and the auxiliary face matcher, all parametric in
//! resolution and width.

mod checkpoint;
mod discriminator;
mod generator;
mod matcher;

pub use checkpoint::{Checkpoint, CheckpointBuilder, TensorEntry, CHECKPOINT_VERSION};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use matcher::{match_score, FaceDescriptor, Matcher, MatcherConfig};

use veil_tensor::{ops, Scalar, Tensor};

use crate::data::{broadcast_attributes, AttributeVector, FaceImage, LABEL_CHANNELS};
use crate::error::{Error, Result};

/// Stack face images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor<E: Scalar>(images: &[&FaceImage]) -> Tensor<E> {
    assert!(!images.is_empty());
    let res = images[0].resolution;
    let mut data = Vec::with_capacity(images.len() * 3 * res * res);
    for img in images {
        assert_eq!(img.resolution, res, "mixed resolutions in batch");
        data.extend(img.pixels.iter().map(|&p| E::from_f64(p as f64)));
    }
    Tensor::from_vec(data, &[images.len(), 3, res, res])
}

/// Broadcast label planes for a batch: `[N, 5, H, W]`.
pub fn labels_to_tensor<E: Scalar>(labels: &[AttributeVector], h: usize, w: usize) -> Tensor<E> {
    assert!(!labels.is_empty());
    let mut data = Vec::with_capacity(labels.len() * LABEL_CHANNELS * h * w);
    for v in labels {
        data.extend(broadcast_attributes(v, h, w).iter().map(|&p| E::from_f64(p as f64)));
    }
    Tensor::from_vec(data, &[labels.len(), LABEL_CHANNELS, h, w])
}

/// Attribute probability groups: (gender 2-way, race 2-way, age 3-way).
pub const ATTR_GROUPS: [usize; 3] = [2, 2, 3];
pub const ATTR_LOGITS: usize = 7;

/// Per-group softmax over `[N, 7]` logits; each group sums to 1.
pub fn grouped_softmax<E: Scalar>(logits: &Tensor<E>) -> Tensor<E> {
    let n = logits.shape()[0];
    assert_eq!(logits.shape(), &[n, ATTR_LOGITS]);
    let as4d = ops::reshape(logits, &[n, ATTR_LOGITS, 1, 1]);
    let mut parts = Vec::new();
    let mut start = 0;
    for &g in &ATTR_GROUPS {
        let slice = ops::reshape(&ops::slice_c(&as4d, start, g), &[n, g]);
        let sm = veil_tensor::nn::softmax_rows(&slice);
        parts.push(ops::reshape(&sm, &[n, g, 1, 1]));
        start += g;
    }
    let refs: Vec<&Tensor<E>> = parts.iter().collect();
    ops::reshape(&ops::concat_c(&refs), &[n, ATTR_LOGITS])
}

/// Index of the labeled class inside the flat 7-logit layout.
pub fn attr_class_indices(v: &AttributeVector) -> [usize; 3] {
    [v.gender as usize, 2 + v.race as usize, 4 + v.age_group as usize]
}

/// Convert a generator output tensor back into validated face images.
pub fn tensor_to_images(
    t: &Tensor<f32>,
    subjects: &[Option<String>],
    attrs: &[AttributeVector],
) -> Result<Vec<FaceImage>> {
    let shape = t.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::domain(format!("unexpected image tensor shape {shape:?}")));
    }
    let (n, res) = (shape[0], shape[2]);
    let data = t.data();
    let per = 3 * res * res;
    (0..n)
        .map(|i| {
            FaceImage::new(
                data[i * per..(i + 1) * per].to_vec(),
                res,
                subjects.get(i).cloned().flatten(),
                attrs[i],
            )
        })
        .collect()
}

/// FNV-1a checksum over the raw parameter bytes, used to assert frozen
/// networks stay bitwise unchanged.
pub fn params_checksum(params: &[(String, Tensor<f32>)]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        for v in t.data().iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}
