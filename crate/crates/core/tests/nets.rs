//! Contracts of the three networks: shapes, ranges, probability groups,
//! parameter counts against an independent arithmetic oracle, determinism,
//! batch-vs-loop agreement, and checkpoint round-trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_core::data::{AttributeVector, FaceImage};
use veil_core::nets::{
    images_to_tensor, labels_to_tensor, match_score, Checkpoint, CheckpointBuilder, Discriminator,
    DiscriminatorConfig, FaceDescriptor, Generator, GeneratorConfig, Matcher, MatcherConfig,
};
use veil_tensor::Tensor;

fn random_faces(n: usize, res: usize, seed: u64) -> (Vec<FaceImage>, Vec<AttributeVector>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut attrs = Vec::new();
    for i in 0..n {
        let v = AttributeVector::new(rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..3))
            .unwrap();
        let pixels: Vec<f32> = (0..3 * res * res).map(|_| rng.gen_range(-1.0..1.0)).collect();
        images.push(FaceImage::new(pixels, res, Some(format!("s{i}")), v).unwrap());
        attrs.push(v);
    }
    (images, attrs)
}

#[test]
fn generator_shape_and_range() {
    let cfg = GeneratorConfig { resolution: 32, base_width: 8, n_residual_blocks: 2, n_downsamples: 2 };
    let g = Generator::<f32>::new(cfg, 1).unwrap();
    let (images, attrs) = random_faces(3, 32, 2);
    let refs: Vec<&FaceImage> = images.iter().collect();
    let x = images_to_tensor::<f32>(&refs);
    let labels = labels_to_tensor::<f32>(&attrs, 32, 32);
    let y = veil_tensor::no_grad(|| g.forward(&x, &labels));
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| v.abs() < 1.0), "tanh output must stay in (-1, 1)");
}

#[test]
fn generator_param_count_matches_arithmetic_oracle() {
    let cfg = GeneratorConfig { resolution: 64, base_width: 64, n_residual_blocks: 6, n_downsamples: 2 };
    let g = Generator::<f32>::new(cfg, 3).unwrap();

    // independent layer-by-layer count of the documented layout
    let mut expected = 0usize;
    let mut w = 64usize;
    expected += (3 + 5) * w * 7 * 7; // stem conv, no bias
    expected += 2 * w; // stem instance norm affine
    for _ in 0..2 {
        expected += w * (2 * w) * 4 * 4;
        expected += 2 * (2 * w);
        w *= 2;
    }
    for _ in 0..6 {
        expected += 2 * (w * w * 3 * 3); // two 3x3 convs
        expected += 2 * (2 * w); // two instance norms
    }
    for _ in 0..2 {
        expected += w * (w / 2) * 4 * 4;
        expected += 2 * (w / 2);
        w /= 2;
    }
    expected += w * 3 * 1 * 1; // final 1x1 conv

    assert_eq!(g.num_params(), expected);
}

#[test]
fn generator_config_validation() {
    let bad = GeneratorConfig { resolution: 50, base_width: 16, n_residual_blocks: 6, n_downsamples: 2 };
    assert!(Generator::<f32>::new(bad, 1).is_err());
    let bad = GeneratorConfig { resolution: 64, base_width: 16, n_residual_blocks: 0, n_downsamples: 2 };
    assert!(Generator::<f32>::new(bad, 1).is_err());
}

#[test]
fn generator_deterministic_and_batch_equals_loop() {
    let cfg = GeneratorConfig { resolution: 32, base_width: 8, n_residual_blocks: 2, n_downsamples: 2 };
    let g = Generator::<f32>::new(cfg, 7).unwrap();
    let (images, attrs) = random_faces(4, 32, 8);
    let refs: Vec<&FaceImage> = images.iter().collect();
    let x = images_to_tensor::<f32>(&refs);
    let labels = labels_to_tensor::<f32>(&attrs, 32, 32);

    let y1 = veil_tensor::no_grad(|| g.forward(&x, &labels));
    let y2 = veil_tensor::no_grad(|| g.forward(&x, &labels));
    assert_eq!(y1.to_vec(), y2.to_vec(), "inference must be deterministic");

    // loop over single images
    let per = 3 * 32 * 32;
    let batch = y1.to_vec();
    for i in 0..4 {
        let xi = images_to_tensor::<f32>(&[&images[i]]);
        let li = labels_to_tensor::<f32>(&attrs[i..i + 1], 32, 32);
        let yi = veil_tensor::no_grad(|| g.forward(&xi, &li));
        for (a, b) in yi.data().iter().zip(&batch[i * per..(i + 1) * per]) {
            assert!((a - b).abs() < 1e-5, "batch vs loop mismatch: {a} vs {b}");
        }
    }

    // cycle call is well-typed and shape-preserving
    let v0 = labels_to_tensor::<f32>(&attrs, 32, 32);
    let cycled = veil_tensor::no_grad(|| g.forward(&y1, &v0));
    assert_eq!(cycled.shape(), x.shape());
}

#[test]
fn discriminator_heads_and_conditioning() {
    let cfg = DiscriminatorConfig { resolution: 32, trunk_depth: 3, leaky_slope: 0.01, base_width: 8 };
    let d = Discriminator::<f32>::new(cfg, 11).unwrap();
    let (images, attrs) = random_faces(5, 32, 12);
    let refs: Vec<&FaceImage> = images.iter().collect();
    let x = images_to_tensor::<f32>(&refs);
    let labels = labels_to_tensor::<f32>(&attrs, 32, 32);

    let (src, probs) = veil_tensor::no_grad(|| d.forward(&x, &labels));
    assert_eq!(src.shape(), &[5, 1], "src head must give one scalar per image");
    assert_eq!(probs.shape(), &[5, 7]);
    let pd = probs.to_vec();
    for i in 0..5 {
        let row = &pd[i * 7..(i + 1) * 7];
        assert!(row.iter().all(|p| *p >= 0.0));
        for (lo, hi) in [(0, 2), (2, 4), (4, 7)] {
            let s: f32 = row[lo..hi].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "group sum {s} != 1");
        }
    }

    // conditioning is live: different labels change the src score
    let mut flipped = attrs.clone();
    for v in &mut flipped {
        *v = AttributeVector::new(1 - v.gender, v.race, v.age_group).unwrap();
    }
    let labels2 = labels_to_tensor::<f32>(&flipped, 32, 32);
    let (src2, _) = veil_tensor::no_grad(|| d.forward(&x, &labels2));
    let diff: f32 = src
        .to_vec()
        .iter()
        .zip(src2.to_vec())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "src scores insensitive to conditioning");

    // batch vs loop
    let batch_src = src.to_vec();
    for i in 0..5 {
        let xi = images_to_tensor::<f32>(&[&images[i]]);
        let li = labels_to_tensor::<f32>(&attrs[i..i + 1], 32, 32);
        let (si, _) = veil_tensor::no_grad(|| d.forward(&xi, &li));
        assert!((si.item() - batch_src[i]).abs() < 1e-5);
    }
}

#[test]
fn discriminator_shared_trunk() {
    let cfg = DiscriminatorConfig { resolution: 32, trunk_depth: 3, leaky_slope: 0.01, base_width: 8 };
    let d = Discriminator::<f32>::new(cfg, 21).unwrap();
    let (images, attrs) = random_faces(2, 32, 22);
    let refs: Vec<&FaceImage> = images.iter().collect();
    let x = images_to_tensor::<f32>(&refs);
    let labels = labels_to_tensor::<f32>(&attrs, 32, 32);
    let (src_before, probs_before) = veil_tensor::no_grad(|| d.forward(&x, &labels));

    // zero the trunk: both heads must move, confirming shared layers
    for (name, t) in d.named_params() {
        if name.starts_with("trunk") {
            t.set_data(&vec![0.0; t.len()]);
        }
    }
    let (src_after, probs_after) = veil_tensor::no_grad(|| d.forward(&x, &labels));
    assert_ne!(src_before.to_vec(), src_after.to_vec());
    assert_ne!(probs_before.to_vec(), probs_after.to_vec());
}

#[test]
fn matcher_descriptors_unit_norm_and_match_score() {
    let cfg = MatcherConfig { resolution: 32, descriptor_dim: 16, base_width: 8 };
    let m = Matcher::<f32>::new(cfg, 31).unwrap();
    let (images, _) = random_faces(4, 32, 32);
    let refs: Vec<&FaceImage> = images.iter().collect();
    let x = images_to_tensor::<f32>(&refs);
    let d = veil_tensor::no_grad(|| m.descriptor(&x)).unwrap();
    let descs = FaceDescriptor::from_rows(&d).unwrap();
    for desc in &descs {
        let norm: f64 = desc.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    // identical inputs -> identical descriptors
    let d2 = veil_tensor::no_grad(|| m.descriptor(&x)).unwrap();
    assert_eq!(d.to_vec(), d2.to_vec());

    assert!((match_score(&descs[0], &descs[0]).unwrap() - 1.0).abs() < 1e-6);
    let s01 = match_score(&descs[0], &descs[1]).unwrap();
    let s10 = match_score(&descs[1], &descs[0]).unwrap();
    assert_eq!(s01, s10, "match score must be symmetric");
    assert!((-1.0..=1.0).contains(&s01));

    // orthogonal unit descriptors score 0
    let e0 = FaceDescriptor::new(vec![1.0, 0.0, 0.0]).unwrap();
    let e1 = FaceDescriptor::new(vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(match_score(&e0, &e1).unwrap(), 0.0);
    assert!(FaceDescriptor::new(vec![0.5, 0.5]).is_err());
}

#[test]
fn checkpoint_round_trip_identical_forward() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.veil");
    let cfg = GeneratorConfig { resolution: 32, base_width: 8, n_residual_blocks: 2, n_downsamples: 2 };
    let g = Generator::<f32>::new(cfg, 41).unwrap();
    let (images, attrs) = random_faces(2, 32, 42);
    let refs: Vec<&FaceImage> = images.iter().collect();
    let x = images_to_tensor::<f32>(&refs);
    let labels = labels_to_tensor::<f32>(&attrs, 32, 32);
    let y_before = veil_tensor::no_grad(|| g.forward(&x, &labels)).to_vec();

    let mut b = CheckpointBuilder::new("generator").config("generator", cfg);
    b.add_named_params("generator", &g.named_params());
    b.write(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let loaded_cfg: GeneratorConfig = ck.config("generator").unwrap();
    assert_eq!(loaded_cfg, cfg);
    let g2 = Generator::<f32>::new(loaded_cfg, 999).unwrap(); // different init seed
    ck.load_named_params("generator", &g2.named_params()).unwrap();
    let y_after = veil_tensor::no_grad(|| g2.forward(&x, &labels)).to_vec();
    for (a, b) in y_before.iter().zip(&y_after) {
        assert!((a - b).abs() < 1e-6);
    }
}
