//! Parametric synthetic face renderer.
//!
//! Identity is carried by geometry (face proportions, eye spacing, nose and
//! mouth layout, a per-subject mark); attributes map to separable appearance
//! factors a small classifier can learn and a generator can edit:
//!   gender  -> dark hair cap + thick brows vs. no cap + tinted lips
//!   race    -> base skin tone
//!   age     -> horizontal wrinkle-line amplitude, monotone in years
//! Per-sample noise adds illumination, small translation, and pixel jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{age_group, AttributeVector, DatasetManifest, FaceImage, ManifestRecord, Provenance};
use crate::error::{Error, Result};

/// Mix components into a derived RNG seed.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h
}

struct Identity {
    face_rx: f32,
    face_ry: f32,
    face_cy: f32,
    eye_dx: f32,
    eye_y: f32,
    eye_r: f32,
    pupil_frac: f32,
    nose_w: f32,
    nose_len: f32,
    mouth_y: f32,
    mouth_w: f32,
    mouth_h: f32,
    brow_dy: f32,
    brow_len: f32,
    brow_tilt: f32,
    hairline_y: f32,
    mark_x: f32,
    mark_y: f32,
    mark_r: f32,
    tone_jitter: f32,
    wrinkle_freq: f32,
    wrinkle_phase: f32,
}

impl Identity {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x1d]));
        let mut u = |lo: f32, hi: f32| rng.gen_range(lo..hi);
        Identity {
            face_rx: u(0.28, 0.36),
            face_ry: u(0.36, 0.44),
            face_cy: u(0.50, 0.56),
            eye_dx: u(0.10, 0.16),
            eye_y: u(0.38, 0.45),
            eye_r: u(0.030, 0.048),
            pupil_frac: u(0.38, 0.58),
            nose_w: u(0.018, 0.04),
            nose_len: u(0.10, 0.16),
            mouth_y: u(0.66, 0.73),
            mouth_w: u(0.09, 0.16),
            mouth_h: u(0.014, 0.028),
            brow_dy: u(0.05, 0.08),
            brow_len: u(0.05, 0.09),
            brow_tilt: u(-0.25, 0.25),
            hairline_y: u(0.24, 0.31),
            mark_x: u(-0.18, 0.18),
            mark_y: u(0.52, 0.64),
            mark_r: u(0.010, 0.020),
            tone_jitter: u(-0.035, 0.035),
            wrinkle_freq: u(12.0, 16.0),
            wrinkle_phase: u(0.0, std::f32::consts::TAU),
        }
    }
}

struct NoiseParams {
    illum: f32,
    dx: f32,
    dy: f32,
    bg_phase: f32,
    pixel_sigma: f32,
    pixel_seed: u64,
}

impl NoiseParams {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x5e]));
        NoiseParams {
            illum: rng.gen_range(0.90..1.10),
            dx: rng.gen_range(-0.015..0.015),
            dy: rng.gen_range(-0.015..0.015),
            bg_phase: rng.gen_range(0.0..std::f32::consts::TAU),
            pixel_sigma: 0.012,
            pixel_seed: rng.gen(),
        }
    }
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft inside-mask of an ellipse: 1 well inside, 0 outside.
fn ellipse_mask(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32, soft: f32) -> f32 {
    let e = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
    1.0 - smoothstep(1.0 - soft, 1.0 + soft, e)
}

fn mix3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Wrinkle-line amplitude as a monotone, roughly linear function of age.
fn wrinkle_amp(age_years: f64) -> f32 {
    (0.04 + 0.0048 * age_years.clamp(0.0, 100.0)) as f32
}

/// Render one synthetic face, deterministic in all seeds.
pub fn synth_face(
    identity_seed: u64,
    attrs: &AttributeVector,
    age_years: f64,
    noise_seed: u64,
    resolution: usize,
) -> Result<FaceImage> {
    if resolution < 32 {
        return Err(Error::domain(format!(
            "synthetic face resolution {resolution} below minimum 32"
        )));
    }
    let id = Identity::from_seed(identity_seed);
    let noise = NoiseParams::from_seed(noise_seed);
    let n = resolution;
    let mut px = vec![0.0f32; 3 * n * n];

    let skin_base = if attrs.race == 0 {
        [0.84, 0.71, 0.58]
    } else {
        [0.42, 0.30, 0.22]
    };
    let skin = [
        (skin_base[0] + id.tone_jitter).clamp(0.0, 1.0),
        (skin_base[1] + id.tone_jitter).clamp(0.0, 1.0),
        (skin_base[2] + id.tone_jitter * 0.6).clamp(0.0, 1.0),
    ];
    let hair_color = [0.13, 0.11, 0.09];
    let lip_color = if attrs.gender == 0 {
        [0.72, 0.25, 0.30]
    } else {
        [skin[0] * 0.78, skin[1] * 0.70, skin[2] * 0.70]
    };
    let brow_h = if attrs.gender == 1 { 0.018 } else { 0.007 };
    let amp = wrinkle_amp(age_years);
    let soft = 2.0 / n as f32;

    let mut noise_rng = ChaCha12Rng::seed_from_u64(noise.pixel_seed);

    for y in 0..n {
        for x in 0..n {
            // face-frame coordinates with per-sample jitter
            let u = x as f32 / n as f32 + noise.dx;
            let v = y as f32 / n as f32 + noise.dy;

            // background with a subtle diagonal pattern
            let bg = 0.90 + 0.03 * ((10.0 * (u + v) + noise.bg_phase).sin());
            let mut c = [bg * 0.95, bg * 0.97, bg];

            let face = ellipse_mask(u, v, 0.5, id.face_cy, id.face_rx, id.face_ry, 6.0 * soft);
            if face > 0.0 {
                let mut fc = skin;

                // wrinkle lines on forehead and cheeks, amplitude encodes age
                let line = {
                    let s = (id.wrinkle_freq * std::f32::consts::TAU * v + id.wrinkle_phase).sin();
                    let band = (s * 0.5 + 0.5).powi(6);
                    let on_forehead = smoothstep(id.hairline_y + 0.02, id.hairline_y + 0.06, v)
                        * (1.0 - smoothstep(id.eye_y - 0.10, id.eye_y - 0.05, v));
                    let on_cheek = smoothstep(id.eye_y + 0.06, id.eye_y + 0.10, v)
                        * (1.0 - smoothstep(id.mouth_y - 0.03, id.mouth_y + 0.01, v));
                    band * (on_forehead + on_cheek).min(1.0)
                };
                let shade = 1.0 - amp * line;
                fc = [fc[0] * shade, fc[1] * shade, fc[2] * shade];

                // nose wedge
                let nose_top = id.eye_y + 0.03;
                let nose = {
                    let within_v = smoothstep(nose_top, nose_top + 0.01, v)
                        * (1.0 - smoothstep(nose_top + id.nose_len, nose_top + id.nose_len + 0.012, v));
                    let spread = id.nose_w * (0.3 + 0.7 * ((v - nose_top) / id.nose_len).clamp(0.0, 1.0));
                    let within_u = 1.0 - smoothstep(spread, spread + 2.0 * soft, (u - 0.5).abs());
                    within_v * within_u
                };
                fc = mix3(fc, [fc[0] * 0.72, fc[1] * 0.72, fc[2] * 0.72], nose * 0.9);

                // mouth
                let mouth = ellipse_mask(u, v, 0.5, id.mouth_y, id.mouth_w, id.mouth_h, 8.0 * soft);
                fc = mix3(fc, lip_color, mouth);

                // identity mark (small dot on one cheek)
                let mark = ellipse_mask(u, v, 0.5 + id.mark_x, id.mark_y, id.mark_r, id.mark_r, 12.0 * soft);
                fc = mix3(fc, [0.20, 0.14, 0.10], mark * 0.8);

                // eyes: sclera + pupil, brows above
                for side in [-1.0f32, 1.0] {
                    let ex = 0.5 + side * id.eye_dx;
                    let eye = ellipse_mask(u, v, ex, id.eye_y, id.eye_r * 1.35, id.eye_r, 8.0 * soft);
                    fc = mix3(fc, [0.95, 0.95, 0.95], eye);
                    let pupil = ellipse_mask(
                        u,
                        v,
                        ex,
                        id.eye_y,
                        id.eye_r * id.pupil_frac,
                        id.eye_r * id.pupil_frac,
                        10.0 * soft,
                    );
                    fc = mix3(fc, [0.08, 0.07, 0.07], pupil);

                    let brow_y = id.eye_y - id.brow_dy + side * id.brow_tilt * 0.02;
                    let brow = {
                        let du = (u - ex).abs();
                        let within_u = 1.0 - smoothstep(id.brow_len, id.brow_len + 2.0 * soft, du);
                        let within_v = 1.0 - smoothstep(brow_h, brow_h + 2.0 * soft, (v - brow_y).abs());
                        within_u * within_v
                    };
                    fc = mix3(fc, [0.15, 0.12, 0.10], brow * 0.95);
                }

                // hair cap for gender==1: dark region above the hairline
                if attrs.gender == 1 {
                    let cap_zone = ellipse_mask(
                        u,
                        v,
                        0.5,
                        id.face_cy,
                        id.face_rx * 1.10,
                        id.face_ry * 1.08,
                        6.0 * soft,
                    ) * (1.0 - smoothstep(id.hairline_y, id.hairline_y + 0.035, v));
                    let tex = 1.0 + 0.10 * ((40.0 * u + noise.bg_phase).sin());
                    fc = mix3(
                        fc,
                        [hair_color[0] * tex, hair_color[1] * tex, hair_color[2] * tex],
                        cap_zone,
                    );
                }

                c = mix3(c, fc, face);
            }

            // illumination and pixel noise
            let noise_val =
                noise.pixel_sigma * (noise_rng.gen_range(-1.0f32..1.0) + noise_rng.gen_range(-1.0f32..1.0));
            for (k, ch) in c.iter().enumerate() {
                let val = (ch * noise.illum + noise_val).clamp(0.0, 1.0);
                px[k * n * n + y * n + x] = val * 2.0 - 1.0;
            }
        }
    }

    FaceImage::new(px, resolution, None, *attrs)
}

/// One sample of the synthetic corpus with its full ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: FaceImage,
    pub subject_index: usize,
    pub age_years: f64,
}

/// An in-memory synthetic dataset plus its manifest-equivalent metadata.
pub struct SyntheticDataset {
    pub samples: Vec<SyntheticSample>,
    pub resolution: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn manifest(&self, path_prefix: &str) -> DatasetManifest {
        let records = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestRecord {
                path: format!("{path_prefix}{}__{i:05}.png", s.image.subject_id.as_deref().unwrap()),
                subject_id: s.image.subject_id.clone(),
                gender: s.image.attrs.gender,
                race: s.image.attrs.race,
                age_years: s.age_years,
            })
            .collect();
        DatasetManifest::new(records, Provenance::Synthetic).expect("synthetic manifest is valid")
    }
}

/// Generate `n_subjects x samples_per_subject` faces. Subject attributes are
/// drawn uniformly (age group uniform, then years uniform within the group).
pub fn build_synthetic_dataset(
    n_subjects: usize,
    samples_per_subject: usize,
    resolution: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let mut samples = Vec::with_capacity(n_subjects * samples_per_subject);
    for subj in 0..n_subjects {
        let mut subj_rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0xa7, subj as u64]));
        let gender: u8 = subj_rng.gen_range(0..2);
        let race: u8 = subj_rng.gen_range(0..2);
        let group: u8 = subj_rng.gen_range(0..3);
        let age_years: f64 = match group {
            0 => subj_rng.gen_range(18.0..=30.0),
            1 => subj_rng.gen_range(31.0..=45.0),
            _ => subj_rng.gen_range(46.0..=75.0),
        };
        let attrs = AttributeVector::new(gender, race, age_group(age_years)?)?;
        let identity_seed = mix_seed(seed, &[0x1d5, subj as u64]);
        for k in 0..samples_per_subject {
            let noise_seed = mix_seed(seed, &[0x0415e, subj as u64, k as u64]);
            let mut img = synth_face(identity_seed, &attrs, age_years, noise_seed, resolution)?;
            img.subject_id = Some(format!("s{subj:05}"));
            samples.push(SyntheticSample { image: img, subject_index: subj, age_years });
        }
    }
    Ok(SyntheticDataset { samples, resolution, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let attrs = AttributeVector::new(1, 0, 2).unwrap();
        let a = synth_face(42, &attrs, 60.0, 7, 64).unwrap();
        let b = synth_face(42, &attrs, 60.0, 7, 64).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = synth_face(42, &attrs, 60.0, 8, 64).unwrap();
        assert_ne!(a.pixels, c.pixels);
        let d = synth_face(43, &attrs, 60.0, 7, 64).unwrap();
        assert_ne!(a.pixels, d.pixels);
    }

    #[test]
    fn synth_rejects_small_resolution() {
        let attrs = AttributeVector::new(0, 0, 0).unwrap();
        assert!(synth_face(1, &attrs, 20.0, 1, 16).is_err());
        assert!(synth_face(1, &attrs, 20.0, 1, 32).is_ok());
    }

    #[test]
    fn race_changes_mean_tone() {
        let attrs0 = AttributeVector::new(0, 0, 0).unwrap();
        let attrs1 = AttributeVector::new(0, 1, 0).unwrap();
        let a = synth_face(5, &attrs0, 25.0, 3, 64).unwrap();
        let b = synth_face(5, &attrs1, 25.0, 3, 64).unwrap();
        let mean = |img: &FaceImage| img.pixels.iter().sum::<f32>() / img.pixels.len() as f32;
        assert!(
            mean(&a) - mean(&b) > 0.08,
            "race tone separation too weak: {} vs {}",
            mean(&a),
            mean(&b)
        );
    }

    #[test]
    fn gender_changes_top_region() {
        let attrs0 = AttributeVector::new(0, 0, 0).unwrap();
        let attrs1 = AttributeVector::new(1, 0, 0).unwrap();
        let a = synth_face(5, &attrs0, 25.0, 3, 64).unwrap();
        let b = synth_face(5, &attrs1, 25.0, 3, 64).unwrap();
        // top third darkens when the hair cap is present
        let top_mean = |img: &FaceImage| {
            let n = img.resolution;
            let mut s = 0.0;
            let mut cnt = 0;
            for c in 0..3 {
                for y in 0..n / 3 {
                    for x in 0..n {
                        s += img.pixels[c * n * n + y * n + x];
                        cnt += 1;
                    }
                }
            }
            s / cnt as f32
        };
        assert!(top_mean(&a) - top_mean(&b) > 0.05);
    }

    #[test]
    fn age_amplitude_is_monotone() {
        assert!(wrinkle_amp(20.0) < wrinkle_amp(40.0));
        assert!(wrinkle_amp(40.0) < wrinkle_amp(70.0));
    }

    #[test]
    fn dataset_counts_and_subjects() {
        let ds = build_synthetic_dataset(4, 3, 32, 11).unwrap();
        assert_eq!(ds.samples.len(), 12);
        let m = ds.manifest("");
        assert_eq!(m.len(), 12);
        assert!(!m.matching_excluded());
        // same-subject samples share attributes and age
        for s in &ds.samples {
            let first = &ds.samples[s.subject_index * 3];
            assert_eq!(s.image.attrs, first.image.attrs);
            assert_eq!(s.age_years, first.age_years);
        }
    }
}
