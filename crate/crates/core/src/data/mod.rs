//! Data model: images, attribute labels, privacy targets, and the label ops
//! used across training and evaluation.

mod images;
mod manifest;
mod synth;

pub use images::{denormalize_pixels, load_png, normalize_pixels, pixel_to_unit, save_png};
pub use manifest::{
    split_subject_disjoint, DatasetManifest, ManifestRecord, Provenance, MANIFEST_HEADER,
};
pub use synth::{build_synthetic_dataset, mix_seed, synth_face, SyntheticDataset, SyntheticSample};

use crate::error::{Error, Result};

/// Number of label planes in the conditional encoding:
/// gender bit, race bit, and a 3-way one-hot age group.
pub const LABEL_CHANNELS: usize = 5;

/// Ground-truth or target attribute labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AttributeVector {
    pub gender: u8,
    pub race: u8,
    pub age_group: u8,
}

impl AttributeVector {
    pub fn new(gender: u8, race: u8, age_group: u8) -> Result<Self> {
        if gender > 1 || race > 1 {
            return Err(Error::domain(format!(
                "binary attribute out of range: gender={gender} race={race}"
            )));
        }
        if age_group > 2 {
            return Err(Error::domain(format!("age_group {age_group} not in {{0,1,2}}")));
        }
        Ok(AttributeVector { gender, race, age_group })
    }

    /// The 5-channel encoding: [gender, race, age one-hot x3].
    pub fn channel_encoding(&self) -> [f32; LABEL_CHANNELS] {
        let mut enc = [0.0f32; LABEL_CHANNELS];
        enc[0] = self.gender as f32;
        enc[1] = self.race as f32;
        enc[2 + self.age_group as usize] = 1.0;
        enc
    }
}

/// Age grouping used for the ordinal age attribute.
pub fn age_group(age_years: f64) -> Result<u8> {
    if !age_years.is_finite() || age_years < 0.0 {
        return Err(Error::domain(format!("age {age_years} must be a nonnegative real")));
    }
    Ok(if age_years <= 30.0 {
        0
    } else if age_years <= 45.0 {
        1
    } else {
        2
    })
}

/// Fill each of the 5 label planes with its constant channel value,
/// planes-first (`[5, H, W]`).
pub fn broadcast_attributes(v: &AttributeVector, h: usize, w: usize) -> Vec<f32> {
    assert!(h > 0 && w > 0, "broadcast_attributes requires positive dims");
    let enc = v.channel_encoding();
    let mut out = Vec::with_capacity(LABEL_CHANNELS * h * w);
    for value in enc {
        out.extend(std::iter::repeat(value).take(h * w));
    }
    out
}

/// Which age group a privacy target steers toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AgeTarget {
    Keep,
    Group(u8),
}

/// A selection of attributes to perturb; the all-keep selection is invalid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PrivacyTargetSpec {
    pub obfuscate_gender: bool,
    pub obfuscate_race: bool,
    pub target_age: AgeTarget,
}

impl PrivacyTargetSpec {
    pub fn is_all_keep(&self) -> bool {
        !self.obfuscate_gender && !self.obfuscate_race && self.target_age == AgeTarget::Keep
    }

    /// True if the age attribute is selected for perturbation.
    pub fn age_selected(&self) -> bool {
        self.target_age != AgeTarget::Keep
    }

    /// Realize the spec against ground-truth labels: flip selected binary
    /// attributes, move age to the chosen group, keep the rest.
    pub fn realize(&self, v0: &AttributeVector) -> AttributeVector {
        AttributeVector {
            gender: if self.obfuscate_gender { 1 - v0.gender } else { v0.gender },
            race: if self.obfuscate_race { 1 - v0.race } else { v0.race },
            age_group: match self.target_age {
                AgeTarget::Keep => v0.age_group,
                AgeTarget::Group(g) => g,
            },
        }
    }

    /// Short label in figure style: e.g. "G", "R", "A2", "GRA0".
    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.obfuscate_gender {
            s.push('G');
        }
        if self.obfuscate_race {
            s.push('R');
        }
        if let AgeTarget::Group(g) = self.target_age {
            s.push('A');
            s.push(char::from_digit(g as u32, 10).unwrap());
        }
        s
    }

    /// Parse a spec string over the grammar `[G][R][A0|A1|A2]` with at least
    /// one token.
    pub fn parse(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut i = 0;
        let mut spec = PrivacyTargetSpec {
            obfuscate_gender: false,
            obfuscate_race: false,
            target_age: AgeTarget::Keep,
        };
        if i < bytes.len() && bytes[i] == b'G' {
            spec.obfuscate_gender = true;
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'R' {
            spec.obfuscate_race = true;
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'A' {
            i += 1;
            let g = bytes
                .get(i)
                .and_then(|c| (*c as char).to_digit(10))
                .filter(|&g| g <= 2)
                .ok_or_else(|| Error::domain(format!("invalid age group in spec '{s}'")))?;
            spec.target_age = AgeTarget::Group(g as u8);
            i += 1;
        }
        if i != bytes.len() || spec.is_all_keep() {
            return Err(Error::domain(format!(
                "invalid target spec '{s}': expected [G][R][A0|A1|A2] with at least one token"
            )));
        }
        Ok(spec)
    }
}

/// All 15 non-trivial privacy targets for a ground-truth vector, in a fixed
/// gender-major, then race, then age order, with their realized targets.
pub fn enumerate_privacy_targets(
    v0: &AttributeVector,
) -> Vec<(PrivacyTargetSpec, AttributeVector)> {
    let mut out = Vec::with_capacity(15);
    for flip_g in [false, true] {
        for flip_r in [false, true] {
            for age in [
                AgeTarget::Keep,
                AgeTarget::Group(0),
                AgeTarget::Group(1),
                AgeTarget::Group(2),
            ] {
                let spec = PrivacyTargetSpec {
                    obfuscate_gender: flip_g,
                    obfuscate_race: flip_r,
                    target_age: age,
                };
                if spec.is_all_keep() {
                    continue;
                }
                let vt = spec.realize(v0);
                out.push((spec, vt));
            }
        }
    }
    debug_assert_eq!(out.len(), 15);
    out
}

/// A face image in model space: channels-first pixels in [-1, 1].
#[derive(Debug, Clone)]
pub struct FaceImage {
    /// CHW layout, 3 channels.
    pub pixels: Vec<f32>,
    pub resolution: usize,
    pub subject_id: Option<String>,
    pub attrs: AttributeVector,
}

impl FaceImage {
    pub fn new(
        pixels: Vec<f32>,
        resolution: usize,
        subject_id: Option<String>,
        attrs: AttributeVector,
    ) -> Result<Self> {
        if pixels.len() != 3 * resolution * resolution {
            return Err(Error::domain(format!(
                "pixel buffer length {} does not match 3x{resolution}x{resolution}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || p.abs() > 1.0 + 1e-6) {
            return Err(Error::domain(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(FaceImage { pixels, resolution, subject_id, attrs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_group_boundaries() {
        assert_eq!(age_group(30.0).unwrap(), 0);
        assert_eq!(age_group(31.0).unwrap(), 1);
        assert_eq!(age_group(45.0).unwrap(), 1);
        assert_eq!(age_group(46.0).unwrap(), 2);
        assert_eq!(age_group(0.0).unwrap(), 0);
        assert!(age_group(-0.1).is_err());
        assert!(age_group(f64::NAN).is_err());
    }

    #[test]
    fn age_group_monotone() {
        let mut prev = 0;
        for i in 0..=1200 {
            let g = age_group(i as f64 / 10.0).unwrap();
            assert!(g >= prev, "age_group not monotone at {}", i as f64 / 10.0);
            prev = g;
        }
    }

    #[test]
    fn broadcast_constant_planes() {
        let v = AttributeVector::new(0, 0, 0).unwrap();
        let planes = broadcast_attributes(&v, 2, 2);
        assert_eq!(planes.len(), 20);
        let expect = [0.0, 0.0, 1.0, 0.0, 0.0];
        for (k, &e) in expect.iter().enumerate() {
            assert!(planes[k * 4..(k + 1) * 4].iter().all(|&p| p == e));
        }

        let v = AttributeVector::new(1, 1, 2).unwrap();
        let planes = broadcast_attributes(&v, 4, 4);
        let expect = [1.0, 1.0, 0.0, 0.0, 1.0];
        for (k, &e) in expect.iter().enumerate() {
            assert!(planes[k * 16..(k + 1) * 16].iter().all(|&p| p == e));
        }
    }

    #[test]
    fn broadcast_matches_per_pixel_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for _ in 0..100 {
            let v = AttributeVector::new(
                rng.gen_range(0..2),
                rng.gen_range(0..2),
                rng.gen_range(0..3),
            )
            .unwrap();
            let h = rng.gen_range(1..12);
            let w = rng.gen_range(1..12);
            let got = broadcast_attributes(&v, h, w);
            // independent per-pixel loop fill
            let enc = [
                v.gender as f32,
                v.race as f32,
                (v.age_group == 0) as u8 as f32,
                (v.age_group == 1) as u8 as f32,
                (v.age_group == 2) as u8 as f32,
            ];
            let mut oracle = vec![0.0f32; 5 * h * w];
            for k in 0..5 {
                for y in 0..h {
                    for x in 0..w {
                        oracle[k * h * w + y * w + x] = enc[k];
                    }
                }
            }
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn enumerate_exactly_15_unique() {
        for g in 0..2u8 {
            for r in 0..2u8 {
                for a in 0..3u8 {
                    let v0 = AttributeVector::new(g, r, a).unwrap();
                    let targets = enumerate_privacy_targets(&v0);
                    assert_eq!(targets.len(), 15);
                    let mut specs: Vec<_> = targets.iter().map(|(s, _)| *s).collect();
                    specs.dedup();
                    assert_eq!(specs.len(), 15, "specs not unique");
                    assert!(targets.iter().all(|(s, _)| !s.is_all_keep()));
                    // brute-force oracle: 2*2*4 - 1
                    let brute: Vec<(bool, bool, Option<u8>)> = {
                        let mut v = Vec::new();
                        for fg in [false, true] {
                            for fr in [false, true] {
                                for age in [None, Some(0), Some(1), Some(2)] {
                                    if !fg && !fr && age.is_none() {
                                        continue;
                                    }
                                    v.push((fg, fr, age));
                                }
                            }
                        }
                        v
                    };
                    assert_eq!(brute.len(), 15);
                    for ((spec, _), (fg, fr, age)) in targets.iter().zip(brute) {
                        assert_eq!(spec.obfuscate_gender, fg);
                        assert_eq!(spec.obfuscate_race, fr);
                        match age {
                            None => assert_eq!(spec.target_age, AgeTarget::Keep),
                            Some(k) => assert_eq!(spec.target_age, AgeTarget::Group(k)),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn realize_flip_semantics() {
        let v0 = AttributeVector::new(0, 0, 0).unwrap();
        let spec = PrivacyTargetSpec {
            obfuscate_gender: true,
            obfuscate_race: false,
            target_age: AgeTarget::Keep,
        };
        assert_eq!(spec.realize(&v0), AttributeVector::new(1, 0, 0).unwrap());

        // the self-age-target spec is retained by the enumeration even though
        // its realization against a matching v0 equals v0
        let v1 = AttributeVector::new(0, 0, 1).unwrap();
        let keep_a1 = PrivacyTargetSpec {
            obfuscate_gender: false,
            obfuscate_race: false,
            target_age: AgeTarget::Group(1),
        };
        assert!(!keep_a1.is_all_keep());
        assert_eq!(keep_a1.realize(&v1), v1);
        assert!(enumerate_privacy_targets(&v1).iter().any(|(s, _)| *s == keep_a1));
    }

    #[test]
    fn spec_string_grammar() {
        assert_eq!(PrivacyTargetSpec::parse("G").unwrap().label(), "G");
        assert_eq!(PrivacyTargetSpec::parse("GR").unwrap().label(), "GR");
        assert_eq!(PrivacyTargetSpec::parse("GA2").unwrap().label(), "GA2");
        assert_eq!(PrivacyTargetSpec::parse("GRA1").unwrap().label(), "GRA1");
        assert_eq!(PrivacyTargetSpec::parse("A0").unwrap().label(), "A0");
        for bad in ["", "X", "AG", "A3", "GG", "GRA", "gra1", "GA22"] {
            assert!(PrivacyTargetSpec::parse(bad).is_err(), "should reject '{bad}'");
        }
    }

    #[test]
    fn face_image_range_validation() {
        let v = AttributeVector::new(0, 0, 0).unwrap();
        assert!(FaceImage::new(vec![0.0; 12], 2, None, v).is_ok());
        assert!(FaceImage::new(vec![1.5; 12], 2, None, v).is_err());
        assert!(FaceImage::new(vec![0.0; 11], 2, None, v).is_err());
    }
}
