//! Dataset manifests (CSV) and subject-disjoint splitting.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["path", "subject_id", "gender", "race", "age_years"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    /// `None` for UTK-face-style sets without subject labels.
    pub subject_id: Option<String>,
    pub gender: u8,
    pub race: u8,
    pub age_years: f64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, provenance: Provenance) -> Result<Self> {
        for r in &records {
            if !r.age_years.is_finite() || r.age_years < 0.0 {
                return Err(Error::domain(format!(
                    "record '{}': age_years {} must be nonnegative",
                    r.path, r.age_years
                )));
            }
            if r.gender > 1 || r.race > 1 {
                return Err(Error::domain(format!(
                    "record '{}': labels out of range (gender={}, race={})",
                    r.path, r.gender, r.race
                )));
            }
            if let Some(s) = &r.subject_id {
                if s.is_empty() {
                    return Err(Error::domain(format!(
                        "record '{}': subject_id must be non-empty or absent",
                        r.path
                    )));
                }
            }
        }
        Ok(DatasetManifest { records, provenance })
    }

    /// True if any record lacks a subject id: the set cannot participate in
    /// matching experiments.
    pub fn matching_excluded(&self) -> bool {
        self.records.iter().any(|r| r.subject_id.is_none())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.path.as_str(),
                r.subject_id.as_deref().unwrap_or(""),
                &r.gender.to_string(),
                &r.race.to_string(),
                &format_age(r.age_years),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, provenance: Provenance) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        {
            let headers = rdr.headers()?;
            let expect: Vec<&str> = MANIFEST_HEADER.to_vec();
            let got: Vec<&str> = headers.iter().collect();
            if got != expect {
                return Err(Error::domain(format!(
                    "manifest header {:?} does not match expected {:?}",
                    got, expect
                )));
            }
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != 5 {
                return Err(Error::domain(format!("manifest row has {} fields", row.len())));
            }
            let subject = row[1].trim();
            records.push(ManifestRecord {
                path: row[0].to_string(),
                subject_id: (!subject.is_empty()).then(|| subject.to_string()),
                gender: row[2]
                    .trim()
                    .parse()
                    .map_err(|_| Error::domain(format!("bad gender '{}'", &row[2])))?,
                race: row[3]
                    .trim()
                    .parse()
                    .map_err(|_| Error::domain(format!("bad race '{}'", &row[3])))?,
                age_years: row[4]
                    .trim()
                    .parse()
                    .map_err(|_| Error::domain(format!("bad age_years '{}'", &row[4])))?,
            });
        }
        DatasetManifest::new(records, provenance)
    }
}

fn format_age(age: f64) -> String {
    if age.fract() == 0.0 {
        format!("{}", age as u64)
    } else {
        format!("{age}")
    }
}

/// Split so that no subject appears on both sides. Subjects are shuffled
/// deterministically and assigned to the test side until it holds at least
/// `test_fraction` of the records.
pub fn split_subject_disjoint(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::domain(format!(
            "test_fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let mut subjects: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in &manifest.records {
        let Some(s) = &r.subject_id else {
            return Err(Error::domain(format!(
                "record '{}' lacks subject_id; cannot split subject-disjoint",
                r.path
            )));
        };
        if seen.insert(s.as_str()) {
            subjects.push(s);
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut shuffled = subjects.clone();
    shuffled.shuffle(&mut rng);

    let target = (test_fraction * manifest.records.len() as f64).round().max(1.0) as usize;
    let mut test_subjects: HashSet<&str> = HashSet::new();
    let mut test_count = 0usize;
    for s in shuffled {
        if test_count >= target {
            break;
        }
        test_count += manifest.records.iter().filter(|r| r.subject_id.as_deref() == Some(s)).count();
        test_subjects.insert(s);
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in &manifest.records {
        if test_subjects.contains(r.subject_id.as_deref().unwrap()) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((
        DatasetManifest { records: train, provenance: manifest.provenance },
        DatasetManifest { records: test, provenance: manifest.provenance },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, subject: Option<&str>, age: f64) -> ManifestRecord {
        ManifestRecord {
            path: path.to_string(),
            subject_id: subject.map(|s| s.to_string()),
            gender: 0,
            race: 1,
            age_years: age,
        }
    }

    #[test]
    fn split_is_disjoint_and_preserves_records() {
        let records: Vec<ManifestRecord> = (0..100)
            .flat_map(|s| {
                (0..3).map(move |i| record(&format!("img_{s}_{i}.png"), Some(&format!("s{s}")), 25.0))
            })
            .collect();
        let m = DatasetManifest::new(records, Provenance::Synthetic).unwrap();
        let (train, test) = split_subject_disjoint(&m, 0.2, 7).unwrap();
        assert_eq!(train.len() + test.len(), m.len());

        let train_subj: HashSet<_> = train.records.iter().map(|r| r.subject_id.clone()).collect();
        let test_subj: HashSet<_> = test.records.iter().map(|r| r.subject_id.clone()).collect();
        assert!(train_subj.is_disjoint(&test_subj));

        // determinism
        let (train2, test2) = split_subject_disjoint(&m, 0.2, 7).unwrap();
        assert_eq!(train.records, train2.records);
        assert_eq!(test.records, test2.records);

        // record multiset preserved
        let mut all: Vec<_> = train.records.iter().chain(&test.records).map(|r| r.path.clone()).collect();
        all.sort();
        let mut orig: Vec<_> = m.records.iter().map(|r| r.path.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_single_subject_goes_one_side() {
        let m = DatasetManifest::new(
            vec![record("a.png", Some("s0"), 20.0), record("b.png", Some("s0"), 30.0)],
            Provenance::Ingested,
        )
        .unwrap();
        let (train, test) = split_subject_disjoint(&m, 0.5, 3).unwrap();
        assert!(train.is_empty() || test.is_empty());
        assert_eq!(train.len() + test.len(), 2);
    }

    #[test]
    fn split_requires_subjects() {
        let m = DatasetManifest::new(
            vec![record("a.png", None, 20.0)],
            Provenance::Ingested,
        )
        .unwrap();
        assert!(split_subject_disjoint(&m, 0.5, 3).is_err());
        assert!(m.matching_excluded());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DatasetManifest::new(
            vec![
                record("x/img0.png", Some("s1"), 27.0),
                record("x/img1.png", None, 61.5),
            ],
            Provenance::Synthetic,
        )
        .unwrap();
        m.write_csv(&path).unwrap();
        let back = DatasetManifest::read_csv(&path, Provenance::Synthetic).unwrap();
        assert_eq!(m.records, back.records);
    }

    #[test]
    fn manifest_validates_age() {
        assert!(DatasetManifest::new(
            vec![record("a.png", Some("s"), -1.0)],
            Provenance::Synthetic
        )
        .is_err());
    }
}
