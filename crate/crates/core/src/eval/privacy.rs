//! The privacy/utility evaluation: per-target-spec attribute metrics and
//! matching metrics over the four original/perturbed pairings, with min/max
//! bands across the 15 outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use veil_tensor::no_grad;

use super::{
    compute_cmc, compute_eer, compute_mae, compute_roc, tmr_at_fmr, RocCurve, ScoreSet,
    UnseenEvaluators,
};
use crate::data::{enumerate_privacy_targets, mix_seed, AttributeVector, FaceImage, PrivacyTargetSpec};
use crate::error::{Error, Result};
use crate::nets::{images_to_tensor, labels_to_tensor, match_score, tensor_to_images, Generator};
use crate::train::TrainSet;

pub const REPORT_SCHEMA: &str = "veil-report-v1";

/// A transform under evaluation: a trained generator or the pass-through
/// sentinel used for baseline verification.
pub enum GeneratorLike {
    Identity,
    Net(Box<Generator<f32>>),
}

impl GeneratorLike {
    pub fn transform(
        &self,
        images: &[&FaceImage],
        targets: &[AttributeVector],
    ) -> Result<Vec<FaceImage>> {
        assert_eq!(images.len(), targets.len());
        match self {
            GeneratorLike::Identity => Ok(images.iter().map(|im| (*im).clone()).collect()),
            GeneratorLike::Net(g) => {
                let res = g.cfg.resolution;
                let mut out = Vec::with_capacity(images.len());
                for (img_chunk, tgt_chunk) in images.chunks(32).zip(targets.chunks(32)) {
                    if img_chunk.iter().any(|im| im.resolution != res) {
                        return Err(Error::domain(format!(
                            "image resolution does not match generator resolution {res}"
                        )));
                    }
                    let x = images_to_tensor::<f32>(img_chunk);
                    let labels = labels_to_tensor::<f32>(tgt_chunk, res, res);
                    let y = no_grad(|| g.forward(&x, &labels));
                    let subjects: Vec<Option<String>> =
                        img_chunk.iter().map(|im| im.subject_id.clone()).collect();
                    out.extend(tensor_to_images(&y, &subjects, tgt_chunk)?);
                }
                Ok(out)
            }
        }
    }
}

/// One evaluation sample: the image with its ground-truth age in years.
#[derive(Clone)]
pub struct EvalSample {
    pub image: FaceImage,
    pub age_years: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PairingProtocol {
    pub seed: u64,
    pub impostors_per_genuine: usize,
    pub max_genuine_pairs: usize,
    /// Use age predictions on originals as the MAE reference instead of the
    /// ground-truth years (the treatment for label-free sets).
    pub age_reference_from_originals: bool,
}

impl Default for PairingProtocol {
    fn default() -> Self {
        PairingProtocol {
            seed: 2024,
            impostors_per_genuine: 4,
            max_genuine_pairs: 4000,
            age_reference_from_originals: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub spec: String,
    pub gender_selected: bool,
    pub race_selected: bool,
    pub age_selected: bool,
    pub gender_eer: f64,
    pub race_eer: f64,
    pub gender_acc: f64,
    pub race_acc: f64,
    pub age_group_acc: f64,
    pub age_mae_years: f64,
    pub tmr_at_anchor: f64,
    pub match_eer: f64,
    pub cmc: Vec<f64>,
    pub roc: Vec<(f64, f64)>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricBands {
    pub tmr_at_anchor: (f64, f64),
    pub gender_eer: (f64, f64),
    pub race_eer: (f64, f64),
    pub age_mae_years: (f64, f64),
    pub cmc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluationReport {
    pub schema: String,
    pub fmr_anchor: f64,
    pub n_images: usize,
    pub n_subjects: usize,
    pub cmc_k: usize,
    pub rows: Vec<ReportRow>,
    pub bands: MetricBands,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: EvaluationReport = serde_json::from_str(s)?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::domain(format!(
                "unsupported report schema '{}'",
                report.schema
            )));
        }
        Ok(report)
    }

    pub fn row(&self, spec: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.spec == spec)
    }
}

/// Matching scores for one spec plus the raw pools for score dumps.
pub struct EvaluationOutput {
    pub report: EvaluationReport,
    pub score_sets: Vec<(String, ScoreSet)>,
}

struct Pairs {
    genuine: Vec<(usize, usize)>,
    impostor: Vec<(usize, usize)>,
}

fn build_pairs(subjects: &[String], protocol: &PairingProtocol) -> Pairs {
    let n = subjects.len();
    let mut genuine = Vec::new();
    'outer: for i in 0..n {
        for j in (i + 1)..n {
            if subjects[i] == subjects[j] {
                genuine.push((i, j));
                if genuine.len() >= protocol.max_genuine_pairs {
                    break 'outer;
                }
            }
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(protocol.seed, &[0x9a17]));
    let want = genuine.len() * protocol.impostors_per_genuine;
    let mut impostor = Vec::with_capacity(want);
    let mut attempts = 0usize;
    while impostor.len() < want && attempts < want * 50 + 1000 {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j && subjects[i] != subjects[j] {
            impostor.push((i.min(j), i.max(j)));
        }
    }
    Pairs { genuine, impostor }
}

fn downsample_roc(curve: &RocCurve, max_points: usize) -> Vec<(f64, f64)> {
    let pts = &curve.points;
    if pts.len() <= max_points {
        return pts.iter().map(|p| (p.fmr, p.tmr)).collect();
    }
    let stride = pts.len().div_ceil(max_points);
    let mut out: Vec<(f64, f64)> = pts
        .iter()
        .step_by(stride)
        .map(|p| (p.fmr, p.tmr))
        .collect();
    let last = pts.last().unwrap();
    if out.last() != Some(&(last.fmr, last.tmr)) {
        out.push((last.fmr, last.tmr));
    }
    out
}

fn positive_class_scores(probs: &veil_tensor::Tensor<f32>) -> Vec<f64> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let data = probs.data();
    (0..n).map(|i| data[i * k + 1] as f64).collect()
}

fn binary_attr_metrics(scores: &[f64], truths: &[u8]) -> Result<(f64, f64)> {
    let mut set = ScoreSet::default();
    for (s, &t) in scores.iter().zip(truths) {
        if t == 1 {
            set.genuine.push(*s);
        } else {
            set.impostor.push(*s);
        }
    }
    let eer = compute_eer(&compute_roc(&set)?)?;
    let acc = scores
        .iter()
        .zip(truths)
        .filter(|(s, &t)| (**s >= 0.5) == (t == 1))
        .count() as f64
        / scores.len() as f64;
    Ok((eer, acc))
}

/// Evaluate a transform against unseen evaluators over the original images
/// plus all 15 privacy targets. Row 0 is the original baseline; matching
/// pools the four pairings (orig x orig, pert x pert, orig x pert,
/// pert x orig) per spec.
pub fn evaluate_privacy(
    generator: &GeneratorLike,
    eval_set: &TrainSet,
    evaluators: &UnseenEvaluators,
    fmr_anchor: f64,
    protocol: &PairingProtocol,
) -> Result<EvaluationOutput> {
    if eval_set.is_empty() {
        return Err(Error::domain("empty evaluation set"));
    }
    let res = eval_set.resolution();
    if evaluators.gender.resolution != res || evaluators.matcher.resolution != res {
        return Err(Error::domain(format!(
            "evaluator resolution {} does not match evaluation set {}",
            evaluators.gender.resolution, res
        )));
    }
    if let GeneratorLike::Net(g) = generator {
        if g.cfg.resolution != res {
            return Err(Error::domain("generator resolution mismatch"));
        }
    }
    let originals: Vec<&FaceImage> = eval_set.images.iter().collect();
    let subjects: Vec<String> = originals
        .iter()
        .map(|im| {
            im.subject_id
                .clone()
                .ok_or_else(|| Error::domain("matching evaluation requires subject ids"))
        })
        .collect::<Result<_>>()?;
    let truths: Vec<AttributeVector> = originals.iter().map(|im| im.attrs).collect();
    let true_years: Vec<f64> = eval_set.age_years.clone();

    // descriptors and optional age reference on originals, computed once
    let orig_descs = evaluators.matcher.descriptors(&originals)?;
    let age_reference: Vec<f64> = if protocol.age_reference_from_originals {
        predict_years(&evaluators.age, &originals)?
    } else {
        true_years.clone()
    };

    let pairs = build_pairs(&subjects, protocol);
    if pairs.genuine.is_empty() || pairs.impostor.is_empty() {
        return Err(Error::domain(
            "evaluation set yields no genuine or no impostor pairs",
        ));
    }

    // CMC protocol: gallery is the first original image per subject; probes
    // are every remaining image (transformed per spec).
    let mut gallery_idx: Vec<usize> = Vec::new();
    let mut probe_idx: Vec<usize> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for (i, s) in subjects.iter().enumerate() {
            if seen.insert(s.clone()) {
                gallery_idx.push(i);
            } else {
                probe_idx.push(i);
            }
        }
    }
    if probe_idx.is_empty() {
        return Err(Error::domain("CMC protocol needs subjects with at least 2 images"));
    }
    let cmc_k = gallery_idx.len().min(10);
    let gallery: Vec<(String, crate::nets::FaceDescriptor)> = gallery_idx
        .iter()
        .map(|&i| (subjects[i].clone(), orig_descs[i].clone()))
        .collect();

    // enumeration of report rows: original + the 15 specs (from any v0; the
    // spec set itself does not depend on v0)
    let all_specs: Vec<PrivacyTargetSpec> =
        enumerate_privacy_targets(&AttributeVector::new(0, 0, 0).unwrap())
            .into_iter()
            .map(|(s, _)| s)
            .collect();

    let mut rows = Vec::with_capacity(16);
    let mut score_sets = Vec::with_capacity(16);
    for spec in std::iter::once(None).chain(all_specs.into_iter().map(Some)) {
        let (label, selected, transformed) = match &spec {
            None => (
                "original".to_string(),
                (false, false, false),
                originals.iter().map(|im| (*im).clone()).collect::<Vec<_>>(),
            ),
            Some(s) => {
                let targets: Vec<AttributeVector> =
                    truths.iter().map(|v0| s.realize(v0)).collect();
                (
                    s.label(),
                    (s.obfuscate_gender, s.obfuscate_race, s.age_selected()),
                    generator.transform(&originals, &targets)?,
                )
            }
        };
        let transformed_refs: Vec<&FaceImage> = transformed.iter().collect();

        // attribute metrics against ground truth
        let gender_scores = batched_positive_scores(&evaluators.gender, &transformed_refs)?;
        let race_scores = batched_positive_scores(&evaluators.race, &transformed_refs)?;
        let gender_truth: Vec<u8> = truths.iter().map(|v| v.gender).collect();
        let race_truth: Vec<u8> = truths.iter().map(|v| v.race).collect();
        let (gender_eer, gender_acc) = binary_attr_metrics(&gender_scores, &gender_truth)?;
        let (race_eer, race_acc) = binary_attr_metrics(&race_scores, &race_truth)?;

        let age_truth: Vec<usize> = truths.iter().map(|v| v.age_group as usize).collect();
        let age_group_acc =
            super::evaluators::classifier_accuracy(&evaluators.age, &transformed_refs, &age_truth);
        let predicted_years = predict_years(&evaluators.age, &transformed_refs)?;
        let age_mae_years = compute_mae(&predicted_years, &age_reference)?;

        // matching: pool the four pairings
        let pert_descs = evaluators.matcher.descriptors(&transformed_refs)?;
        let mut scores = ScoreSet::default();
        let mut push_pairings = |pair_list: &[(usize, usize)], out: &mut Vec<f64>| -> Result<()> {
            for &(i, j) in pair_list {
                out.push(match_score(&orig_descs[i], &orig_descs[j])?);
                out.push(match_score(&pert_descs[i], &pert_descs[j])?);
                out.push(match_score(&orig_descs[i], &pert_descs[j])?);
                out.push(match_score(&pert_descs[i], &orig_descs[j])?);
            }
            Ok(())
        };
        push_pairings(&pairs.genuine, &mut scores.genuine)?;
        push_pairings(&pairs.impostor, &mut scores.impostor)?;

        let curve = compute_roc(&scores)?;
        let tmr = tmr_at_fmr(&curve, fmr_anchor);
        let match_eer = compute_eer(&curve)?;
        let roc = downsample_roc(&curve, 256);

        let probes: Vec<(String, crate::nets::FaceDescriptor)> = probe_idx
            .iter()
            .map(|&i| (subjects[i].clone(), pert_descs[i].clone()))
            .collect();
        let cmc = compute_cmc(&gallery, &probes, cmc_k)?;

        rows.push(ReportRow {
            spec: label.clone(),
            gender_selected: selected.0,
            race_selected: selected.1,
            age_selected: selected.2,
            gender_eer,
            race_eer,
            gender_acc,
            race_acc,
            age_group_acc,
            age_mae_years,
            tmr_at_anchor: tmr,
            match_eer,
            cmc,
            roc,
            n_genuine: scores.genuine.len(),
            n_impostor: scores.impostor.len(),
        });
        score_sets.push((label, scores));
    }

    let spec_rows = &rows[1..];
    let band = |f: fn(&ReportRow) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = spec_rows.iter().map(f).collect();
        (
            vals.iter().copied().fold(f64::INFINITY, f64::min),
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let cmc_band: Vec<(f64, f64)> = (0..cmc_k)
        .map(|k| {
            let vals: Vec<f64> = spec_rows.iter().map(|r| r.cmc[k]).collect();
            (
                vals.iter().copied().fold(f64::INFINITY, f64::min),
                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();

    let report = EvaluationReport {
        schema: REPORT_SCHEMA.to_string(),
        fmr_anchor,
        n_images: originals.len(),
        n_subjects: gallery_idx.len(),
        cmc_k,
        bands: MetricBands {
            tmr_at_anchor: band(|r| r.tmr_at_anchor),
            gender_eer: band(|r| r.gender_eer),
            race_eer: band(|r| r.race_eer),
            age_mae_years: band(|r| r.age_mae_years),
            cmc: cmc_band,
        },
        rows,
    };
    Ok(EvaluationOutput { report, score_sets })
}

fn batched_positive_scores(
    clf: &super::evaluators::AttributeClassifier,
    images: &[&FaceImage],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = images_to_tensor::<f32>(chunk);
        let probs = no_grad(|| clf.class_probs(&x));
        out.extend(positive_class_scores(&probs));
    }
    Ok(out)
}

fn predict_years(
    clf: &super::evaluators::AttributeClassifier,
    images: &[&FaceImage],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = images_to_tensor::<f32>(chunk);
        out.extend(clf.predict_years(&x)?);
    }
    Ok(out)
}
