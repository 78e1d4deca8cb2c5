//! Biometric and attribute evaluation: score sets, ROC/EER, CMC, MAE, and
//! the privacy/utility report.

mod evaluators;
mod privacy;

pub use evaluators::{
    train_unseen_evaluators, AttributeClassifier, EvaluatorBudget, UnseenEvaluators, UnseenMatcher,
};
pub use privacy::{
    evaluate_privacy, EvalSample, EvaluationReport, GeneratorLike, MetricBands, PairingProtocol,
    ReportRow, REPORT_SCHEMA,
};

use crate::error::{Error, Result};
use crate::nets::{match_score, FaceDescriptor};

/// Genuine (same-subject) and impostor (different-subject) match scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub tmr: f64,
}

/// ROC curve over a full threshold sweep, ordered by descending threshold
/// (ascending FMR).
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Sweep all distinct scores plus infinite sentinels. At threshold t,
/// TMR = fraction of genuine >= t and FMR = fraction of impostor >= t.
pub fn compute_roc(scores: &ScoreSet) -> Result<RocCurve> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::domain(
            "ROC requires nonempty genuine and impostor score lists",
        ));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|s| s.is_nan()) {
        return Err(Error::domain("NaN score in score set"));
    }
    let mut thresholds: Vec<f64> = scores
        .genuine
        .iter()
        .chain(&scores.impostor)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    let frac_ge = |list: &[f64], t: f64| -> f64 {
        list.iter().filter(|s| **s >= t).count() as f64 / list.len() as f64
    };
    points.push(RocPoint { threshold: f64::INFINITY, fmr: 0.0, tmr: 0.0 });
    for t in thresholds {
        points.push(RocPoint {
            threshold: t,
            fmr: frac_ge(&scores.impostor, t),
            tmr: frac_ge(&scores.genuine, t),
        });
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fmr: 1.0, tmr: 1.0 });
    Ok(RocCurve { points })
}

/// Equal error rate: the value where FMR = FNMR (1 - TMR), linearly
/// interpolated between the bracketing sweep points.
pub fn compute_eer(curve: &RocCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::domain("degenerate single-point ROC curve"));
    }
    // f = fmr - fnmr is non-decreasing along the sweep, from -1 to +1.
    let f = |p: &RocPoint| p.fmr - (1.0 - p.tmr);
    let idx = curve
        .points
        .iter()
        .position(|p| f(p) >= 0.0)
        .ok_or_else(|| Error::domain("ROC sweep never crosses FMR = FNMR"))?;
    let hi = &curve.points[idx];
    if f(hi) == 0.0 || idx == 0 {
        return Ok(hi.fmr);
    }
    let lo = &curve.points[idx - 1];
    let (flo, fhi) = (f(lo), f(hi));
    let t = -flo / (fhi - flo);
    Ok(lo.fmr + t * (hi.fmr - lo.fmr))
}

/// Highest TMR achievable with FMR at or below the anchor.
pub fn tmr_at_fmr(curve: &RocCurve, fmr_anchor: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fmr <= fmr_anchor)
        .map(|p| p.tmr)
        .fold(0.0, f64::max)
}

/// Rank-k identification accuracies for k = 1..=k_max. Ties between equal
/// scores are broken by stable gallery order.
pub fn compute_cmc(
    gallery: &[(String, FaceDescriptor)],
    probes: &[(String, FaceDescriptor)],
    k_max: usize,
) -> Result<Vec<f64>> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::domain("CMC requires nonempty gallery and probes"));
    }
    if k_max < 1 || k_max > gallery.len() {
        return Err(Error::domain(format!(
            "k_max {k_max} must be in 1..={}",
            gallery.len()
        )));
    }
    {
        let mut ids: Vec<&str> = gallery.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != gallery.len() {
            return Err(Error::domain("gallery must hold one entry per identity"));
        }
    }

    let mut hits_at_rank = vec![0usize; gallery.len()];
    for (probe_id, probe_desc) in probes {
        if !gallery.iter().any(|(id, _)| id == probe_id) {
            return Err(Error::domain(format!(
                "probe identity '{probe_id}' missing from gallery"
            )));
        }
        let mut scored: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .map(|(i, (_, g))| Ok::<_, Error>((i, match_score(g, probe_desc)?)))
            .collect::<Result<_>>()?;
        // stable sort by descending score preserves gallery order on ties
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let rank = scored
            .iter()
            .position(|(i, _)| gallery[*i].0 == *probe_id)
            .expect("probe identity present");
        hits_at_rank[rank] += 1;
    }

    let mut acc = Vec::with_capacity(k_max);
    let mut cum = 0usize;
    for k in 0..k_max {
        cum += hits_at_rank[k];
        acc.push(cum as f64 / probes.len() as f64);
    }
    Ok(acc)
}

/// Mean absolute difference in years.
pub fn compute_mae(predicted: &[f64], reference: &[f64]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::domain(format!(
            "MAE length mismatch: {} vs {}",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::domain("MAE requires at least one pair"));
    }
    Ok(predicted
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).abs())
        .sum::<f64>()
        / predicted.len() as f64)
}
