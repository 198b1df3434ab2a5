//! Detection evaluation: greedy matching, precision/recall sweeps, AP and mAP.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Confidence of the detection that produced this point.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    #[default]
    #[serde(rename = "all-points")]
    AllPoints,
    #[serde(rename = "11-point")]
    ElevenPoint,
}

/// Detections in sweep order with their true-positive flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Indices into the input detections, by descending confidence.
    pub order: Vec<usize>,
    pub flags: Vec<bool>,
    pub confidences: Vec<f64>,
}

/// Descending confidence, ties in input order.
pub fn sweep_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// VOC-style greedy matching. Each detection, in confidence order, claims
/// the unclaimed ground truth of its image and class with the highest IoU
/// at or above `threshold` (lowest index on equal IoU).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> Matching {
    let order = sweep_order(dets);
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image != d.image || g.class != d.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        flags.push(best.is_some());
    }
    let confidences = order.iter().map(|&i| dets[i].confidence).collect();
    Matching {
        order,
        flags,
        confidences,
    }
}

/// Cumulative precision and recall after each detection of the sweep.
/// With no ground truth, recall is reported as 0.
pub fn pr_curve(flags: &[bool], confidences: &[f64], total_gt: usize) -> Result<Vec<PrPoint>, Error> {
    if flags.len() != confidences.len() {
        return Err(Error::invalid("flags and confidences differ in length"));
    }
    let mut tp = 0usize;
    Ok(flags
        .iter()
        .zip(confidences)
        .enumerate()
        .map(|(k, (&f, &c))| {
            tp += f as usize;
            PrPoint {
                threshold: c,
                precision: tp as f64 / (k + 1) as f64,
                recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
            }
        })
        .collect())
}

/// Area under the precision envelope (precision at each recall raised to
/// the best precision at any higher recall). Empty curve gives 0.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    average_precision_with(curve, Interpolation::AllPoints)
}

pub fn average_precision_with(curve: &[PrPoint], interp: Interpolation) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len() - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    match interp {
        Interpolation::AllPoints => {
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (p, e) in curve.iter().zip(&env) {
                ap += (p.recall - prev) * e;
                prev = p.recall;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut ap = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                // env is non-increasing, so the first point reaching r holds the max.
                if let Some(i) = curve.iter().position(|p| p.recall >= r) {
                    ap += env[i];
                }
            }
            ap / 11.0
        }
    }
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64, Error> {
    if per_class.is_empty() {
        return Err(Error::invalid("mean AP over zero classes"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub ap: f64,
    pub ground_truths: usize,
    pub detections: usize,
    pub true_positives: usize,
    #[serde(skip)]
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
}

/// Per-class matching, curves and AP, then the mean over `classes`.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: usize,
    threshold: f64,
    interp: Interpolation,
) -> Result<EvalReport, Error> {
    let mut reports = Vec::with_capacity(classes);
    for c in 0..classes {
        let d: Vec<Detection> = dets.iter().filter(|d| d.class == c).cloned().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class == c).cloned().collect();
        let m = match_detections(&d, &g, threshold);
        let curve = pr_curve(&m.flags, &m.confidences, g.len())?;
        reports.push(ClassReport {
            class: c,
            ap: average_precision_with(&curve, interp),
            ground_truths: g.len(),
            detections: d.len(),
            true_positives: m.flags.iter().filter(|f| **f).count(),
            curve,
        });
    }
    let map = mean_ap(&reports.iter().map(|r| r.ap).collect::<Vec<_>>())?;
    Ok(EvalReport { classes: reports, map })
}

/// Keep-highest-score suppression: walks candidates by descending score and
/// drops any whose IoU with an already kept box exceeds `threshold`.
/// Returns kept indices in score order.
pub fn suppress(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}
