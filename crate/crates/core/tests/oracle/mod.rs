//! Brute-force reference implementations for the evaluation code, written
//! for obviousness rather than speed.

#![allow(dead_code)]

use mpfp_core::metrics::{Detection, GroundTruth};
use mpfp_core::BBox;

/// Plain box IoU from corner coordinates.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = w * h;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly takes the most confident remaining detection (first on ties)
/// and scans every ground truth for the best free match. Returns the
/// detection indices in the order taken and their true-positive flags.
pub fn matching(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> (Vec<usize>, Vec<bool>) {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut taken = vec![false; gts.len()];
    let (mut order, mut flags) = (Vec::new(), Vec::new());
    while !remaining.is_empty() {
        let mut pick = 0;
        for k in 1..remaining.len() {
            if dets[remaining[k]].confidence > dets[remaining[pick]].confidence {
                pick = k;
            }
        }
        let i = remaining.remove(pick);
        let mut best: Option<usize> = None;
        for j in 0..gts.len() {
            let ok = !taken[j] && gts[j].image == dets[i].image && gts[j].class == dets[i].class;
            if ok && box_iou(&dets[i].bbox, &gts[j].bbox) >= thr {
                let better = match best {
                    None => true,
                    Some(b) => box_iou(&dets[i].bbox, &gts[j].bbox) > box_iou(&dets[i].bbox, &gts[b].bbox),
                };
                if better {
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best {
            taken[j] = true;
        }
        order.push(i);
        flags.push(best.is_some());
    }
    (order, flags)
}

/// All-points AP: each true positive adds `1 / total_gt` of recall, paid
/// at the best precision reached at or after it in the sweep.
pub fn all_points_ap(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let precision_at = |k: usize| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let best = (k..flags.len()).map(precision_at).fold(0.0, f64::max);
            ap += best / total_gt as f64;
        }
    }
    ap
}

/// 11-point AP: mean over r in {0, 0.1, ..., 1} of the best precision at
/// recall >= r (0 when unreached).
pub fn eleven_point_ap(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}
