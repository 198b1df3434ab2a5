//! Multiple-patch learning: bags, subset formation, the continuation
//! schedule and the selector / detector losses.
//!
//! Scores are raw selector outputs (unbounded reals). Bag labels are `+1`
//! or `-1`. Detector probabilities come in `[d_pos, d_neg]` pairs per patch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::graph::{ComputeGraph, GraphBuilder, NodeId, OpKind};
use crate::Error;

/// An image seen as a bag of patches with one label per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: usize,
    /// `+1` or `-1` per class.
    pub labels: Vec<i8>,
    pub patches: Vec<BBox>,
}

impl Bag {
    pub fn new(id: usize, labels: Vec<i8>, patches: Vec<BBox>) -> Result<Self, Error> {
        if patches.is_empty() {
            return Err(Error::invalid("a bag needs at least one patch"));
        }
        if labels.is_empty() || labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(Error::invalid(format!("bag labels must be +1 or -1, got {labels:?}")));
        }
        Ok(Self { id, labels, patches })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSubset {
    pub members: Vec<usize>,
    /// Highest-scored member.
    pub seed: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchLabel {
    Positive,
    Negative,
    Ignored,
}

impl PatchLabel {
    pub fn value(self) -> i8 {
        match self {
            PatchLabel::Positive => 1,
            PatchLabel::Negative => -1,
            PatchLabel::Ignored => 0,
        }
    }
}

/// Knots `0 = G_0 < ... < G_tau = 1` spread over `total_steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSchedule {
    knots: Vec<f64>,
    total_steps: usize,
}

impl ContinuationSchedule {
    pub fn new(knots: Vec<f64>, total_steps: usize) -> Result<Self, Error> {
        if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::invalid("knots must start at exactly 0 and end at exactly 1"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("knots must be strictly increasing"));
        }
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(Self { knots, total_steps })
    }

    /// `tau + 1` evenly spaced knots.
    pub fn linear(tau: usize, total_steps: usize) -> Result<Self, Error> {
        if tau == 0 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        let knots = (0..=tau).map(|i| i as f64 / tau as f64).collect();
        Self::new(knots, total_steps)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn tau(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

/// Piecewise-constant lambda: step `s` falls in interval `floor(s * tau / total)`
/// and takes that knot; the final step takes the last knot.
pub fn schedule_lambda(schedule: &ContinuationSchedule, step: usize) -> Result<f64, Error> {
    if step > schedule.total_steps {
        return Err(Error::OutOfRange {
            what: "schedule step",
            value: step as i64,
        });
    }
    let tau = schedule.tau();
    let k = (step * tau / schedule.total_steps).min(tau);
    Ok(schedule.knots[k])
}

/// Dense pairwise IoU of a fixed patch set, computed once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable {
    n: usize,
    iou: Vec<f64>,
}

impl OverlapTable {
    pub fn new(boxes: &[BBox]) -> Self {
        let n = boxes.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = iou(&boxes[i], &boxes[j]);
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        Self { n, iou: m }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.iou[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.iou[i * self.n..(i + 1) * self.n]
    }
}

/// Patch indices by descending score; ties keep index order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy partition: the best unassigned patch seeds a subset that takes
/// every unassigned patch overlapping it with IoU >= `lambda`.
pub fn form_subsets(boxes: &[BBox], scores: &[f64], lambda: f64) -> Result<Vec<PatchSubset>, Error> {
    if boxes.len() != scores.len() {
        return Err(Error::invalid("boxes and scores differ in length"));
    }
    form_subsets_with(&OverlapTable::new(boxes), scores, lambda)
}

pub fn form_subsets_with(table: &OverlapTable, scores: &[f64], lambda: f64) -> Result<Vec<PatchSubset>, Error> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot partition an empty patch list"));
    }
    if table.len() != scores.len() {
        return Err(Error::invalid("overlap table and scores differ in length"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut assigned = vec![false; scores.len()];
    let mut subsets = Vec::new();
    for seed in score_order(scores) {
        if assigned[seed] {
            continue;
        }
        let row = table.row(seed);
        let members: Vec<usize> = (0..scores.len()).filter(|&j| !assigned[j] && row[j] >= lambda).collect();
        for &j in &members {
            assigned[j] = true;
        }
        let score = subset_score(&members.iter().map(|&j| scores[j]).collect::<Vec<_>>());
        subsets.push(PatchSubset { members, seed, score });
    }
    Ok(subsets)
}

/// Mean of the member scores.
pub fn subset_score(member_scores: &[f64]) -> f64 {
    member_scores.iter().sum::<f64>() / member_scores.len() as f64
}

/// Index of the highest subset score; the lowest index wins ties.
pub fn best_subset(subset_scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in subset_scores.iter().enumerate() {
        if best.is_none_or(|b| s > subset_scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn hinge(x: f64) -> f64 {
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

/// `max(0, 1 - y * max_k score_k)`.
pub fn selection_loss(label: i8, subset_scores: &[f64]) -> Result<f64, Error> {
    let k = best_subset(subset_scores).ok_or_else(|| Error::invalid("no subsets"))?;
    Ok(hinge(label as f64 * subset_scores[k]))
}

/// Standard multiple-instance hinge on the single best patch.
pub fn standard_mil_loss(label: i8, scores: &[f64]) -> Result<f64, Error> {
    selection_loss(label, scores)
}

/// `+1` when IoU with the seed is at least `1 - lambda/2`, `-1` below
/// `lambda/2`, ignored in between.
pub fn label_patches(boxes: &[BBox], seed: usize, lambda: f64) -> Result<Vec<PatchLabel>, Error> {
    let s = boxes.get(seed).ok_or(Error::OutOfRange {
        what: "seed index",
        value: seed as i64,
    })?;
    Ok(boxes.iter().map(|b| threshold_label(iou(s, b), lambda)).collect())
}

pub fn label_patches_with(table: &OverlapTable, seed: usize, lambda: f64) -> Vec<PatchLabel> {
    table.row(seed).iter().map(|&v| threshold_label(v, lambda)).collect()
}

fn threshold_label(v: f64, lambda: f64) -> PatchLabel {
    if v >= 1.0 - lambda / 2.0 {
        PatchLabel::Positive
    } else if v < lambda / 2.0 {
        PatchLabel::Negative
    } else {
        PatchLabel::Ignored
    }
}

/// Averaged negative log-likelihood of the labels; `probs[i]` is
/// `[d_pos, d_neg]`. Returns the loss and how many probabilities had to be
/// clamped at `1e-12`.
pub fn detector_loss(labels: &[PatchLabel], probs: &[[f64; 2]]) -> Result<(f64, usize), Error> {
    if labels.len() != probs.len() {
        return Err(Error::invalid("labels and probabilities differ in length"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut clamps = 0usize;
    for (l, p) in labels.iter().zip(probs) {
        let d = match l {
            PatchLabel::Positive => p[0],
            PatchLabel::Negative => p[1],
            PatchLabel::Ignored => continue,
        };
        if !(d > crate::graph::LOG_FLOOR) {
            clamps += 1;
        }
        sum -= libm::log(d.max(crate::graph::LOG_FLOOR));
        count += 1;
    }
    Ok((if count == 0 { 0.0 } else { sum / count as f64 }, clamps))
}

/// Selection loss plus detector loss for one class of one bag.
pub fn total_loss(selection: f64, detector: f64) -> f64 {
    selection + detector
}

/// Everything the losses need from one class of one bag at one lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    pub label: i8,
    pub winner: PatchSubset,
    pub patch_labels: Vec<PatchLabel>,
}

/// Winning subset and pseudo-labels for one class. Negative bags label
/// every patch negative: a bag without the class holds no positive patch.
pub fn class_targets(table: &OverlapTable, scores: &[f64], label: i8, lambda: f64) -> Result<ClassTargets, Error> {
    let subsets = form_subsets_with(table, scores, lambda)?;
    let means: Vec<f64> = subsets.iter().map(|s| s.score).collect();
    let k = best_subset(&means).expect("at least one subset");
    let winner = subsets[k].clone();
    let patch_labels = if label > 0 {
        label_patches_with(table, winner.seed, lambda)
    } else {
        vec![PatchLabel::Negative; scores.len()]
    };
    Ok(ClassTargets {
        label,
        winner,
        patch_labels,
    })
}

/// Differentiable form of the per-bag objective over `classes x patches`
/// selector scores and `[classes, 2, patches]` detector probabilities.
///
/// Inputs: `sel`, `det`, one `sel_mask<c>` per class and `det_mask`. The
/// masks carry the non-differentiable choices (winning subset, labels) so
/// gradients reach every winning member equally and only labeled patches.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: ComputeGraph,
    pub classes: usize,
    pub patches: usize,
    pub selection: Vec<NodeId>,
    pub detector: NodeId,
    pub total: NodeId,
}

impl LossGraph {
    pub fn build(classes: usize, patches: usize) -> Result<Self, Error> {
        let mut b = GraphBuilder::new();
        let sel = b.input("sel", &[classes, patches])?;
        let det = b.input("det", &[classes, 2, patches])?;
        let n_sel = (classes * patches) as f64;
        let mut selection = Vec::with_capacity(classes);
        for c in 0..classes {
            let m = b.input(&format!("sel_mask{c}"), &[classes, patches])?;
            let picked = b.mul(sel, m)?;
            let mean = b.mean(picked)?;
            let margin = b.scale(mean, n_sel)?;
            selection.push(b.unary(OpKind::Hinge, margin)?);
        }
        let dm = b.input("det_mask", &[classes, 2, patches])?;
        let logp = b.unary(OpKind::Log, det)?;
        let picked = b.mul(logp, dm)?;
        let mean = b.mean(picked)?;
        let detector = b.scale(mean, -((classes * 2 * patches) as f64))?;
        let mut terms = selection.clone();
        terms.push(detector);
        let total = b.add(&terms)?;
        b.output("total", total)?;
        b.output("detector", detector)?;
        Ok(Self {
            graph: b.finish(),
            classes,
            patches,
            selection,
            detector,
            total,
        })
    }

    /// Masks for the given per-class targets, in input-name order.
    pub fn masks(&self, targets: &[ClassTargets]) -> Result<Vec<(alloc::string::String, crate::Tensor)>, Error> {
        if targets.len() != self.classes {
            return Err(Error::invalid("one target per class expected"));
        }
        let (nc, np) = (self.classes, self.patches);
        let mut out = Vec::with_capacity(nc + 1);
        let mut det = vec![0.0; nc * 2 * np];
        for (c, t) in targets.iter().enumerate() {
            let mut m = vec![0.0; nc * np];
            let w = t.label as f64 / t.winner.members.len() as f64;
            for &j in &t.winner.members {
                m[c * np + j] = w;
            }
            out.push((format!("sel_mask{c}"), crate::Tensor::new(&[nc, np], m)?));
            let count = t.patch_labels.iter().filter(|l| **l != PatchLabel::Ignored).count();
            if count > 0 {
                let w = 1.0 / count as f64;
                for (j, l) in t.patch_labels.iter().enumerate() {
                    match l {
                        PatchLabel::Positive => det[(c * 2) * np + j] = w,
                        PatchLabel::Negative => det[(c * 2 + 1) * np + j] = w,
                        PatchLabel::Ignored => {}
                    }
                }
            }
        }
        out.push(("det_mask".into(), crate::Tensor::new(&[nc, 2, np], det)?));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::forward;
    use crate::Tensor;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = ContinuationSchedule::linear(4, 100).unwrap();
        assert_eq!(schedule_lambda(&s, 0).unwrap(), 0.0);
        assert_eq!(schedule_lambda(&s, 100).unwrap(), 1.0);
        assert_eq!(schedule_lambda(&s, 50).unwrap(), 0.5);
        assert_eq!(schedule_lambda(&s, 24).unwrap(), 0.0);
        assert_eq!(schedule_lambda(&s, 25).unwrap(), 0.25);
        assert!(schedule_lambda(&s, 101).is_err());
        assert!(ContinuationSchedule::new(vec![0.0, 0.5, 0.5, 1.0], 10).is_err());
        assert!(ContinuationSchedule::new(vec![0.1, 1.0], 10).is_err());
    }

    #[test]
    fn subsets_by_hand() {
        // p1 and p2 overlap with IoU 0.6; p3 is far away.
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 2.5, 10.0, 12.5), b(50.0, 50.0, 60.0, 60.0)];
        assert!((iou(&boxes[0], &boxes[1]) - 0.6).abs() < 1e-12);
        let subs = form_subsets(&boxes, &[0.9, 0.5, 0.1], 0.5).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].members, [0, 1]);
        assert_eq!(subs[0].seed, 0);
        assert!((subs[0].score - 0.7).abs() < 1e-12);
        assert_eq!(subs[1].members, [2]);

        let all = form_subsets(&boxes, &[0.9, 0.5, 0.1], 0.0).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].members.len(), 3);
        assert!(form_subsets(&[], &[], 0.5).is_err());
    }

    #[test]
    fn subset_scores_are_means() {
        assert!((subset_score(&[0.2, 0.4]) - 0.3).abs() < 1e-15);
        assert_eq!(subset_score(&[0.7]), 0.7);
        assert_eq!(subset_score(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(selection_loss(1, &[1.2]).unwrap(), 0.0);
        assert_eq!(selection_loss(1, &[0.0]).unwrap(), 1.0);
        assert_eq!(selection_loss(-1, &[0.5]).unwrap(), 1.5);
        assert_eq!(standard_mil_loss(1, &[0.3, 2.0]).unwrap(), 0.0);
        assert_eq!(standard_mil_loss(-1, &[0.3, 2.0]).unwrap(), 3.0);
        assert_eq!(best_subset(&[1.0, 3.0, 3.0]), Some(1));
    }

    #[test]
    fn label_thresholds() {
        // IoU of the second box with the first is 0.6, third 0.4.
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 2.5, 10.0, 12.5), b(0.0, 0.0, 10.0, 4.0)];
        let l = label_patches(&boxes, 0, 1.0).unwrap();
        assert_eq!(l, [PatchLabel::Positive, PatchLabel::Positive, PatchLabel::Negative]);
        assert_eq!(threshold_label(0.85, 0.4), PatchLabel::Positive);
        assert_eq!(threshold_label(0.5, 0.4), PatchLabel::Ignored);
        assert_eq!(threshold_label(0.19, 0.4), PatchLabel::Negative);
    }

    #[test]
    fn detector_loss_examples() {
        let (l, _) = detector_loss(&[PatchLabel::Positive], &[[1.0, 0.0]]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = detector_loss(&[PatchLabel::Positive], &[[0.5, 0.5]]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = detector_loss(&[PatchLabel::Ignored; 2], &[[0.5, 0.5]; 2]).unwrap();
        assert_eq!(l, 0.0);
        let (l, clamps) = detector_loss(&[PatchLabel::Negative], &[[1.0, 0.0]]).unwrap();
        assert_eq!(clamps, 1);
        assert!((l + libm::log(1e-12)).abs() < 1e-9);
        assert!((total_loss(1.5, 0.6931) - 2.1931).abs() < 1e-12);
    }

    #[test]
    fn loss_graph_matches_plain_functions() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 2.5, 10.0, 12.5), b(50.0, 50.0, 60.0, 60.0)];
        let table = OverlapTable::new(&boxes);
        let sel = [[0.9, 0.5, 0.1], [-0.2, 0.4, 0.3]];
        let det = [[[0.7, 0.2, 0.4], [0.3, 0.8, 0.6]], [[0.1, 0.5, 0.9], [0.9, 0.5, 0.1]]];
        let labels = [1i8, -1];
        let lambda = 0.5;
        let lg = LossGraph::build(2, 3).unwrap();
        let mut expected = 0.0;
        let mut targets = Vec::new();
        for c in 0..2 {
            let t = class_targets(&table, &sel[c], labels[c], lambda).unwrap();
            let subs = form_subsets_with(&table, &sel[c], lambda).unwrap();
            let s: Vec<f64> = subs.iter().map(|s| s.score).collect();
            let probs: Vec<[f64; 2]> = (0..3).map(|j| [det[c][0][j], det[c][1][j]]).collect();
            expected += total_loss(
                selection_loss(labels[c], &s).unwrap(),
                detector_loss(&t.patch_labels, &probs).unwrap().0,
            );
            targets.push(t);
        }
        let sel_t = Tensor::new(&[2, 3], sel.iter().flatten().copied().collect()).unwrap();
        let det_t = Tensor::new(&[2, 2, 3], det.iter().flatten().flatten().copied().collect()).unwrap();
        let masks = lg.masks(&targets).unwrap();
        let mut inputs: Vec<(&str, &Tensor)> = vec![("sel", &sel_t), ("det", &det_t)];
        inputs.extend(masks.iter().map(|(n, t)| (n.as_str(), t)));
        let e = forward(&lg.graph, &inputs, &lg.graph.init_params(0)).unwrap();
        let got = e.output(&lg.graph, "total").unwrap().item().unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
}
