//! Feature fusion rules and the fusion node used at every pyramid level.
//!
//! The free functions work on concrete tensors (handy for benchmarks and
//! checks); the `*_node` builders emit the same computation into a graph so
//! it can be trained.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{apply, GraphBuilder, Init, NodeId, OpKind};
use crate::tensor::Tensor;
use crate::Error;

/// Default `theta` guarding the instant-fusion denominator.
pub const DEFAULT_THETA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionRule {
    /// Relu-clamped weights normalized by `theta + sum`.
    Instant,
    /// Weights from a softmax over per-input logits.
    Softmax,
    /// Independent sigmoid gates, not normalized.
    Sigmoid,
    /// Weights predicted from the inputs, one per input and channel group.
    #[serde(rename = "learned-inv")]
    LearnedInvariant,
    /// Weights predicted from the inputs per channel group and position.
    #[serde(rename = "learned-adp")]
    LearnedAdaptive,
}

impl FusionRule {
    pub const ALL: [FusionRule; 5] = [
        FusionRule::Instant,
        FusionRule::Softmax,
        FusionRule::Sigmoid,
        FusionRule::LearnedInvariant,
        FusionRule::LearnedAdaptive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionRule::Instant => "instant",
            FusionRule::Softmax => "softmax",
            FusionRule::Sigmoid => "sigmoid",
            FusionRule::LearnedInvariant => "learned-inv",
            FusionRule::LearnedAdaptive => "learned-adp",
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionRule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion rule `{s}` (expected instant, softmax, sigmoid, learned-inv or learned-adp)")))
    }
}

/// A `[C, H, W]` map attached to pyramid level `level` (side = input / 2^level).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: u32,
    pub tensor: Tensor,
}

impl FeatureMap {
    pub fn new(level: u32, tensor: Tensor) -> Result<Self, Error> {
        let s = tensor.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::invalid(format!("feature map must be square [C, H, W], got {s:?}")));
        }
        Ok(Self { level, tensor })
    }

    pub fn side(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Moves a map to `target_level` by repeated x2 nearest upsampling (finer)
/// or 2x2 averaging (coarser). Channel adaptation needs learned weights and
/// lives in [`rescale_node`].
pub fn rescale(f: &FeatureMap, target_level: u32) -> Result<FeatureMap, Error> {
    let steps = target_level as i64 - f.level as i64;
    if steps.abs() > 4 {
        return Err(Error::OutOfRange {
            what: "rescale level difference",
            value: steps,
        });
    }
    let mut t = f.tensor.clone();
    for _ in 0..steps.unsigned_abs() {
        let op = if steps > 0 { OpKind::AvgDownsample } else { OpKind::NearestUpsample };
        t = apply(&op, &[&t])?;
    }
    FeatureMap::new(target_level, t)
}

fn fuse_with(op: OpKind, weights: Tensor, inputs: &[&Tensor]) -> Result<Tensor, Error> {
    let mut all = Vec::with_capacity(inputs.len() + 1);
    all.push(&weights);
    all.extend_from_slice(inputs);
    apply(&op, &all)
}

/// `sum_i relu(raw_i) / (theta + sum_j relu(raw_j)) * I_i`.
pub fn instant_fuse(inputs: &[&Tensor], raw_weights: &[f64], theta: f64) -> Result<Tensor, Error> {
    fuse_with(OpKind::InstantFuse { theta }, Tensor::from_vec(raw_weights.to_vec()), inputs)
}

/// Softmax across inputs. `logits` is `[n]` or `[n, ..map shape]`.
pub fn softmax_fuse(inputs: &[&Tensor], logits: &Tensor) -> Result<Tensor, Error> {
    fuse_with(OpKind::SoftmaxFuse, logits.clone(), inputs)
}

/// Independent sigmoid gates. `logits` is `[n]` or `[n, ..map shape]`.
pub fn sigmoid_fuse(inputs: &[&Tensor], logits: &Tensor) -> Result<Tensor, Error> {
    fuse_with(OpKind::SigmoidFuse, logits.clone(), inputs)
}

/// `sum_i w_i * A_i` with predicted weights `[n*groups, 1|H, 1|W]`.
pub fn learned_fuse(inputs: &[&Tensor], weights: &Tensor, groups: usize) -> Result<Tensor, Error> {
    fuse_with(OpKind::WeightedFuse { groups }, weights.clone(), inputs)
}

/// Fusion settings shared by every node of a pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub rule: FusionRule,
    pub theta: f64,
    /// Channel groups for the learned rules.
    pub groups: usize,
}

impl FusionSpec {
    pub fn new(rule: FusionRule) -> Self {
        Self {
            rule,
            theta: DEFAULT_THETA,
            groups: 1,
        }
    }
}

/// Emits the weighted combination of `inputs` (without the output conv).
/// Weight parameters are named `<scope>fuse.w`.
pub fn weighting_node(b: &mut GraphBuilder, inputs: &[NodeId], spec: &FusionSpec, gain: f64) -> Result<NodeId, Error> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::invalid("fusion needs at least one input"));
    }
    let mut all = Vec::with_capacity(n + 1);
    match spec.rule {
        FusionRule::Instant | FusionRule::Softmax | FusionRule::Sigmoid => {
            // Equal weights to start: raw 1 for instant, logit 0 otherwise.
            let (init, op) = match spec.rule {
                FusionRule::Instant => (1.0, OpKind::InstantFuse { theta: spec.theta }),
                FusionRule::Softmax => (0.0, OpKind::SoftmaxFuse),
                _ => (0.0, OpKind::SigmoidFuse),
            };
            all.push(b.param("fuse.w", &[n], Init::Const(init))?);
            all.extend_from_slice(inputs);
            b.op(op, &all)
        }
        FusionRule::LearnedInvariant | FusionRule::LearnedAdaptive => {
            let s = b.shape(inputs[0]).to_vec();
            if s.len() != 3 {
                return Err(Error::shape(b.scope(), "learned fusion expects [C, H, W] maps"));
            }
            let (c, h) = (s[0], s[1]);
            let k = spec.groups;
            let x = b.op(OpKind::Concat, inputs)?;
            let w = b.param("fuse.phi.w", &[n * k, n * c], Init::HeNormal { fan_in: n * c, gain })?;
            let bias = b.param("fuse.phi.b", &[n * k], Init::Const(1.0))?;
            let logits = b.conv1x1(x, w, Some(bias))?;
            let weights = if spec.rule == FusionRule::LearnedInvariant {
                let pooled = b.op(OpKind::AvgPool { size: h }, &[logits])?;
                b.unary(OpKind::Relu, pooled)?
            } else {
                b.unary(OpKind::Sigmoid, logits)?
            };
            all.push(weights);
            all.extend_from_slice(inputs);
            b.op(OpKind::WeightedFuse { groups: k }, &all)
        }
    }
}

/// `conv3x3 -> affine -> swish`, parameters `<scope>conv.w`, `<scope>affine.{g,b}`.
pub fn conv_block(b: &mut GraphBuilder, x: NodeId, out_channels: usize, stride: usize, gain: f64) -> Result<NodeId, Error> {
    let cin = b.shape(x)[0];
    let w = b.param("conv.w", &[out_channels, cin, 3, 3], Init::HeNormal { fan_in: cin * 9, gain })?;
    let y = b.conv2d(x, w, None, stride, 1)?;
    affine_swish(b, y)
}

pub fn affine_swish(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId, Error> {
    let c = b.shape(x)[0];
    let g = b.param("affine.g", &[c], Init::Const(1.0))?;
    let beta = b.param("affine.b", &[c], Init::Const(0.0))?;
    let y = b.op(OpKind::Affine, &[x, g, beta])?;
    b.unary(OpKind::Swish, y)
}

/// A pyramid fusion node: weighted combination of 2 or 3 same-level inputs
/// followed by a conv block. Off-level inputs must be rescaled first.
pub fn fuse_node(b: &mut GraphBuilder, inputs: &[NodeId], spec: &FusionSpec, gain: f64) -> Result<NodeId, Error> {
    if !(2..=3).contains(&inputs.len()) {
        return Err(Error::invalid(format!("fusion node takes 2 or 3 inputs, got {}", inputs.len())));
    }
    let fused = weighting_node(b, inputs, spec, gain)?;
    let c = b.shape(fused)[0];
    conv_block(b, fused, c, 1, gain)
}

/// Graph version of [`rescale`]; upsampling is followed by a learned 1x1
/// conv (`<scope>up.w`, `<scope>up.b`).
pub fn rescale_node(b: &mut GraphBuilder, x: NodeId, from_level: u32, to_level: u32, gain: f64) -> Result<NodeId, Error> {
    let steps = to_level as i64 - from_level as i64;
    if steps.abs() > 4 {
        return Err(Error::OutOfRange {
            what: "rescale level difference",
            value: steps,
        });
    }
    let mut y = x;
    for _ in 0..steps.unsigned_abs() {
        let op = if steps > 0 { OpKind::AvgDownsample } else { OpKind::NearestUpsample };
        y = b.unary(op, y)?;
    }
    if steps < 0 {
        let c = b.shape(y)[0];
        let w = b.param("up.w", &[c, c], Init::HeNormal { fan_in: c, gain })?;
        let bias = b.param("up.b", &[c], Init::Const(0.0))?;
        y = b.conv1x1(y, w, Some(bias))?;
    }
    Ok(y)
}

/// Number of fusion weights a learned rule predicts for `n` inputs of side
/// `side`: `n*k` for the invariant rule, `n*k*side^2` for the adaptive one.
pub fn learned_weight_count(rule: FusionRule, n: usize, groups: usize, side: usize) -> Option<usize> {
    match rule {
        FusionRule::LearnedInvariant => Some(n * groups),
        FusionRule::LearnedAdaptive => Some(n * groups * side * side),
        _ => None,
    }
}

/// Human-readable label for one fusion node, used in graph dumps.
pub fn describe_inputs(names: &[&str]) -> String {
    let mut s = String::new();
    for (i, n) in names.iter().enumerate() {
        if i > 0 {
            s.push_str(" + ");
        }
        s.push_str(n);
    }
    s
}

/// Weight tensor shapes of the learned rules, for reporting.
pub fn learned_weight_shape(rule: FusionRule, n: usize, groups: usize, side: usize) -> Option<Vec<usize>> {
    match rule {
        FusionRule::LearnedInvariant => Some(vec![n * groups, 1, 1]),
        FusionRule::LearnedAdaptive => Some(vec![n * groups, side, side]),
        _ => None,
    }
}
