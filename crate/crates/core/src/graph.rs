//! Static define-then-run compute graph with reverse-mode gradients.
//!
//! A [`GraphBuilder`] appends nodes in topological order and infers every
//! shape at build time, so a finished [`ComputeGraph`] is immutable and can
//! be evaluated from several threads at once. Parameters are declared in the
//! graph but their values live in a separate [`Params`] store, which keeps
//! optimizer updates outside the graph.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernels::{self, ConvGeom};
use crate::tensor::{Tensor, MAX_RANK};
use crate::Error;

/// Lower clamp applied inside [`OpKind::Log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse pooling weights from pyramid maps to patch feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTable {
    /// `(height, width)` of each input map, in input order.
    pub level_shapes: Vec<(usize, usize)>,
    /// Pooled regions per patch (the inner box, context rings, ...).
    pub regions: usize,
    pub patches: Vec<PooledPatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledPatch {
    /// Index of the input map this patch reads from.
    pub level: usize,
    /// For each region, `(flat cell index, weight)` pairs.
    pub weights: Vec<Vec<(u32, f64)>>,
}

/// Every operation the engine knows how to run and differentiate.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Param,
    /// Inputs `x [C,H,W]`, `w [O,C,kh,kw]` and optionally `b [O]`.
    Conv2d { stride: usize, pad: usize },
    /// Inputs `x [C,H,W]`, `w [O,C]` and optionally `b [O]`.
    Conv1x1,
    Relu,
    Swish,
    Sigmoid,
    Softmax { axis: usize },
    /// Non-overlapping `size x size` window.
    MaxPool { size: usize },
    AvgPool { size: usize },
    NearestUpsample,
    AvgDownsample,
    /// Elementwise sum of two or more equal-shape inputs.
    Add,
    ScalarScale(f64),
    Mul,
    /// Mean of all elements; the result is a rank-0 scalar.
    ReduceMean,
    /// `max(0, 1 - x)`.
    Hinge,
    /// Natural log of `max(x, LOG_FLOOR)`.
    Log,
    /// Per-channel `gamma * x + beta`; inputs `x`, `gamma [C]`, `beta [C]`.
    Affine,
    /// Concatenation along axis 0.
    Concat,
    Reshape(Vec<usize>),
    /// Inputs: raw weights `[n]`, then `n` equal-shape maps.
    InstantFuse { theta: f64 },
    /// Inputs: logits, then `n` equal-shape maps. Logits are `[n]` (one per
    /// input) or `[n, ..map shape]` (one per input and position); the
    /// softmax normalizes across inputs.
    SoftmaxFuse,
    /// As `SoftmaxFuse`, with independent sigmoid gates and no normalization.
    SigmoidFuse,
    /// Inputs: weights `[n*groups, h, w]` with `h, w` either 1 or the map
    /// extent, then `n` maps `[C,H,W]`; channel `c` uses group `c * groups / C`.
    WeightedFuse { groups: usize },
    /// Inputs: one map `[C,H,W]` per pyramid level; output `[regions*C, patches, 1]`.
    PatchPool(Arc<PoolTable>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Relu => "relu",
            OpKind::Swish => "swish",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax { .. } => "softmax",
            OpKind::MaxPool { .. } => "max_pool",
            OpKind::AvgPool { .. } => "avg_pool",
            OpKind::NearestUpsample => "nearest_upsample",
            OpKind::AvgDownsample => "avg_downsample",
            OpKind::Add => "add",
            OpKind::ScalarScale(_) => "scalar_scale",
            OpKind::Mul => "elementwise_mul",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::Hinge => "hinge",
            OpKind::Log => "log",
            OpKind::Affine => "affine",
            OpKind::Concat => "concat",
            OpKind::Reshape(_) => "reshape",
            OpKind::InstantFuse { .. } => "instant_fuse",
            OpKind::SoftmaxFuse => "softmax_fuse",
            OpKind::SigmoidFuse => "sigmoid_fuse",
            OpKind::WeightedFuse { .. } => "weighted_fuse",
            OpKind::PatchPool(_) => "patch_pool",
        }
    }
}

/// How a parameter is initialized by [`ComputeGraph::init_params`].
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Const(f64),
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    HeNormal { fan_in: usize, gain: f64 },
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub node: NodeId,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    params: Vec<ParamDecl>,
    outputs: Vec<(String, NodeId)>,
}

/// Parameter values, ordered as the graph declares them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new(names: Vec<String>, values: Vec<Tensor>) -> Result<Self, Error> {
        if names.len() != values.len() {
            return Err(Error::invalid("parameter names and values differ in count"));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

impl ComputeGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn inputs(&self) -> &[(String, NodeId)] {
        &self.inputs
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Result<NodeId, Error> {
        lookup(&self.outputs, name)
    }

    pub fn input(&self, name: &str) -> Result<NodeId, Error> {
        lookup(&self.inputs, name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Deterministic parameter values from the declared initializers.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(self.params.len());
        let mut values = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = match &p.init {
                Init::Const(v) => Tensor::full(&p.shape, *v),
                Init::HeNormal { fan_in, gain } => {
                    Tensor::normal(&p.shape, gain / libm::sqrt(*fan_in as f64), &mut rng)
                }
                Init::Values(v) => Tensor::new(&p.shape, v.clone()).expect("checked at declaration"),
            };
            names.push(p.name.clone());
            values.push(t);
        }
        Params { names, values }
    }

    /// Counts edges into non-source nodes.
    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }
}

fn lookup(list: &[(String, NodeId)], name: &str) -> Result<NodeId, Error> {
    list.iter()
        .find(|(n, _)| n == name)
        .map(|(_, id)| *id)
        .ok_or_else(|| Error::UnknownName(name.to_string()))
}

/// Appends nodes in topological order with build-time shape inference.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    params: Vec<ParamDecl>,
    outputs: Vec<(String, NodeId)>,
    scope: String,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prefix for the labels of nodes added from now on.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>, label: String) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            label,
        });
        id
    }

    fn auto_label(&self, op: &OpKind) -> String {
        format!("{}{}#{}", self.scope, op.name(), self.nodes.len())
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, Error> {
        if self.inputs.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate input `{name}`")));
        }
        check_rank(name, shape)?;
        let id = self.push(OpKind::Input, Vec::new(), shape.to_vec(), name.to_string());
        self.inputs.push((name.to_string(), id));
        Ok(id)
    }

    /// Declares a parameter; its full name is the current scope plus `name`.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<NodeId, Error> {
        let full = format!("{}{}", self.scope, name);
        if self.params.iter().any(|p| p.name == full) {
            return Err(Error::invalid(format!("duplicate parameter `{full}`")));
        }
        check_rank(&full, shape)?;
        if let Init::Values(v) = &init {
            if v.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(full, "initial values do not match the shape"));
            }
        }
        let id = self.push(OpKind::Param, Vec::new(), shape.to_vec(), full.clone());
        self.params.push(ParamDecl {
            name: full,
            node: id,
            shape: shape.to_vec(),
            init,
        });
        Ok(id)
    }

    pub fn output(&mut self, name: &str, id: NodeId) -> Result<(), Error> {
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate output `{name}`")));
        }
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    /// Adds an op node after checking its inputs and inferring its shape.
    pub fn op(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId, Error> {
        let label = self.auto_label(&op);
        if matches!(op, OpKind::Input | OpKind::Param) {
            return Err(Error::invalid("inputs and parameters are declared with input() and param()"));
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::shape(label, format!("refers to unknown node {}", bad.0)));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|i| self.nodes[i.0].shape.as_slice()).collect();
        let shape = infer_shape(&op, &shapes).map_err(|d| Error::shape(label.clone(), d))?;
        Ok(self.push(op, inputs.to_vec(), shape, label))
    }

    pub fn finish(self) -> ComputeGraph {
        ComputeGraph {
            nodes: self.nodes,
            inputs: self.inputs,
            params: self.params,
            outputs: self.outputs,
        }
    }

    // Thin helpers for the common ops.

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId, Error> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.op(OpKind::Conv2d { stride, pad }, &ins)
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, Error> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.op(OpKind::Conv1x1, &ins)
    }

    pub fn unary(&mut self, op: OpKind, x: NodeId) -> Result<NodeId, Error> {
        self.op(op, &[x])
    }

    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId, Error> {
        self.op(OpKind::Add, xs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        self.op(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, Error> {
        self.op(OpKind::ScalarScale(c), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, Error> {
        self.op(OpKind::ReduceMean, &[x])
    }
}

fn check_rank(name: &str, shape: &[usize]) -> Result<(), Error> {
    if shape.len() > MAX_RANK {
        return Err(Error::shape(name, format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    Ok(())
}

fn expect_arity(n: usize, lo: usize, hi: usize) -> Result<(), String> {
    if n < lo || n > hi {
        Err(format!("expected {lo}..={hi} inputs, got {n}"))
    } else {
        Ok(())
    }
}

fn expect_rank(s: &[usize], r: usize, what: &str) -> Result<(), String> {
    if s.len() != r {
        Err(format!("{what} must have rank {r}, got shape {s:?}"))
    } else {
        Ok(())
    }
}

fn fuse_inputs(shapes: &[&[usize]]) -> Result<(), String> {
    if shapes.len() < 2 {
        return Err("fusion needs a weight tensor and at least one map".into());
    }
    let maps = &shapes[1..];
    if maps.iter().any(|s| *s != maps[0]) {
        return Err(format!("fused maps differ in shape: {maps:?}"));
    }
    Ok(())
}

fn infer_shape(op: &OpKind, s: &[&[usize]]) -> Result<Vec<usize>, String> {
    match op {
        OpKind::Input | OpKind::Param => unreachable!(),
        OpKind::Conv2d { stride, pad } => {
            expect_arity(s.len(), 2, 3)?;
            expect_rank(s[0], 3, "conv2d input")?;
            expect_rank(s[1], 4, "conv2d kernel")?;
            let (c, h, w) = (s[0][0], s[0][1], s[0][2]);
            let (o, kc, kh, kw) = (s[1][0], s[1][1], s[1][2], s[1][3]);
            if kc != c {
                return Err(format!("kernel expects {kc} channels, input has {c}"));
            }
            if *stride == 0 {
                return Err("stride must be at least 1".into());
            }
            if h + 2 * pad < kh || w + 2 * pad < kw {
                return Err("kernel larger than the padded input".into());
            }
            if s.len() == 3 && s[2] != [o] {
                return Err(format!("bias must be [{o}], got {:?}", s[2]));
            }
            Ok(vec![o, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1])
        }
        OpKind::Conv1x1 => {
            expect_arity(s.len(), 2, 3)?;
            expect_rank(s[0], 3, "conv1x1 input")?;
            expect_rank(s[1], 2, "conv1x1 weight")?;
            if s[1][1] != s[0][0] {
                return Err(format!("weight expects {} channels, input has {}", s[1][1], s[0][0]));
            }
            if s.len() == 3 && s[2] != [s[1][0]] {
                return Err(format!("bias must be [{}], got {:?}", s[1][0], s[2]));
            }
            Ok(vec![s[1][0], s[0][1], s[0][2]])
        }
        OpKind::Relu | OpKind::Swish | OpKind::Sigmoid | OpKind::Hinge | OpKind::Log | OpKind::ScalarScale(_) => {
            expect_arity(s.len(), 1, 1)?;
            Ok(s[0].to_vec())
        }
        OpKind::Softmax { axis } => {
            expect_arity(s.len(), 1, 1)?;
            if *axis >= s[0].len() {
                return Err(format!("axis {axis} out of range for shape {:?}", s[0]));
            }
            Ok(s[0].to_vec())
        }
        OpKind::MaxPool { size } | OpKind::AvgPool { size } => {
            expect_arity(s.len(), 1, 1)?;
            expect_rank(s[0], 3, "pooling input")?;
            if *size == 0 || s[0][1] % size != 0 || s[0][2] % size != 0 {
                return Err(format!("window {size} does not tile {:?}", s[0]));
            }
            Ok(vec![s[0][0], s[0][1] / size, s[0][2] / size])
        }
        OpKind::AvgDownsample => {
            expect_arity(s.len(), 1, 1)?;
            expect_rank(s[0], 3, "downsample input")?;
            if s[0][1] % 2 != 0 || s[0][2] % 2 != 0 {
                return Err(format!("odd extent in {:?}", s[0]));
            }
            Ok(vec![s[0][0], s[0][1] / 2, s[0][2] / 2])
        }
        OpKind::NearestUpsample => {
            expect_arity(s.len(), 1, 1)?;
            expect_rank(s[0], 3, "upsample input")?;
            Ok(vec![s[0][0], s[0][1] * 2, s[0][2] * 2])
        }
        OpKind::Add => {
            expect_arity(s.len(), 2, usize::MAX)?;
            if s.iter().any(|x| *x != s[0]) {
                return Err(format!("operands differ in shape: {s:?}"));
            }
            Ok(s[0].to_vec())
        }
        OpKind::Mul => {
            expect_arity(s.len(), 2, 2)?;
            if s[0] != s[1] {
                return Err(format!("operands differ in shape: {:?} vs {:?}", s[0], s[1]));
            }
            Ok(s[0].to_vec())
        }
        OpKind::ReduceMean => {
            expect_arity(s.len(), 1, 1)?;
            if s[0].iter().product::<usize>() == 0 {
                return Err("mean of an empty tensor".into());
            }
            Ok(Vec::new())
        }
        OpKind::Affine => {
            expect_arity(s.len(), 3, 3)?;
            if s[0].is_empty() {
                return Err("affine needs a channel axis".into());
            }
            let c = s[0][0];
            if s[1] != [c] || s[2] != [c] {
                return Err(format!("scale and shift must be [{c}]"));
            }
            Ok(s[0].to_vec())
        }
        OpKind::Concat => {
            expect_arity(s.len(), 1, usize::MAX)?;
            if s.iter().any(|x| x.is_empty() || x[1..] != s[0][1..]) {
                return Err(format!("trailing extents differ: {s:?}"));
            }
            let mut out = s[0].to_vec();
            out[0] = s.iter().map(|x| x[0]).sum();
            Ok(out)
        }
        OpKind::Reshape(shape) => {
            expect_arity(s.len(), 1, 1)?;
            if shape.len() > MAX_RANK || shape.iter().product::<usize>() != s[0].iter().product::<usize>() {
                return Err(format!("cannot reshape {:?} into {shape:?}", s[0]));
            }
            Ok(shape.clone())
        }
        OpKind::InstantFuse { theta } => {
            if !(*theta > 0.0) {
                return Err("theta must be positive".into());
            }
            fuse_inputs(s)?;
            if s[0] != [s.len() - 1] {
                return Err(format!("expected {} weights, got shape {:?}", s.len() - 1, s[0]));
            }
            Ok(s[1].to_vec())
        }
        OpKind::SoftmaxFuse | OpKind::SigmoidFuse => {
            fuse_inputs(s)?;
            let n = s.len() - 1;
            let per_input = s[0] == [n];
            let per_position = s[0].first() == Some(&n) && s[0][1..] == *s[1];
            if !(per_input || per_position) {
                return Err(format!("expected logits [{n}] or [{n}, {:?}], got {:?}", s[1], s[0]));
            }
            Ok(s[1].to_vec())
        }
        OpKind::WeightedFuse { groups } => {
            fuse_inputs(s)?;
            let n = s.len() - 1;
            expect_rank(s[1], 3, "fused map")?;
            expect_rank(s[0], 3, "fusion weights")?;
            let (c, h, w) = (s[1][0], s[1][1], s[1][2]);
            if *groups == 0 || c % groups != 0 {
                return Err(format!("{groups} groups do not divide {c} channels"));
            }
            if s[0][0] != n * groups || !(s[0][1] == 1 || s[0][1] == h) || !(s[0][2] == 1 || s[0][2] == w) {
                return Err(format!("weights must be [{}, 1|{h}, 1|{w}], got {:?}", n * groups, s[0]));
            }
            Ok(s[1].to_vec())
        }
        OpKind::PatchPool(table) => {
            if s.len() != table.level_shapes.len() || s.is_empty() {
                return Err(format!("expected {} level maps, got {}", table.level_shapes.len(), s.len()));
            }
            let c = s[0][0];
            for (x, &(h, w)) in s.iter().zip(&table.level_shapes) {
                expect_rank(x, 3, "pooled map")?;
                if x[0] != c || x[1] != h || x[2] != w {
                    return Err(format!("map {x:?} does not match the table's ({h}, {w}) with {c} channels"));
                }
            }
            for p in &table.patches {
                let cells = table.level_shapes.get(p.level).map(|(h, w)| h * w);
                let ok = p.weights.len() == table.regions
                    && cells.is_some_and(|n| p.weights.iter().flatten().all(|&(i, _)| (i as usize) < n));
                if !ok {
                    return Err("pool table entry out of range".into());
                }
            }
            Ok(vec![table.regions * c, table.patches.len(), 1])
        }
    }
}

/// Node values from one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    log_clamps: usize,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self, graph: &ComputeGraph, name: &str) -> Result<&Tensor, Error> {
        Ok(self.value(graph.output(name)?))
    }

    /// How many log arguments fell below [`LOG_FLOOR`] and were clamped.
    pub fn log_clamps(&self) -> usize {
        self.log_clamps
    }
}

/// Evaluates every node. Inputs are matched by name; parameters by
/// declaration order (names are checked).
pub fn forward(graph: &ComputeGraph, inputs: &[(&str, &Tensor)], params: &Params) -> Result<Evaluation, Error> {
    if params.len() != graph.params.len() {
        return Err(Error::invalid(format!(
            "graph declares {} parameters, {} supplied",
            graph.params.len(),
            params.len()
        )));
    }
    let mut param_of = vec![usize::MAX; graph.nodes.len()];
    for (i, decl) in graph.params.iter().enumerate() {
        if params.names[i] != decl.name {
            return Err(Error::UnknownName(params.names[i].clone()));
        }
        if params.values[i].shape() != decl.shape.as_slice() {
            return Err(Error::shape(
                decl.name.clone(),
                format!("parameter has shape {:?}, declared {:?}", params.values[i].shape(), decl.shape),
            ));
        }
        param_of[decl.node.0] = i;
    }
    for (name, _) in inputs {
        if !graph.inputs.iter().any(|(n, _)| n == name) {
            return Err(Error::UnknownName(name.to_string()));
        }
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    let mut log_clamps = 0;
    for (idx, node) in graph.nodes.iter().enumerate() {
        let v = match &node.op {
            OpKind::Input => {
                let t = inputs
                    .iter()
                    .find(|(n, _)| *n == node.label)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| Error::MissingInput(node.label.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::shape(
                        node.label.clone(),
                        format!("input has shape {:?}, graph expects {:?}", t.shape(), node.shape),
                    ));
                }
                t.clone()
            }
            OpKind::Param => params.values[param_of[idx]].clone(),
            op => {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                if let OpKind::Log = op {
                    log_clamps += ins[0].data().iter().filter(|&&x| !(x > LOG_FLOOR)).count();
                }
                eval_op(op, &ins, &node.shape)
            }
        };
        values.push(v);
    }
    Ok(Evaluation { values, log_clamps })
}

fn map_data(x: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize, out: &[usize]) -> ConvGeom {
    ConvGeom {
        c: x[0],
        h: x[1],
        w: x[2],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        ho: out[1],
        wo: out[2],
    }
}

fn pointwise_geom(x: &[usize]) -> ConvGeom {
    ConvGeom {
        c: x[0],
        h: x[1],
        w: x[2],
        kh: 1,
        kw: 1,
        stride: 1,
        pad: 0,
        ho: x[1],
        wo: x[2],
    }
}

/// Broadcast index into `WeightedFuse` weights for map position `(c, y, x)`.
fn weight_index(ws: &[usize], i: usize, groups: usize, c_per: usize, c: usize, y: usize, x: usize) -> usize {
    let g = i * groups + c / c_per;
    let yy = if ws[1] == 1 { 0 } else { y };
    let xx = if ws[2] == 1 { 0 } else { x };
    (g * ws[1] + yy) * ws[2] + xx
}

fn eval_op(op: &OpKind, ins: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let data = match op {
        OpKind::Input | OpKind::Param => unreachable!(),
        OpKind::Conv2d { stride, pad } => {
            let g = conv_geom(ins[0].shape(), ins[1].shape(), *stride, *pad, out_shape);
            kernels::conv_forward(ins[0].data(), ins[1].data(), ins.get(2).map(|b| b.data()), out_shape[0], &g)
        }
        OpKind::Conv1x1 => {
            let g = pointwise_geom(ins[0].shape());
            kernels::conv_forward(ins[0].data(), ins[1].data(), ins.get(2).map(|b| b.data()), out_shape[0], &g)
        }
        OpKind::Relu => map_data(ins[0], |x| if x > 0.0 { x } else { 0.0 }),
        OpKind::Swish => map_data(ins[0], |x| x * kernels::sigmoid(x)),
        OpKind::Sigmoid => map_data(ins[0], kernels::sigmoid),
        OpKind::Softmax { axis } => kernels::softmax_forward(ins[0].data(), ins[0].shape(), *axis),
        OpKind::MaxPool { size } => {
            let s = ins[0].shape();
            kernels::max_pool(ins[0].data(), s[0], s[1], s[2], *size).0
        }
        OpKind::AvgPool { size } => {
            let s = ins[0].shape();
            kernels::avg_pool(ins[0].data(), s[0], s[1], s[2], *size)
        }
        OpKind::AvgDownsample => {
            let s = ins[0].shape();
            kernels::avg_pool(ins[0].data(), s[0], s[1], s[2], 2)
        }
        OpKind::NearestUpsample => {
            let s = ins[0].shape();
            kernels::upsample2(ins[0].data(), s[0], s[1], s[2])
        }
        OpKind::Add => {
            let mut out = ins[0].data().to_vec();
            for t in &ins[1..] {
                for (o, v) in out.iter_mut().zip(t.data()) {
                    *o += v;
                }
            }
            out
        }
        OpKind::ScalarScale(c) => map_data(ins[0], |x| c * x),
        OpKind::Mul => ins[0].data().iter().zip(ins[1].data()).map(|(a, b)| a * b).collect(),
        OpKind::ReduceMean => vec![ins[0].sum() / ins[0].len() as f64],
        OpKind::Hinge => map_data(ins[0], |x| if x < 1.0 { 1.0 - x } else { 0.0 }),
        OpKind::Log => map_data(ins[0], |x| libm::log(if x > LOG_FLOOR { x } else { LOG_FLOOR })),
        OpKind::Affine => {
            let c = ins[0].shape()[0];
            let per = ins[0].len() / c.max(1);
            let (g, b) = (ins[1].data(), ins[2].data());
            let mut out = ins[0].data().to_vec();
            for (ch, chunk) in out.chunks_mut(per.max(1)).enumerate().take(c) {
                for v in chunk {
                    *v = g[ch] * *v + b[ch];
                }
            }
            out
        }
        OpKind::Concat => ins.iter().flat_map(|t| t.data().iter().copied()).collect(),
        OpKind::Reshape(_) => ins[0].data().to_vec(),
        OpKind::InstantFuse { theta } => {
            let w: Vec<f64> = ins[0].data().iter().map(|&r| if r > 0.0 { r } else { 0.0 }).collect();
            let denom = theta + w.iter().sum::<f64>();
            weighted_sum(&ins[1..], &w.iter().map(|v| v / denom).collect::<Vec<_>>())
        }
        OpKind::SoftmaxFuse | OpKind::SigmoidFuse => {
            let a = gate_weights(op, ins[0], ins.len() - 1);
            gated_sum(&ins[1..], &a)
        }
        OpKind::WeightedFuse { groups } => {
            let (ws, wd) = (ins[0].shape(), ins[0].data());
            let s = ins[1].shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let c_per = c / groups;
            let mut out = vec![0.0; c * h * w];
            for (i, x) in ins[1..].iter().enumerate() {
                let xd = x.data();
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let at = (ch * h + y) * w + xx;
                            out[at] += wd[weight_index(ws, i, *groups, c_per, ch, y, xx)] * xd[at];
                        }
                    }
                }
            }
            out
        }
        OpKind::PatchPool(table) => {
            let c = ins[0].shape()[0];
            let np = table.patches.len();
            let mut out = vec![0.0; table.regions * c * np];
            for (p, patch) in table.patches.iter().enumerate() {
                let x = ins[patch.level];
                let (h, w) = table.level_shapes[patch.level];
                let plane = h * w;
                for (r, cells) in patch.weights.iter().enumerate() {
                    for ch in 0..c {
                        let src = &x.data()[ch * plane..(ch + 1) * plane];
                        let acc: f64 = cells.iter().map(|&(i, wt)| wt * src[i as usize]).sum();
                        out[(r * c + ch) * np + p] = acc;
                    }
                }
            }
            out
        }
    };
    Tensor::new(out_shape, data).expect("shape inferred at build time")
}

/// Fusion gates `[n, m]` where `m` is 1 (one weight per input) or the map size.
fn gate_weights(op: &OpKind, logits: &Tensor, n: usize) -> Vec<f64> {
    let m = logits.len() / n;
    match op {
        OpKind::SoftmaxFuse => kernels::softmax_forward(logits.data(), &[n, m], 0),
        _ => logits.data().iter().map(|&h| kernels::sigmoid(h)).collect(),
    }
}

fn gated_sum(maps: &[&Tensor], a: &[f64]) -> Vec<f64> {
    let m = a.len() / maps.len();
    if m == 1 {
        return weighted_sum(maps, a);
    }
    let mut out = vec![0.0; maps[0].len()];
    for (k, x) in maps.iter().enumerate() {
        for ((o, v), w) in out.iter_mut().zip(x.data()).zip(&a[k * m..(k + 1) * m]) {
            *o += w * v;
        }
    }
    out
}

fn weighted_sum(maps: &[&Tensor], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; maps[0].len()];
    for (m, &wi) in maps.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(m.data()) {
            *o += wi * v;
        }
    }
    out
}

/// Runs one op on concrete tensors, outside any graph.
pub fn apply(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor, Error> {
    if matches!(op, OpKind::Input | OpKind::Param) {
        return Err(Error::invalid("inputs and parameters have no kernel"));
    }
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let shape = infer_shape(op, &shapes).map_err(|d| Error::shape(op.name(), d))?;
    Ok(eval_op(op, inputs, &shape))
}

/// Gradients of the seeded outputs with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn input(&self, graph: &ComputeGraph, name: &str) -> Result<Option<&Tensor>, Error> {
        Ok(self.node(graph.input(name)?))
    }

    pub fn param(&self, graph: &ComputeGraph, name: &str) -> Result<Option<&Tensor>, Error> {
        let decl = graph
            .params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))?;
        Ok(self.node(decl.node))
    }

    /// One gradient per declared parameter, zeros where nothing flowed.
    pub fn param_grads(&self, graph: &ComputeGraph) -> Vec<Tensor> {
        graph
            .params
            .iter()
            .map(|p| self.grads[p.node.0].clone().unwrap_or_else(|| Tensor::zeros(&p.shape)))
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], g: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, g).expect("gradient matches node shape")),
    }
}

/// Reverse-mode sweep. Each seed is `d(objective)/d(node)` for one node;
/// seeds and fan-out contributions accumulate additively.
pub fn backward(graph: &ComputeGraph, eval: &Evaluation, seeds: &[(NodeId, Tensor)]) -> Result<Gradients, Error> {
    let n = graph.nodes.len();
    if eval.values.len() != n {
        return Err(Error::invalid("evaluation does not belong to this graph"));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    let mut last = 0;
    for (id, seed) in seeds {
        let node = graph.nodes.get(id.0).ok_or_else(|| Error::UnknownName(format!("node {}", id.0)))?;
        if seed.shape() != node.shape.as_slice() {
            return Err(Error::shape(
                node.label.clone(),
                format!("seed has shape {:?}, node has {:?}", seed.shape(), node.shape),
            ));
        }
        accumulate(&mut grads[id.0], &node.shape, seed.data().to_vec());
        last = last.max(id.0 + 1);
    }
    // Only nodes that can reach a source matter for parameters or inputs.
    let needs = needs_grad(graph);
    for idx in (0..last).rev() {
        let node = &graph.nodes[idx];
        if node.inputs.is_empty() {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &eval.values[i.0]).collect();
        let want: Vec<bool> = node.inputs.iter().map(|i| needs[i.0]).collect();
        let out = &eval.values[idx];
        let contribs = adjoint(&node.op, &ins, out, g.data(), &want);
        for (k, c) in contribs.into_iter().enumerate() {
            if let Some(c) = c {
                let src = node.inputs[k];
                accumulate(&mut grads[src.0], &graph.nodes[src.0].shape, c);
            }
        }
        grads[idx] = Some(g);
    }
    Ok(Gradients { grads })
}

fn needs_grad(graph: &ComputeGraph) -> Vec<bool> {
    let mut needs = vec![false; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        needs[i] = match node.op {
            OpKind::Input | OpKind::Param => true,
            _ => node.inputs.iter().any(|j| needs[j.0]),
        };
    }
    needs
}

fn elementwise(x: &Tensor, g: &[f64], d: impl Fn(f64) -> f64) -> Vec<f64> {
    x.data().iter().zip(g).map(|(&v, &gv)| gv * d(v)).collect()
}

fn adjoint(op: &OpKind, ins: &[&Tensor], out: &Tensor, g: &[f64], want: &[bool]) -> Vec<Option<Vec<f64>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; ins.len()];
    match op {
        OpKind::Input | OpKind::Param => {}
        OpKind::Conv2d { .. } | OpKind::Conv1x1 => {
            let geom = match op {
                OpKind::Conv2d { stride, pad } => conv_geom(ins[0].shape(), ins[1].shape(), *stride, *pad, out.shape()),
                _ => pointwise_geom(ins[0].shape()),
            };
            let (dx, dw, db) = kernels::conv_backward(ins[0].data(), ins[1].data(), g, out.shape()[0], &geom, want[0]);
            res[0] = dx;
            res[1] = Some(dw);
            if ins.len() == 3 {
                res[2] = Some(db);
            }
        }
        OpKind::Relu => res[0] = Some(elementwise(ins[0], g, |x| if x > 0.0 { 1.0 } else { 0.0 })),
        OpKind::Swish => {
            res[0] = Some(elementwise(ins[0], g, |x| {
                let s = kernels::sigmoid(x);
                s + x * s * (1.0 - s)
            }))
        }
        OpKind::Sigmoid => res[0] = Some(out.data().iter().zip(g).map(|(s, gv)| gv * s * (1.0 - s)).collect()),
        OpKind::Softmax { axis } => res[0] = Some(kernels::softmax_backward(out.data(), g, out.shape(), *axis)),
        OpKind::MaxPool { size } => {
            let s = ins[0].shape();
            let (_, arg) = kernels::max_pool(ins[0].data(), s[0], s[1], s[2], *size);
            let mut dx = vec![0.0; ins[0].len()];
            for (o, &a) in arg.iter().enumerate() {
                dx[a] += g[o];
            }
            res[0] = Some(dx);
        }
        OpKind::AvgPool { size } => {
            let s = ins[0].shape();
            res[0] = Some(kernels::avg_pool_backward(g, s[0], s[1], s[2], *size));
        }
        OpKind::AvgDownsample => {
            let s = ins[0].shape();
            res[0] = Some(kernels::avg_pool_backward(g, s[0], s[1], s[2], 2));
        }
        OpKind::NearestUpsample => {
            let s = ins[0].shape();
            res[0] = Some(kernels::upsample2_backward(g, s[0], s[1], s[2]));
        }
        OpKind::Add => {
            for slot in res.iter_mut() {
                *slot = Some(g.to_vec());
            }
        }
        OpKind::ScalarScale(c) => res[0] = Some(g.iter().map(|v| c * v).collect()),
        OpKind::Mul => {
            res[0] = Some(ins[1].data().iter().zip(g).map(|(b, gv)| b * gv).collect());
            res[1] = Some(ins[0].data().iter().zip(g).map(|(a, gv)| a * gv).collect());
        }
        OpKind::ReduceMean => {
            let n = ins[0].len();
            res[0] = Some(vec![g[0] / n as f64; n]);
        }
        OpKind::Hinge => res[0] = Some(elementwise(ins[0], g, |x| if x < 1.0 { -1.0 } else { 0.0 })),
        OpKind::Log => res[0] = Some(elementwise(ins[0], g, |x| if x > LOG_FLOOR { 1.0 / x } else { 0.0 })),
        OpKind::Affine => {
            let c = ins[0].shape()[0];
            let per = ins[0].len() / c;
            let (x, gamma) = (ins[0].data(), ins[1].data());
            let mut dx = vec![0.0; x.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for ch in 0..c {
                for i in ch * per..(ch + 1) * per {
                    dx[i] = gamma[ch] * g[i];
                    dg[ch] += x[i] * g[i];
                    db[ch] += g[i];
                }
            }
            res[0] = Some(dx);
            res[1] = Some(dg);
            res[2] = Some(db);
        }
        OpKind::Concat => {
            let mut at = 0;
            for (k, t) in ins.iter().enumerate() {
                res[k] = Some(g[at..at + t.len()].to_vec());
                at += t.len();
            }
        }
        OpKind::Reshape(_) => res[0] = Some(g.to_vec()),
        OpKind::InstantFuse { theta } => {
            let raw = ins[0].data();
            let w: Vec<f64> = raw.iter().map(|&r| if r > 0.0 { r } else { 0.0 }).collect();
            let denom = theta + w.iter().sum::<f64>();
            let o = out.data();
            // d out / d w_j = (x_j - out) / denom
            let dw: Vec<f64> = ins[1..]
                .iter()
                .zip(raw)
                .map(|(x, &r)| {
                    if r > 0.0 {
                        x.data().iter().zip(o).zip(g).map(|((xv, ov), gv)| gv * (xv - ov)).sum::<f64>() / denom
                    } else {
                        0.0
                    }
                })
                .collect();
            res[0] = Some(dw);
            for (k, wk) in w.iter().enumerate() {
                res[k + 1] = Some(g.iter().map(|gv| gv * wk / denom).collect());
            }
        }
        OpKind::SoftmaxFuse | OpKind::SigmoidFuse => {
            let n = ins.len() - 1;
            let a = gate_weights(op, ins[0], n);
            let m = a.len() / n;
            let mut q = vec![0.0; a.len()];
            for (k, x) in ins[1..].iter().enumerate() {
                let (qk, ak) = (&mut q[k * m..(k + 1) * m], &a[k * m..(k + 1) * m]);
                if m == 1 {
                    qk[0] = x.data().iter().zip(g).map(|(xv, gv)| xv * gv).sum();
                    res[k + 1] = Some(g.iter().map(|gv| gv * ak[0]).collect());
                } else {
                    for ((qe, xv), gv) in qk.iter_mut().zip(x.data()).zip(g) {
                        *qe = xv * gv;
                    }
                    res[k + 1] = Some(g.iter().zip(ak).map(|(gv, av)| gv * av).collect());
                }
            }
            let dh = match op {
                OpKind::SoftmaxFuse => kernels::softmax_backward(&a, &q, &[n, m], 0),
                _ => q.iter().zip(&a).map(|(qv, av)| qv * av * (1.0 - av)).collect(),
            };
            res[0] = Some(dh);
        }
        OpKind::WeightedFuse { groups } => {
            let (ws, wd) = (ins[0].shape(), ins[0].data());
            let s = ins[1].shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let c_per = c / groups;
            let mut dw = vec![0.0; wd.len()];
            for (i, x) in ins[1..].iter().enumerate() {
                let xd = x.data();
                let mut dx = vec![0.0; xd.len()];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let at = (ch * h + y) * w + xx;
                            let wi = weight_index(ws, i, *groups, c_per, ch, y, xx);
                            dx[at] = wd[wi] * g[at];
                            dw[wi] += xd[at] * g[at];
                        }
                    }
                }
                res[i + 1] = Some(dx);
            }
            res[0] = Some(dw);
        }
        OpKind::PatchPool(table) => {
            let c = ins[0].shape()[0];
            let np = table.patches.len();
            let mut dx: Vec<Vec<f64>> = ins.iter().map(|t| vec![0.0; t.len()]).collect();
            for (p, patch) in table.patches.iter().enumerate() {
                let (h, w) = table.level_shapes[patch.level];
                let plane = h * w;
                let dst = &mut dx[patch.level];
                for (r, cells) in patch.weights.iter().enumerate() {
                    for ch in 0..c {
                        let gv = g[(r * c + ch) * np + p];
                        if gv == 0.0 {
                            continue;
                        }
                        let d = &mut dst[ch * plane..(ch + 1) * plane];
                        for &(i, wt) in cells {
                            d[i as usize] += wt * gv;
                        }
                    }
                }
            }
            for (k, d) in dx.into_iter().enumerate() {
                res[k] = Some(d);
            }
        }
    }
    for (slot, &w) in res.iter_mut().zip(want) {
        if !w {
            *slot = None;
        }
    }
    res
}

/// Branch decisions of every kinked op (relu, hinge, max, clamps), used to
/// tell whether a finite-difference stencil straddles a kink.
pub fn branch_signature(graph: &ComputeGraph, eval: &Evaluation) -> Vec<u64> {
    fn pack(sig: &mut Vec<u64>, flags: impl Iterator<Item = bool>) {
        let mut word = 0u64;
        for (k, f) in flags.enumerate() {
            word |= (f as u64) << (k % 64);
            if k % 64 == 63 {
                sig.push(word);
                word = 0;
            }
        }
        sig.push(word);
    }
    let mut sig = Vec::new();
    for node in &graph.nodes {
        let x = |k: usize| eval.values[node.inputs[k].0].data();
        match &node.op {
            OpKind::Relu | OpKind::InstantFuse { .. } => pack(&mut sig, x(0).iter().map(|&v| v > 0.0)),
            OpKind::Hinge => pack(&mut sig, x(0).iter().map(|&v| v < 1.0)),
            OpKind::Log => pack(&mut sig, x(0).iter().map(|&v| v > LOG_FLOOR)),
            OpKind::MaxPool { size } => {
                let t = eval.value(node.inputs[0]);
                let s = t.shape();
                let (_, arg) = kernels::max_pool(t.data(), s[0], s[1], s[2], *size);
                sig.extend(arg.iter().map(|&a| a as u64));
            }
            _ => {}
        }
    }
    sig
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run1(op: OpKind, x: Tensor) -> Tensor {
        let mut b = GraphBuilder::new();
        let i = b.input("x", x.shape()).unwrap();
        let y = b.op(op, &[i]).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let p = g.init_params(0);
        forward(&g, &[("x", &x)], &p).unwrap().output(&g, "y").unwrap().clone()
    }

    #[test]
    fn relu_and_sigmoid_examples() {
        let y = run1(OpKind::Relu, Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let s = run1(OpKind::Sigmoid, Tensor::from_vec(vec![0.0]));
        assert_eq!(s.data(), &[0.5]);
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, 4, 4]).unwrap();
        let w = b.param("w", &[1, 1, 1, 1], Init::Const(1.0)).unwrap();
        let y = b.conv2d(x, w, None, 1, 0).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xt = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let e = forward(&g, &[("x", &xt)], &g.init_params(0)).unwrap();
        assert_eq!(e.output(&g, "y").unwrap(), &xt);
    }

    #[test]
    fn scale_and_sigmoid_derivatives() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]).unwrap();
        let y = b.scale(x, 3.0).unwrap();
        let s = b.unary(OpKind::Sigmoid, x).unwrap();
        let g = b.finish();
        let xt = Tensor::from_vec(vec![0.0, 1.0, -2.0]);
        let e = forward(&g, &[("x", &xt)], &g.init_params(0)).unwrap();
        let gr = backward(&g, &e, &[(y, Tensor::full(&[3], 1.0))]).unwrap();
        assert_eq!(gr.node(x).unwrap().data(), &[3.0, 3.0, 3.0]);
        let gr = backward(&g, &e, &[(s, Tensor::full(&[3], 1.0))]).unwrap();
        assert_eq!(gr.node(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * x + x  =>  dy/dx = 2x + 1
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let sq = b.mul(x, x).unwrap();
        let y = b.add(&[sq, x]).unwrap();
        let g = b.finish();
        let xt = Tensor::from_vec(vec![1.5, -2.0]);
        let e = forward(&g, &[("x", &xt)], &g.init_params(0)).unwrap();
        let gr = backward(&g, &e, &[(y, Tensor::full(&[2], 1.0))]).unwrap();
        assert_eq!(gr.node(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut b = GraphBuilder::new();
        b.set_scope("head.");
        let x = b.input("x", &[2, 3]).unwrap();
        let y = b.input("y", &[3, 2]).unwrap();
        match b.mul(x, y) {
            Err(Error::Shape { node, .. }) => assert!(node.starts_with("head.elementwise_mul")),
            other => panic!("{other:?}"),
        }
        let g = b.finish();
        let bad = Tensor::zeros(&[3, 3]);
        let ok = Tensor::zeros(&[3, 2]);
        match forward(&g, &[("x", &bad), ("y", &ok)], &g.init_params(0)) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let g = b.finish();
        let xt = Tensor::zeros(&[2]);
        let e = forward(&g, &[("x", &xt)], &g.init_params(0)).unwrap();
        assert!(backward(&g, &e, &[(x, Tensor::zeros(&[3]))]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3, 2], (0..12).map(|v| (v as f64 * 1.7).sin() * 5.0).collect()).unwrap();
        for axis in 0..3 {
            let y = run1(OpKind::Softmax { axis }, x.clone());
            let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|j| y.data()[(o * len + j) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_clamps_are_counted() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]).unwrap();
        let y = b.unary(OpKind::Log, x).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xt = Tensor::from_vec(vec![0.0, 1.0, 1e-20]);
        let e = forward(&g, &[("x", &xt)], &g.init_params(0)).unwrap();
        assert_eq!(e.log_clamps(), 2);
        assert!(e.output(&g, "y").unwrap().is_finite());
    }
}
