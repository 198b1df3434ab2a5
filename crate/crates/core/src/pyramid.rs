//! Compound scaling, the tiny backbone, the top-down baseline pyramid, the
//! cross-wise pyramid and the patch heads that turn pyramid maps into
//! selector scores and detector probabilities.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fusion::{conv_block, fuse_node, rescale_node, FusionSpec};
use crate::geometry::{multi_scale_grid, BBox, GridSpec};
use crate::graph::{forward, ComputeGraph, GraphBuilder, Init, NodeId, OpKind, Params, PoolTable, PooledPatch};
use crate::tensor::Tensor;
use crate::Error;

pub const LEVELS: [u32; 5] = [3, 4, 5, 6, 7];

/// `(input size, width, depth)` for compound coefficients 0 through 6.
pub const SCALE_TABLE: [(usize, usize, usize); 7] = [
    (512, 32, 3),
    (640, 64, 4),
    (768, 88, 5),
    (896, 112, 6),
    (1024, 160, 7),
    (1280, 224, 7),
    (1280, 288, 8),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub psi: u8,
    pub input_size: usize,
    pub width: usize,
    pub depth: usize,
}

pub fn scale_config(psi: u8) -> Result<PyramidConfig, Error> {
    let &(input_size, width, depth) = SCALE_TABLE.get(psi as usize).ok_or(Error::OutOfRange {
        what: "compound coefficient",
        value: psi as i64,
    })?;
    Ok(PyramidConfig {
        psi,
        input_size,
        width,
        depth,
    })
}

impl PyramidConfig {
    /// Same width and depth at a smaller input side.
    pub fn with_input_size(self, input_size: usize) -> Result<Self, Error> {
        if input_size == 0 || input_size % 64 != 0 {
            return Err(Error::invalid(format!("input size {input_size} is not a multiple of 64")));
        }
        Ok(Self { input_size, ..self })
    }
}

/// Which pyramid sits between the backbone and the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neck {
    /// Maps straight from the backbone.
    None,
    Baseline,
    CrossWise,
}

/// One fusion node as it appears in graph dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNodeInfo {
    pub name: String,
    pub level: u32,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGraph {
    /// Output maps for levels 3..7.
    pub outputs: [NodeId; 5],
    pub nodes: Vec<FusionNodeInfo>,
}

/// Backbone: strided conv blocks down to level 3 (each stride-2 block is
/// followed by a stride-1 block), then one stride-2 block per level up to 7.
/// Every level carries `width` channels.
pub fn tiny_backbone(b: &mut GraphBuilder, image: NodeId, width: usize, gain: f64) -> Result<[NodeId; 5], Error> {
    let s = b.shape(image).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("backbone", "expects a square [C, H, W] image"));
    }
    if s[1] % 128 != 0 {
        return Err(Error::invalid(format!(
            "backbone input side {} is not divisible by 128 (level 7 needs it)",
            s[1]
        )));
    }
    let mut x = image;
    for (i, c) in [8, 16, width].into_iter().enumerate() {
        b.set_scope(&format!("backbone.l{}s.", i + 1));
        x = conv_block(b, x, c, 2, gain)?;
        b.set_scope(&format!("backbone.l{}.", i + 1));
        x = conv_block(b, x, c, 1, gain)?;
    }
    let mut out = [x; 5];
    for l in 4..=7 {
        b.set_scope(&format!("backbone.l{l}."));
        x = conv_block(b, x, width, 2, gain)?;
        out[l - 3] = x;
    }
    b.set_scope("");
    Ok(out)
}

/// Single top-down pass: `P7 = conv(F7)`, `Pl = conv(Fl + up(P(l+1)))`.
pub fn build_fpn_baseline(b: &mut GraphBuilder, feats: [NodeId; 5], gain: f64) -> Result<PyramidGraph, Error> {
    let width = b.shape(feats[0])[0];
    let mut out = feats;
    let mut nodes = Vec::new();
    b.set_scope("fpn.p7.");
    out[4] = conv_block(b, feats[4], width, 1, gain)?;
    nodes.push(FusionNodeInfo {
        name: "fpn.p7".into(),
        level: 7,
        inputs: vec!["in7".into()],
    });
    for l in (3..=6u32).rev() {
        let i = (l - 3) as usize;
        b.set_scope(&format!("fpn.p{l}."));
        let up = rescale_node(b, out[i + 1], l + 1, l, gain)?;
        let sum = b.add(&[feats[i], up])?;
        out[i] = conv_block(b, sum, width, 1, gain)?;
        nodes.push(FusionNodeInfo {
            name: format!("fpn.p{l}"),
            level: l,
            inputs: vec![format!("in{l}"), format!("fpn.p{}", l + 1)],
        });
    }
    b.set_scope("");
    Ok(PyramidGraph { outputs: out, nodes })
}

/// The baseline followed by one bottom-up pass,
/// `Nl = conv(Pl + down(N(l-1)))`. Only used for size comparisons.
pub fn build_fpn_bottom_up(b: &mut GraphBuilder, feats: [NodeId; 5], gain: f64) -> Result<PyramidGraph, Error> {
    let width = b.shape(feats[0])[0];
    let mut pg = build_fpn_baseline(b, feats, gain)?;
    let mut prev = pg.outputs[0];
    for l in 4..=7u32 {
        let i = (l - 3) as usize;
        b.set_scope(&format!("pan.n{l}."));
        let down = rescale_node(b, prev, l - 1, l, gain)?;
        let sum = b.add(&[pg.outputs[i], down])?;
        prev = conv_block(b, sum, width, 1, gain)?;
        pg.outputs[i] = prev;
        pg.nodes.push(FusionNodeInfo {
            name: format!("pan.n{l}"),
            level: l,
            inputs: vec![format!("fpn.p{l}"), format!("pan.n{}", l - 1)],
        });
    }
    b.set_scope("");
    Ok(pg)
}

/// `depth` repeated cross-wise layers. Per layer: a top-down chain
/// `td6, td5, td4` fusing the level input with the upscaled coarser node,
/// then `out3 = fuse(in3, up(td4))`, `outl = fuse(inl, tdl, down(out(l-1)))`
/// for levels 4..6 and `out7 = fuse(in7, down(out6))`. Single-input nodes
/// (td7, td3) do not exist.
pub fn build_essfpn(
    b: &mut GraphBuilder,
    feats: [NodeId; 5],
    depth: usize,
    spec: &FusionSpec,
    gain: f64,
) -> Result<PyramidGraph, Error> {
    let mut f = feats;
    let mut nodes = Vec::new();
    let mut in_names: Vec<String> = LEVELS.iter().map(|l| format!("in{l}")).collect();
    for d in 0..depth {
        let mut td = f;
        let mut td_names = in_names.clone();
        for l in (4..=6u32).rev() {
            let i = (l - 3) as usize;
            let name = format!("ess{d}.td{l}");
            b.set_scope(&format!("{name}."));
            let up = rescale_node(b, td[i + 1], l + 1, l, gain)?;
            td[i] = fuse_node(b, &[f[i], up], spec, gain)?;
            nodes.push(FusionNodeInfo {
                name: name.clone(),
                level: l,
                inputs: vec![in_names[i].clone(), td_names[i + 1].clone()],
            });
            td_names[i] = name;
        }
        let mut out = f;
        let mut out_names = in_names.clone();
        for l in 3..=7u32 {
            let i = (l - 3) as usize;
            let name = format!("ess{d}.out{l}");
            b.set_scope(&format!("{name}."));
            let (ids, names) = match l {
                3 => {
                    let up = rescale_node(b, td[1], 4, 3, gain)?;
                    (vec![f[0], up], vec![in_names[0].clone(), td_names[1].clone()])
                }
                7 => {
                    let down = rescale_node(b, out[3], 6, 7, gain)?;
                    (vec![f[4], down], vec![in_names[4].clone(), out_names[3].clone()])
                }
                _ => {
                    let down = rescale_node(b, out[i - 1], l - 1, l, gain)?;
                    (
                        vec![f[i], td[i], down],
                        vec![in_names[i].clone(), td_names[i].clone(), out_names[i - 1].clone()],
                    )
                }
            };
            out[i] = fuse_node(b, &ids, spec, gain)?;
            nodes.push(FusionNodeInfo {
                name: name.clone(),
                level: l,
                inputs: names,
            });
            out_names[i] = name;
        }
        f = out;
        in_names = out_names;
    }
    b.set_scope("");
    Ok(PyramidGraph { outputs: f, nodes })
}

/// Pyramid level for a box of side `side` (network pixels).
pub fn patch_level(side: f64, input_size: usize) -> u32 {
    let l = libm::floor(3.0 + libm::log2(side / (input_size as f64 / 8.0)));
    l.clamp(3.0, 7.0) as u32
}

/// Area of overlap between `[x0, x1) x [y0, y1)` and each unit cell of a
/// `side x side` map, as sparse `(cell, area)` pairs.
fn coverage(x0: f64, y0: f64, x1: f64, y1: f64, side: usize) -> Vec<(u32, f64)> {
    let mut out = Vec::new();
    let lo = |v: f64| (libm::floor(v).max(0.0) as usize).min(side);
    let hi = |v: f64| (libm::ceil(v).max(0.0) as usize).min(side);
    for cy in lo(y0)..hi(y1) {
        let oy = y1.min(cy as f64 + 1.0) - y0.max(cy as f64);
        if oy <= 0.0 {
            continue;
        }
        for cx in lo(x0)..hi(x1) {
            let ox = x1.min(cx as f64 + 1.0) - x0.max(cx as f64);
            if ox > 0.0 {
                out.push(((cy * side + cx) as u32, ox * oy));
            }
        }
    }
    out
}

fn normalized(mut w: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    let s: f64 = w.iter().map(|p| p.1).sum();
    if s > 0.0 {
        for p in &mut w {
            p.1 /= s;
        }
    }
    w
}

/// Pooling weights for each patch: the average over the box on its level
/// and, when `context > 0`, the average over the surrounding ring obtained by
/// growing the box by `context * side / 2` on every edge (clipped to the map).
pub fn pool_table(boxes: &[BBox], image_side: usize, input_size: usize, context: f64) -> Result<PoolTable, Error> {
    if image_side == 0 || input_size % 128 != 0 {
        return Err(Error::invalid("pool table needs a positive image side and an input side divisible by 128"));
    }
    let scale = input_size as f64 / image_side as f64;
    let level_shapes = LEVELS.iter().map(|l| (input_size >> l, input_size >> l)).collect();
    let mut patches = Vec::with_capacity(boxes.len());
    for bx in boxes {
        if !bx.contained_in(image_side as f64, image_side as f64) {
            return Err(Error::InvalidBox(bx.to_array()));
        }
        let level = patch_level(bx.side() * scale, input_size);
        let side = input_size >> level;
        let cell = scale / (1u64 << level) as f64;
        let [x0, y0, x1, y1] = bx.to_array().map(|v| v * cell);
        let inner = coverage(x0, y0, x1, y1, side);
        let mut weights = vec![normalized(inner.clone())];
        if context > 0.0 {
            let g = context * (x1 - x0).max(y1 - y0) / 2.0;
            let mut outer = coverage(x0 - g, y0 - g, x1 + g, y1 + g, side);
            for (c, w) in &mut outer {
                if let Some((_, a)) = inner.iter().find(|(ic, _)| ic == c) {
                    *w -= a;
                }
            }
            outer.retain(|(_, w)| *w > 1e-12);
            weights.push(normalized(outer));
        }
        patches.push(PooledPatch {
            level: (level - 3) as usize,
            weights,
        });
    }
    Ok(PoolTable {
        level_shapes,
        regions: if context > 0.0 { 2 } else { 1 },
        patches,
    })
}

/// Everything that defines a patch detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub neck: Neck,
    pub fusion: FusionSpec,
    pub classes: usize,
    /// Side of the (square) source images; they are resampled to the
    /// pyramid input side before the backbone.
    pub image_side: usize,
    /// `(window, stride)` pairs of the patch grids, in image pixels.
    pub windows: Vec<(usize, usize)>,
    /// Context ring growth; 0 disables the ring.
    pub context: f64,
    /// Width of the shared hidden layer of the heads; 0 makes them linear.
    pub hidden: usize,
    /// Initialization gain for convolution weights.
    pub gain: f64,
}

impl ModelConfig {
    pub fn grid(&self) -> Result<Vec<BBox>, Error> {
        let specs = self
            .windows
            .iter()
            .map(|&(k, d)| GridSpec::square(self.image_side, k, d))
            .collect::<Result<Vec<_>, _>>()?;
        multi_scale_grid(&specs)
    }
}

/// A built detector: one graph from image to per-patch outputs.
///
/// Outputs: `scores [classes, patches]` (raw selector scores) and
/// `probs [classes, 2, patches]` (`[d_pos, d_neg]` per class and patch).
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: ComputeGraph,
    pub boxes: Vec<BBox>,
    pub pyramid: Option<PyramidGraph>,
    pub scores: NodeId,
    pub probs: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Raw selector scores, `[class][patch]`.
    pub scores: Vec<Vec<f64>>,
    /// Detector probability of the positive label, `[class][patch]`.
    pub positive: Vec<Vec<f64>>,
}

impl Prediction {
    /// Selector score squashed through a sigmoid.
    pub fn objectness(&self, class: usize, patch: usize) -> f64 {
        1.0 / (1.0 + libm::exp(-self.scores[class][patch]))
    }
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self, Error> {
        let boxes = config.grid()?;
        let input = config.pyramid.input_size;
        if input % config.image_side != 0 {
            return Err(Error::invalid(format!(
                "input side {input} is not a multiple of the image side {}",
                config.image_side
            )));
        }
        let table = Arc::new(pool_table(&boxes, config.image_side, input, config.context)?);
        let gain = config.gain;
        let mut b = GraphBuilder::new();
        let image = b.input("image", &[1, input, input])?;
        let feats = tiny_backbone(&mut b, image, config.pyramid.width, gain)?;
        let pyramid = match config.neck {
            Neck::None => None,
            Neck::Baseline => Some(build_fpn_baseline(&mut b, feats, gain)?),
            Neck::CrossWise => Some(build_essfpn(&mut b, feats, config.pyramid.depth, &config.fusion, gain)?),
        };
        let maps = pyramid.as_ref().map_or(feats, |p| p.outputs);
        let (nc, np) = (config.classes, boxes.len());
        b.set_scope("head.");
        let pooled = b.op(OpKind::PatchPool(table), &maps)?;
        let mut h = pooled;
        if config.hidden > 0 {
            let c = b.shape(h)[0];
            let w = b.param("hidden.w", &[config.hidden, c], Init::HeNormal { fan_in: c, gain })?;
            let bias = b.param("hidden.b", &[config.hidden], Init::Const(0.0))?;
            let z = b.conv1x1(h, w, Some(bias))?;
            h = b.unary(OpKind::Swish, z)?;
        }
        let c = b.shape(h)[0];
        let ws = b.param("sel.w", &[nc, c], Init::HeNormal { fan_in: c, gain })?;
        let bs = b.param("sel.b", &[nc], Init::Const(0.0))?;
        let s = b.conv1x1(h, ws, Some(bs))?;
        let scores = b.op(OpKind::Reshape(vec![nc, np]), &[s])?;
        let wd = b.param("det.w", &[2 * nc, c], Init::HeNormal { fan_in: c, gain })?;
        let bd = b.param("det.b", &[2 * nc], Init::Const(0.0))?;
        let d = b.conv1x1(h, wd, Some(bd))?;
        let d = b.op(OpKind::Reshape(vec![nc, 2, np]), &[d])?;
        let probs = b.op(OpKind::Softmax { axis: 1 }, &[d])?;
        b.set_scope("");
        b.output("scores", scores)?;
        b.output("probs", probs)?;
        Ok(Self {
            config,
            graph: b.finish(),
            boxes,
            pyramid,
            scores,
            probs,
        })
    }

    pub fn init_params(&self, seed: u64) -> Params {
        self.graph.init_params(seed)
    }

    /// Nearest-neighbour resampling of a `[1, S, S]` image (values in
    /// `[0, 1]`) to the network input, centred and scaled to unit-ish range.
    pub fn preprocess(&self, image: &Tensor) -> Result<Tensor, Error> {
        let s = self.config.image_side;
        if image.shape() != [1, s, s] {
            return Err(Error::shape("image", format!("expected [1, {s}, {s}], got {:?}", image.shape())));
        }
        let n = self.config.pyramid.input_size;
        let f = n / s;
        let src = image.data();
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                out[y * n + x] = (src[(y / f) * s + x / f] - 0.5) * 4.0;
            }
        }
        Tensor::new(&[1, n, n], out)
    }

    pub fn predict(&self, params: &Params, image: &Tensor) -> Result<Prediction, Error> {
        let x = self.preprocess(image)?;
        let e = forward(&self.graph, &[("image", &x)], params)?;
        let (nc, np) = (self.config.classes, self.boxes.len());
        let s = e.value(self.scores).data();
        let p = e.value(self.probs).data();
        Ok(Prediction {
            scores: (0..nc).map(|c| s[c * np..(c + 1) * np].to_vec()).collect(),
            positive: (0..nc).map(|c| p[c * 2 * np..c * 2 * np + np].to_vec()).collect(),
        })
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary::of(&self.graph, self.pyramid.as_ref())
    }
}

/// Node/edge/parameter counts for dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub parameters: usize,
    pub parameter_tensors: usize,
    pub fusion_nodes: Vec<FusionNodeInfo>,
}

impl GraphSummary {
    pub fn of(graph: &ComputeGraph, pyramid: Option<&PyramidGraph>) -> Self {
        Self {
            nodes: graph.nodes().len(),
            edges: graph.edge_count(),
            parameters: graph.param_count(),
            parameter_tensors: graph.params().len(),
            fusion_nodes: pyramid.map_or_else(Vec::new, |p| p.nodes.clone()),
        }
    }
}

/// Builds just backbone plus neck over a `[width, ...]` pyramid input of the
/// given side, for parameter counting and shape checks.
pub fn pyramid_only(config: &PyramidConfig, neck: Neck, spec: &FusionSpec, gain: f64) -> Result<(ComputeGraph, Option<PyramidGraph>), Error> {
    let mut b = GraphBuilder::new();
    let image = b.input("image", &[1, config.input_size, config.input_size])?;
    let feats = tiny_backbone(&mut b, image, config.width, gain)?;
    let pg = match neck {
        Neck::None => None,
        Neck::Baseline => Some(build_fpn_baseline(&mut b, feats, gain)?),
        Neck::CrossWise => Some(build_essfpn(&mut b, feats, config.depth, spec, gain)?),
    };
    let outs = pg.as_ref().map_or(feats, |p| p.outputs);
    for (l, id) in LEVELS.iter().zip(outs) {
        b.output(&format!("p{l}"), id)?;
    }
    Ok((b.finish(), pg))
}

/// Parameters of the neck alone: pyramid graph minus the bare backbone.
pub fn neck_parameters(config: &PyramidConfig, neck: Neck, spec: &FusionSpec) -> Result<usize, Error> {
    let small = config.with_input_size(128)?;
    let (g, _) = pyramid_only(&small, neck, spec, 1.0)?;
    let (bare, _) = pyramid_only(&small, Neck::None, spec, 1.0)?;
    Ok(g.param_count() - bare.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionRule;

    #[test]
    fn table_rows() {
        assert_eq!(
            scale_config(0).unwrap(),
            PyramidConfig {
                psi: 0,
                input_size: 512,
                width: 32,
                depth: 3
            }
        );
        let c = scale_config(4).unwrap();
        assert_eq!((c.input_size, c.width, c.depth), (1024, 160, 7));
        let c = scale_config(6).unwrap();
        assert_eq!((c.input_size, c.width, c.depth), (1280, 288, 8));
        assert!(scale_config(7).is_err());
        for psi in 0..7 {
            assert_eq!(scale_config(psi).unwrap().input_size % 64, 0);
        }
    }

    #[test]
    fn backbone_sides() {
        let cfg = scale_config(0).unwrap().with_input_size(256).unwrap();
        let (g, _) = pyramid_only(&cfg, Neck::None, &FusionSpec::new(FusionRule::Instant), 1.0).unwrap();
        for (i, l) in LEVELS.iter().enumerate() {
            let id = g.output(&format!("p{l}")).unwrap();
            assert_eq!(g.node(id).shape, [32, 256 >> l, 256 >> l], "level {}", 3 + i);
        }
        let bad = scale_config(0).unwrap().with_input_size(192).unwrap();
        assert!(pyramid_only(&bad, Neck::None, &FusionSpec::new(FusionRule::Instant), 1.0).is_err());
    }

    #[test]
    fn cross_wise_topology() {
        let cfg = scale_config(0).unwrap().with_input_size(128).unwrap();
        let (g, pg) = pyramid_only(&cfg, Neck::CrossWise, &FusionSpec::new(FusionRule::Instant), 1.0).unwrap();
        let pg = pg.unwrap();
        assert_eq!(pg.nodes.len(), 3 * 8);
        assert!(pg.nodes.iter().all(|n| (2..=3).contains(&n.inputs.len())));
        for (l, id) in LEVELS.iter().zip(pg.outputs) {
            assert_eq!(g.node(id).shape, [32, 128 >> l, 128 >> l]);
        }
    }

    #[test]
    fn parameter_counts() {
        let spec = FusionSpec::new(FusionRule::Instant);
        let p0 = neck_parameters(&scale_config(0).unwrap(), Neck::CrossWise, &spec).unwrap();
        let p1 = neck_parameters(&scale_config(1).unwrap(), Neck::CrossWise, &spec).unwrap();
        assert!(p1 > p0);
        // One cross-wise layer against one top-down plus one bottom-up pass.
        let one = PyramidConfig {
            depth: 1,
            ..scale_config(0).unwrap()
        };
        let ess = neck_parameters(&one, Neck::CrossWise, &spec).unwrap();
        let small = one.with_input_size(128).unwrap();
        let mut b = GraphBuilder::new();
        let image = b.input("image", &[1, 128, 128]).unwrap();
        let feats = tiny_backbone(&mut b, image, 32, 1.0).unwrap();
        build_fpn_bottom_up(&mut b, feats, 1.0).unwrap();
        let (bare, _) = pyramid_only(&small, Neck::None, &spec, 1.0).unwrap();
        let pan = b.finish().param_count() - bare.param_count();
        assert!(ess < pan, "{ess} vs {pan}");
    }

    #[test]
    fn baseline_is_linear_without_bias() {
        // Zero maps in give zero maps out: convs carry no bias and swish(0)=0.
        let mut b = GraphBuilder::new();
        let xs: Vec<NodeId> = LEVELS
            .iter()
            .map(|l| b.input(&format!("in{l}"), &[4, 128 >> l, 128 >> l]).unwrap())
            .collect();
        let pg = build_fpn_baseline(&mut b, xs.clone().try_into().unwrap(), 1.0).unwrap();
        assert_eq!(pg.outputs.len(), 5);
        for (l, id) in LEVELS.iter().zip(pg.outputs) {
            b.output(&format!("p{l}"), id).unwrap();
        }
        let g = b.finish();
        let zeros: Vec<(String, Tensor)> = LEVELS
            .iter()
            .map(|l| (format!("in{l}"), Tensor::zeros(&[4, 128 >> l, 128 >> l])))
            .collect();
        let inputs: Vec<(&str, &Tensor)> = zeros.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let p = g.init_params(3);
        // The 1x1 convs after upscaling carry a bias, initialized to zero.
        let e = forward(&g, &inputs, &p).unwrap();
        for (l, id) in LEVELS.iter().zip(pg.outputs) {
            let v = e.value(id);
            assert_eq!(v.shape(), [4, 128 >> l, 128 >> l]);
            assert!(v.data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn level_assignment() {
        assert_eq!(patch_level(16.0, 128), 3);
        assert_eq!(patch_level(31.9, 128), 3);
        assert_eq!(patch_level(32.0, 128), 4);
        assert_eq!(patch_level(1024.0, 128), 7);
        assert_eq!(patch_level(2.0, 128), 3);
    }

    #[test]
    fn pooling_weights_sum_to_one() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), BBox::new(20.0, 30.0, 40.0, 50.0).unwrap()];
        let t = pool_table(&boxes, 64, 128, 1.0).unwrap();
        assert_eq!(t.regions, 2);
        for p in &t.patches {
            for r in &p.weights {
                let s: f64 = r.iter().map(|w| w.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // 10 px image box -> 20 px input -> level 3 (cells of 8 px).
        assert_eq!(t.patches[0].level, 0);
        assert_eq!(t.patches[1].level, 1);
    }

    #[test]
    fn predict_shapes_and_probabilities() {
        let cfg = ModelConfig {
            pyramid: scale_config(0).unwrap().with_input_size(128).unwrap(),
            neck: Neck::CrossWise,
            fusion: FusionSpec::new(FusionRule::Instant),
            classes: 2,
            image_side: 64,
            windows: vec![(20, 11)],
            context: 1.0,
            hidden: 8,
            gain: 1.0,
        };
        let m = Model::build(cfg).unwrap();
        assert_eq!(m.boxes.len(), 25);
        let p = m.init_params(1);
        let img = Tensor::full(&[1, 64, 64], 0.3);
        let pr = m.predict(&p, &img).unwrap();
        assert_eq!(pr.scores.len(), 2);
        assert_eq!(pr.scores[0].len(), 25);
        let e = forward(&m.graph, &[("image", &m.preprocess(&img).unwrap())], &p).unwrap();
        let probs = e.value(m.probs).data();
        for c in 0..2 {
            for j in 0..25 {
                let s = probs[c * 50 + j] + probs[c * 50 + 25 + j];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(pr, m.predict(&p, &img).unwrap());
    }
}
