//! The full finite-difference suite: every op kind, every fusion rule, a
//! top-down/output node chain, the training objective and the whole
//! detector end to end.

use std::sync::Arc;

use mpfp_core::fusion::{fuse_node, rescale_node, FusionRule, FusionSpec};
use mpfp_core::geometry::BBox;
use mpfp_core::gradcheck::{gradcheck, relative_error, GradcheckOptions, GradcheckReport};
use mpfp_core::graph::{backward, branch_signature, forward, GraphBuilder, NodeId, OpKind};
use mpfp_core::mpl::{class_targets, LossGraph, OverlapTable};
use mpfp_core::pyramid::{pool_table, scale_config, Model, ModelConfig, Neck};
use mpfp_core::{Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::train::Objective;
use crate::Result;

pub const TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_reports(name: impl Into<String>, reports: &[GradcheckReport], tolerance: f64) -> Self {
        let max = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
        let checked = reports.iter().map(|r| r.checked()).sum();
        let skipped = reports.iter().flat_map(|r| &r.tensors).map(|t| t.skipped).sum();
        Self {
            name: name.into(),
            max_rel_error: max,
            tolerance,
            checked,
            skipped,
            // Nothing checked means nothing verified.
            passed: max < tolerance && checked > 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Random instances per op kind.
    pub trials: usize,
    pub seed: u64,
    /// Coordinates sampled per parameter tensor in the end-to-end check.
    pub end_to_end_samples: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            trials: 50,
            seed: 0,
            end_to_end_samples: 3,
        }
    }
}

/// A graph input with its value.
struct In(String, Tensor);

/// `mean(op(inputs) * r)` with a fixed random `r`, so every output element
/// carries a distinct weight in the scalar objective.
fn check_op(op: OpKind, inputs: Vec<In>, rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut b = GraphBuilder::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|In(n, t)| b.input(n, t.shape()))
        .collect::<Result<_, _>>()?;
    let y = b.op(op, &ids)?;
    let shape = b.shape(y).to_vec();
    let r = b.input("r", &shape)?;
    let z = b.mul(y, r)?;
    let m = b.mean(z)?;
    b.output("loss", m)?;
    let g = b.finish();
    let rt = Tensor::normal(&shape, 1.0, rng);
    let mut pairs: Vec<(&str, &Tensor)> = inputs.iter().map(|In(n, t)| (n.as_str(), t)).collect();
    pairs.push(("r", &rt));
    Ok(gradcheck(&g, &pairs, &g.init_params(0), "loss", opts)?)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

fn named(name: &str, t: Tensor) -> In {
    In(name.to_string(), t)
}

/// One random instance of every op kind, labelled by kind.
fn op_instances(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpKind, Vec<In>)> {
    let c = rng.gen_range(1..=3);
    let o = rng.gen_range(1..=3);
    let s = 2 * rng.gen_range(2..=3);
    let x = |rng: &mut ChaCha8Rng| normal(&[c, s, s], rng);
    let mut v = vec![
        (
            "conv2d",
            OpKind::Conv2d { stride: 1, pad: 1 },
            vec![named("x", x(rng)), named("w", normal(&[o, c, 3, 3], rng)), named("b", normal(&[o], rng))],
        ),
        (
            "conv2d",
            OpKind::Conv2d { stride: 2, pad: 1 },
            vec![named("x", x(rng)), named("w", normal(&[o, c, 3, 3], rng))],
        ),
        (
            "conv1x1",
            OpKind::Conv1x1,
            vec![named("x", x(rng)), named("w", normal(&[o, c], rng)), named("b", normal(&[o], rng))],
        ),
        ("relu", OpKind::Relu, vec![named("x", x(rng))]),
        ("swish", OpKind::Swish, vec![named("x", x(rng))]),
        ("sigmoid", OpKind::Sigmoid, vec![named("x", x(rng))]),
        ("softmax", OpKind::Softmax { axis: rng.gen_range(0..3) }, vec![named("x", x(rng))]),
        ("max_pool", OpKind::MaxPool { size: 2 }, vec![named("x", x(rng))]),
        ("avg_pool", OpKind::AvgPool { size: 2 }, vec![named("x", x(rng))]),
        ("nearest_upsample", OpKind::NearestUpsample, vec![named("x", x(rng))]),
        ("avg_downsample", OpKind::AvgDownsample, vec![named("x", x(rng))]),
        (
            "add",
            OpKind::Add,
            vec![named("a", x(rng)), named("b", x(rng)), named("c", x(rng))],
        ),
        ("scalar_scale", OpKind::ScalarScale(rng.gen_range(-3.0..3.0)), vec![named("x", x(rng))]),
        ("elementwise_mul", OpKind::Mul, vec![named("a", x(rng)), named("b", x(rng))]),
        ("reduce_mean", OpKind::ReduceMean, vec![named("x", x(rng))]),
        ("hinge", OpKind::Hinge, vec![named("x", Tensor::uniform(&[c, s, s], -1.0, 3.0, rng))]),
        ("log", OpKind::Log, vec![named("x", Tensor::uniform(&[c, s, s], 0.05, 3.0, rng))]),
        (
            "affine",
            OpKind::Affine,
            vec![named("x", x(rng)), named("g", normal(&[c], rng)), named("b", normal(&[c], rng))],
        ),
        ("concat", OpKind::Concat, vec![named("a", x(rng)), named("b", normal(&[o, s, s], rng))]),
        ("reshape", OpKind::Reshape(vec![c * s, s]), vec![named("x", x(rng))]),
    ];
    let n = rng.gen_range(2..=3);
    let maps = |rng: &mut ChaCha8Rng| (0..n).map(|i| named(&format!("m{i}"), normal(&[c, s, s], rng))).collect::<Vec<_>>();
    let with = |w: In, rng: &mut ChaCha8Rng| {
        let mut all = vec![w];
        all.extend(maps(rng));
        all
    };
    let raw = Tensor::uniform(&[n], -0.5, 1.5, rng);
    v.push(("instant_fuse", OpKind::InstantFuse { theta: 1e-3 }, with(named("w", raw), rng)));
    let scalar = normal(&[n], rng);
    v.push(("softmax_fuse", OpKind::SoftmaxFuse, with(named("h", scalar), rng)));
    let pos = normal(&[n, c, s, s], rng);
    v.push(("softmax_fuse", OpKind::SoftmaxFuse, with(named("h", pos), rng)));
    let scalar = normal(&[n], rng);
    v.push(("sigmoid_fuse", OpKind::SigmoidFuse, with(named("h", scalar), rng)));
    let pos = normal(&[n, c, s, s], rng);
    v.push(("sigmoid_fuse", OpKind::SigmoidFuse, with(named("h", pos), rng)));
    let divisors: Vec<usize> = (1..=c).filter(|g| c % g == 0).collect();
    let groups = divisors[rng.gen_range(0..divisors.len())];
    let inv = Tensor::uniform(&[n * groups, 1, 1], 0.0, 1.0, rng);
    v.push(("weighted_fuse", OpKind::WeightedFuse { groups }, with(named("w", inv), rng)));
    let adp = Tensor::uniform(&[n * groups, s, s], 0.0, 1.0, rng);
    v.push(("weighted_fuse", OpKind::WeightedFuse { groups }, with(named("w", adp), rng)));
    v.push(patch_pool_instance(c, rng));
    v
}

fn patch_pool_instance(c: usize, rng: &mut ChaCha8Rng) -> (&'static str, OpKind, Vec<In>) {
    let boxes: Vec<BBox> = (0..4)
        .map(|_| {
            let side = rng.gen_range(6.0..40.0);
            let x = rng.gen_range(0.0..64.0 - side);
            let y = rng.gen_range(0.0..64.0 - side);
            BBox::square(x, y, side).expect("positive side")
        })
        .collect();
    let table = pool_table(&boxes, 64, 128, 1.0).expect("boxes inside the image");
    let maps = table
        .level_shapes
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| named(&format!("p{}", i + 3), normal(&[c, h, w], rng)))
        .collect();
    ("patch_pool", OpKind::PatchPool(Arc::new(table)), maps)
}

/// Checks every op kind on `trials` random instances, one entry per kind.
pub fn op_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let gopts = GradcheckOptions::default();
    let mut by_kind: Vec<(&'static str, Vec<GradcheckReport>)> = Vec::new();
    for _ in 0..opts.trials {
        for (name, op, inputs) in op_instances(&mut rng) {
            let r = check_op(op, inputs, &mut rng, &gopts)?;
            match by_kind.iter_mut().find(|(n, _)| *n == name) {
                Some((_, v)) => v.push(r),
                None => by_kind.push((name, vec![r])),
            }
        }
    }
    Ok(by_kind
        .into_iter()
        .map(|(n, r)| SuiteEntry::from_reports(format!("op/{n}"), &r, TOLERANCE))
        .collect())
}

fn maps_graph(b: &mut GraphBuilder, levels: &[(u32, usize)], channels: usize) -> Result<Vec<NodeId>> {
    levels
        .iter()
        .map(|&(l, side)| Ok(b.input(&format!("f{l}"), &[channels, side, side])?))
        .collect()
}

fn finish_scalar(mut b: GraphBuilder, y: NodeId, rng: &mut ChaCha8Rng) -> Result<(mpfp_core::ComputeGraph, Tensor)> {
    let shape = b.shape(y).to_vec();
    let r = b.input("r", &shape)?;
    let z = b.mul(y, r)?;
    let m = b.mean(z)?;
    b.output("loss", m)?;
    Ok((b.finish(), Tensor::normal(&shape, 1.0, rng)))
}

fn run_graph_check(
    g: &mpfp_core::ComputeGraph,
    names: &[(String, Tensor)],
    r: &Tensor,
    params: &Params,
) -> Result<GradcheckReport> {
    let mut pairs: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), t)).collect();
    pairs.push(("r", r));
    Ok(gradcheck(g, &pairs, params, "loss", &GradcheckOptions::default())?)
}

/// Parameters drawn at random (positive fusion weights away from the relu
/// kink, unit-scale everything else) so no gradient is trivially zero.
fn random_params(g: &mpfp_core::ComputeGraph, rng: &mut ChaCha8Rng) -> Params {
    let mut p = g.init_params(rng.gen());
    for (decl, t) in g.params().iter().zip(p.values_mut()) {
        let fresh = if decl.name.ends_with("fuse.w") {
            Tensor::uniform(&decl.shape, 0.2, 1.5, rng)
        } else {
            Tensor::normal(&decl.shape, 0.5, rng)
        };
        *t = fresh;
    }
    p
}

/// Every fusion rule inside a three-input node on random maps.
pub fn fusion_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 1);
    let mut out = Vec::new();
    for rule in FusionRule::ALL {
        let mut reports = Vec::new();
        for _ in 0..opts.trials.clamp(1, 5) {
            let mut b = GraphBuilder::new();
            let xs = maps_graph(&mut b, &[(3, 4), (4, 4), (5, 4)], 3)?;
            let spec = FusionSpec { groups: 1, ..FusionSpec::new(rule) };
            let y = fuse_node(&mut b, &xs, &spec, 1.0)?;
            let (g, r) = finish_scalar(b, y, &mut rng)?;
            let inputs: Vec<(String, Tensor)> = [3, 4, 5].iter().map(|l| (format!("f{l}"), normal(&[3, 4, 4], &mut rng))).collect();
            let p = random_params(&g, &mut rng);
            reports.push(run_graph_check(&g, &inputs, &r, &p)?);
        }
        out.push(SuiteEntry::from_reports(format!("fusion/{rule}"), &reports, TOLERANCE));
    }
    Ok(out)
}

/// A top-down node at level 5 from levels 5 and 6, then the output node at
/// level 5 from the level input, that node and the level-4 output.
pub fn node_chain_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 2);
    let mut reports = Vec::new();
    for _ in 0..opts.trials.clamp(1, 5) {
        let mut b = GraphBuilder::new();
        let xs = maps_graph(&mut b, &[(4, 8), (5, 4), (6, 2)], 2)?;
        let spec = FusionSpec::new(FusionRule::Instant);
        b.set_scope("td5.");
        let up = rescale_node(&mut b, xs[2], 6, 5, 1.0)?;
        let td = fuse_node(&mut b, &[xs[1], up], &spec, 1.0)?;
        b.set_scope("out5.");
        let down = rescale_node(&mut b, xs[0], 4, 5, 1.0)?;
        let out = fuse_node(&mut b, &[xs[1], td, down], &spec, 1.0)?;
        b.set_scope("");
        let (g, r) = finish_scalar(b, out, &mut rng)?;
        let inputs = vec![
            ("f4".to_string(), normal(&[2, 8, 8], &mut rng)),
            ("f5".to_string(), normal(&[2, 4, 4], &mut rng)),
            ("f6".to_string(), normal(&[2, 2, 2], &mut rng)),
        ];
        let p = random_params(&g, &mut rng);
        reports.push(run_graph_check(&g, &inputs, &r, &p)?);
    }
    Ok(vec![SuiteEntry::from_reports("node-chain", &reports, TOLERANCE)])
}

/// The objective over random selector scores and detector probabilities,
/// differentiated through the loss graph and compared with central
/// differences of the objective recomputed from scratch (subsets, winner
/// and labels included). Coordinates whose perturbation changes a discrete
/// choice, a hinge branch or a clamp are skipped.
pub fn objective_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 3);
    let (nc, np) = (2, 6);
    let eps = GradcheckOptions::default().epsilon;
    let floor = GradcheckOptions::default().floor;
    let lg = LossGraph::build(nc, np)?;
    let mut entry = SuiteEntry {
        name: "total-loss".into(),
        max_rel_error: 0.0,
        tolerance: TOLERANCE,
        checked: 0,
        skipped: 0,
        passed: false,
    };
    let empty = Params::default();
    for _ in 0..opts.trials.max(1) {
        let boxes: Vec<BBox> = (0..np)
            .map(|_| {
                let s = rng.gen_range(4.0..12.0);
                BBox::square(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), s).expect("positive side")
            })
            .collect();
        let table = OverlapTable::new(&boxes);
        let labels: Vec<i8> = (0..nc).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
        let lambda = [0.0, 0.25, 0.5, 0.75, 1.0][rng.gen_range(0..5)];
        let sel = Tensor::normal(&[nc, np], 1.0, &mut rng);
        let logits = Tensor::normal(&[nc, 2, np], 1.0, &mut rng);
        let det = mpfp_core::graph::apply(&OpKind::Softmax { axis: 1 }, &[&logits])?;
        let eval = |sel: &Tensor, det: &Tensor| -> Result<(f64, Vec<Vec<u8>>, Vec<u64>)> {
            let targets = (0..nc)
                .map(|c| class_targets(&table, &sel.data()[c * np..(c + 1) * np], labels[c], lambda))
                .collect::<Result<Vec<_>, _>>()?;
            let masks = lg.masks(&targets)?;
            let mut inputs: Vec<(&str, &Tensor)> = vec![("sel", sel), ("det", det)];
            inputs.extend(masks.iter().map(|(n, t)| (n.as_str(), t)));
            let e = forward(&lg.graph, &inputs, &empty)?;
            let key: Vec<Vec<u8>> = masks.iter().map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
            Ok((e.value(lg.total).item()?, key, branch_signature(&lg.graph, &e)))
        };
        let (_, key0, sig0) = eval(&sel, &det)?;
        let targets = (0..nc)
            .map(|c| class_targets(&table, &sel.data()[c * np..(c + 1) * np], labels[c], lambda))
            .collect::<Result<Vec<_>, _>>()?;
        let masks = lg.masks(&targets)?;
        let mut inputs: Vec<(&str, &Tensor)> = vec![("sel", &sel), ("det", &det)];
        inputs.extend(masks.iter().map(|(n, t)| (n.as_str(), t)));
        let e = forward(&lg.graph, &inputs, &empty)?;
        let grads = backward(&lg.graph, &e, &[(lg.total, Tensor::scalar(1.0))])?;
        for (name, base) in [("sel", &sel), ("det", &det)] {
            let analytic = grads.input(&lg.graph, name)?.cloned();
            for j in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[j] += eps;
                let mut minus = base.clone();
                minus.data_mut()[j] -= eps;
                let (fp, kp, sp) = if name == "sel" { eval(&plus, &det)? } else { eval(&sel, &plus)? };
                let (fm, km, sm) = if name == "sel" { eval(&minus, &det)? } else { eval(&sel, &minus)? };
                if kp != key0 || km != key0 || sp != sig0 || sm != sig0 {
                    entry.skipped += 1;
                    continue;
                }
                let a = analytic.as_ref().map_or(0.0, |t| t.data()[j]);
                let n = (fp - fm) / (2.0 * eps);
                entry.checked += 1;
                entry.max_rel_error = entry.max_rel_error.max(relative_error(a, n, floor));
            }
        }
    }
    entry.passed = entry.checked > 0 && entry.max_rel_error < entry.tolerance;
    Ok(vec![entry])
}

/// The model configuration used by the end-to-end check: the smallest
/// compound setting with its full cross-wise depth, on 64-px images.
pub fn end_to_end_config() -> Result<ModelConfig> {
    Ok(ModelConfig {
        pyramid: scale_config(0)?.with_input_size(128)?,
        neck: Neck::CrossWise,
        fusion: FusionSpec::new(FusionRule::Instant),
        classes: 2,
        image_side: 64,
        windows: vec![(20, 11)],
        context: 1.0,
        hidden: 8,
        gain: 1.0,
    })
}

/// Image, labels and parameters for the end-to-end check.
fn end_to_end_case(model: &Model, rng: &mut ChaCha8Rng) -> (Tensor, Vec<i8>, Params) {
    let mut img = vec![0.2; 64 * 64];
    for (x0, y0, s) in [(6usize, 8usize, 14usize), (36, 30, 18)] {
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                img[y * 64 + x] = 0.8;
            }
        }
    }
    for v in &mut img {
        *v += rng.gen_range(-0.05..0.05);
    }
    let image = Tensor::new(&[1, 64, 64], img).expect("64x64 image");
    let p = model.init_params(rng.gen());
    (image, vec![1, -1], p)
}

/// Whole-detector check: gradients of the training objective with respect
/// to every parameter tensor (sampled coordinates) against central
/// differences of the recomputed objective.
pub fn end_to_end_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 4);
    let model = Model::build(end_to_end_config()?)?;
    let obj = Objective::new(model)?;
    let (image, labels, params) = end_to_end_case(&obj.model, &mut rng);
    let lambda = 0.5;
    let step = obj.bag_step(&params, &image, &labels, lambda)?;
    let x = obj.model.preprocess(&image)?;
    let probe = |p: &Params| -> Result<(f64, Vec<u64>)> {
        let e = forward(&obj.model.graph, &[("image", &x)], p)?;
        let sig = branch_signature(&obj.model.graph, &e);
        Ok((obj.value(p, &image, &labels, lambda)?, sig))
    };
    let (_, sig0) = probe(&params)?;
    let eps = GradcheckOptions::default().epsilon;
    let floor = GradcheckOptions::default().floor;
    let mut entry = SuiteEntry {
        name: "end-to-end".into(),
        max_rel_error: 0.0,
        tolerance: END_TO_END_TOLERANCE,
        checked: 0,
        skipped: 0,
        passed: false,
    };
    let mut p = params.clone();
    for i in 0..params.len() {
        let len = params.values()[i].len();
        let coords = rand::seq::index::sample(&mut rng, len, opts.end_to_end_samples.min(len)).into_vec();
        for j in coords {
            let orig = p.values()[i].data()[j];
            p.values_mut()[i].data_mut()[j] = orig + eps;
            let (fp, sp) = probe(&p)?;
            p.values_mut()[i].data_mut()[j] = orig - eps;
            let (fm, sm) = probe(&p)?;
            p.values_mut()[i].data_mut()[j] = orig;
            if sp != sig0 || sm != sig0 {
                entry.skipped += 1;
                continue;
            }
            let n = (fp - fm) / (2.0 * eps);
            let a = step.grads[i].data()[j];
            entry.checked += 1;
            entry.max_rel_error = entry.max_rel_error.max(relative_error(a, n, floor));
        }
    }
    entry.passed = entry.checked > 0 && entry.max_rel_error < entry.tolerance;
    Ok(vec![entry])
}

pub fn run_all(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut all = op_suite(opts)?;
    all.extend(fusion_suite(opts)?);
    all.extend(node_chain_suite(opts)?);
    all.extend(objective_suite(opts)?);
    all.extend(end_to_end_suite(opts)?);
    Ok(all)
}
