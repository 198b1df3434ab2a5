//! Central finite-difference checks of reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{backward, branch_signature, forward, ComputeGraph, Params};
use crate::tensor::Tensor;
use crate::Error;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub epsilon: f64,
    /// Denominator floor: the error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (chosen at random).
    pub max_per_tensor: Option<usize>,
    /// Also check gradients with respect to graph inputs.
    pub wrt_inputs: bool,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-3,
            max_per_tensor: None,
            wrt_inputs: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a relu, hinge, max or clamp kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
    libm::fabs(analytic - numeric) / denom
}

enum Target {
    Input(usize),
    Param(usize),
}

/// Compares reverse-mode gradients of the scalar output `output` with
/// central differences, for every parameter and (optionally) every input.
pub fn gradcheck(
    graph: &ComputeGraph,
    inputs: &[(&str, &Tensor)],
    params: &Params,
    output: &str,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, Error> {
    let out_id = graph.output(output)?;
    let out_shape = &graph.node(out_id).shape;
    if out_shape.iter().product::<usize>() != 1 {
        return Err(Error::NotScalar(out_shape.clone()));
    }
    let base = forward(graph, inputs, params)?;
    let base_sig = branch_signature(graph, &base);
    let grads = backward(graph, &base, &[(out_id, Tensor::full(out_shape, 1.0))])?;

    let mut targets = Vec::new();
    if opts.wrt_inputs {
        targets.extend((0..inputs.len()).map(Target::Input));
    }
    targets.extend((0..params.len()).map(Target::Param));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut in_vals: Vec<Tensor> = inputs.iter().map(|(_, t)| (*t).clone()).collect();
    let names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
    let mut p = params.clone();
    let mut report = Vec::new();

    for target in targets {
        let (name, analytic) = match target {
            Target::Input(i) => (String::from(names[i]), grads.input(graph, names[i])?.cloned()),
            Target::Param(i) => {
                let n = params.names()[i].clone();
                let g = grads.param(graph, &n)?.cloned();
                (n, g)
            }
        };
        let len = match target {
            Target::Input(i) => in_vals[i].len(),
            Target::Param(i) => p.values()[i].len(),
        };
        let coords: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut check = TensorCheck {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for j in coords {
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[j]);
            let mut eval_at = |delta: f64| -> Result<(f64, bool), Error> {
                let slot = match target {
                    Target::Input(i) => &mut in_vals[i].data_mut()[j],
                    Target::Param(i) => &mut p.values_mut()[i].data_mut()[j],
                };
                let orig = *slot;
                *slot = orig + delta;
                let pairs: Vec<(&str, &Tensor)> = names.iter().copied().zip(in_vals.iter()).collect();
                let e = forward(graph, &pairs, &p);
                match target {
                    Target::Input(i) => in_vals[i].data_mut()[j] = orig,
                    Target::Param(i) => p.values_mut()[i].data_mut()[j] = orig,
                }
                let e = e?;
                let same = branch_signature(graph, &e) == base_sig;
                Ok((e.value(out_id).data()[0], same))
            };
            let (fp, sp) = eval_at(opts.epsilon)?;
            let (fm, sm) = eval_at(-opts.epsilon)?;
            if !(sp && sm) {
                check.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.epsilon);
            check.checked += 1;
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric, opts.floor));
        }
        report.push(check);
    }
    Ok(GradcheckReport { tensors: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Init, OpKind};

    #[test]
    fn linear_graph_is_exact() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]).unwrap();
        let w = b.param("w", &[4], Init::Values(alloc::vec![0.5, -1.0, 2.0, 0.25])).unwrap();
        let y = b.mul(x, w).unwrap();
        let y = b.scale(y, 3.0).unwrap();
        let m = b.mean(y).unwrap();
        b.output("loss", m).unwrap();
        let g = b.finish();
        let xt = Tensor::from_vec(alloc::vec![1.0, 2.0, -3.0, 0.5]);
        // Central differences are exact for linear maps at any step, so a
        // wide step keeps rounding noise out of the comparison.
        let opts = GradcheckOptions {
            epsilon: 1e-2,
            ..GradcheckOptions::default()
        };
        let r = gradcheck(&g, &[("x", &xt)], &g.init_params(0), "loss", &opts).unwrap();
        assert!(r.max_rel_error() < 1e-10, "{r:?}");
        assert_eq!(r.checked(), 8);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let y = b.unary(OpKind::Relu, x).unwrap();
        let m = b.mean(y).unwrap();
        b.output("loss", m).unwrap();
        let g = b.finish();
        let xt = Tensor::from_vec(alloc::vec![0.0, 1.0]);
        let r = gradcheck(&g, &[("x", &xt)], &g.init_params(0), "loss", &GradcheckOptions::default()).unwrap();
        assert_eq!(r.tensors[0].skipped, 1);
        assert_eq!(r.tensors[0].checked, 1);
        assert!(r.max_rel_error() < 1e-10);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        b.output("y", x).unwrap();
        let g = b.finish();
        let xt = Tensor::zeros(&[2]);
        let r = gradcheck(&g, &[("x", &xt)], &g.init_params(0), "y", &GradcheckOptions::default());
        assert!(matches!(r, Err(Error::NotScalar(_))));
    }
}
