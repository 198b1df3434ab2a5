//! Fusion-kernel latency microbenchmark.
//!
//! Instant fusion takes one raw weight per input. The softmax and sigmoid
//! rows use one logit per input, channel and position, as the gated rules
//! weight every location separately; `softmax-scalar` adds the softmax rule
//! with one logit per input for a like-for-like weight count.

use std::fmt::Write as _;
use std::time::Instant;

use mpfp_core::graph::{apply, OpKind};
use mpfp_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub fusion_mode: String,
    /// `CxHxW` of each fused map.
    pub map_shape: String,
    pub reps: usize,
    pub median_ns: u64,
    pub p90_ns: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchSpec {
    pub channels: usize,
    pub side: usize,
    pub inputs: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            side: 64,
            inputs: 3,
            reps: 1000,
            warmup: 20,
            seed: 0,
        }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn time_op(op: &OpKind, args: &[&Tensor], spec: &BenchSpec) -> Result<(u64, u64)> {
    for _ in 0..spec.warmup {
        std::hint::black_box(apply(op, args)?);
    }
    let mut ns = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t = Instant::now();
        let out = apply(op, std::hint::black_box(args))?;
        ns.push(t.elapsed().as_nanos() as u64);
        std::hint::black_box(out);
    }
    ns.sort_unstable();
    Ok((percentile(&ns, 0.5), percentile(&ns, 0.9)))
}

/// Times each rule in turn on the same inputs, in the calling thread.
pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = [spec.channels, spec.side, spec.side];
    let maps: Vec<Tensor> = (0..spec.inputs).map(|_| Tensor::normal(&shape, 1.0, &mut rng)).collect();
    let n = spec.inputs;
    let raw = Tensor::uniform(&[n], 0.1, 1.0, &mut rng);
    let per_pos = Tensor::normal(&[n, spec.channels, spec.side, spec.side], 1.0, &mut rng);
    let scalar = Tensor::normal(&[n], 1.0, &mut rng);
    let cases: [(&str, OpKind, &Tensor); 4] = [
        ("instant", OpKind::InstantFuse { theta: mpfp_core::fusion::DEFAULT_THETA }, &raw),
        ("softmax", OpKind::SoftmaxFuse, &per_pos),
        ("sigmoid", OpKind::SigmoidFuse, &per_pos),
        ("softmax-scalar", OpKind::SoftmaxFuse, &scalar),
    ];
    let map_shape = format!("{}x{}x{}", spec.channels, spec.side, spec.side);
    let mut rows = Vec::with_capacity(cases.len());
    for (name, op, w) in cases {
        let mut args: Vec<&Tensor> = vec![w];
        args.extend(maps.iter());
        let (median_ns, p90_ns) = time_op(&op, &args, spec)?;
        rows.push(BenchRow {
            fusion_mode: name.into(),
            map_shape: map_shape.clone(),
            reps: spec.reps,
            median_ns,
            p90_ns,
        });
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "fusion_mode,map_shape,reps,median_ns,p90_ns";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.fusion_mode, r.map_shape, r.reps, r.median_ns, r.p90_ns).expect("writing to a String");
    }
    s
}

/// Median instant latency over median softmax latency.
pub fn instant_over_softmax(rows: &[BenchRow]) -> Option<f64> {
    let get = |m: &str| rows.iter().find(|r| r.fusion_mode == m).map(|r| r.median_ns as f64);
    Some(get("instant")? / get("softmax")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile(&v, 0.5), 5);
        assert_eq!(percentile(&v, 0.9), 9);
        assert_eq!(percentile(&[7], 0.9), 7);
    }

    #[test]
    fn small_run_has_all_rows() {
        let rows = run(&BenchSpec {
            channels: 2,
            side: 4,
            reps: 5,
            warmup: 1,
            ..BenchSpec::default()
        })
        .unwrap();
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert!(instant_over_softmax(&rows).unwrap() > 0.0);
    }
}
