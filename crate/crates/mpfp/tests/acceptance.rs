//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Set `MPFP_ACCEPTANCE=1,3,5` to run a subset.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mpfp::bench::{self, BenchSpec};
use mpfp::config::{LossMode, RunConfig};
use mpfp::eval::evaluate_split;
use mpfp::gradsuite::{self, SuiteOptions};
use mpfp::synth::{self, Dataset, Split, SynthSpec};
use mpfp::train::{log_csv, train};
use mpfp_core::fusion::FusionRule;
use mpfp_core::metrics::{average_precision, match_detections, pr_curve, Detection, GroundTruth, Interpolation};
use mpfp_core::mpl::{form_subsets, label_patches, selection_loss, PatchLabel};
use mpfp_core::{iou, BBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn scale_table() -> Outcome {
    let expected = [
        (512, 32, 3),
        (640, 64, 4),
        (768, 88, 5),
        (896, 112, 6),
        (1024, 160, 7),
        (1280, 224, 7),
        (1280, 288, 8),
    ];
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let mut out = Vec::new();
    let code = mpfp::cli::main_with(
        ["mpfp", "scale-table", "--out", dir.path().to_str().unwrap()],
        &mut out,
        &mut std::io::sink(),
    );
    let took = t.elapsed();
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&out).unwrap_or_default();
    let got: Vec<(u64, u64, u64)> = rows
        .iter()
        .map(|r| {
            let f = |k: &str| r[k].as_u64().unwrap_or(u64::MAX);
            (f("input_size"), f("width"), f("depth"))
        })
        .collect();
    let want: Vec<(u64, u64, u64)> = expected.iter().map(|&(a, b, c)| (a, b, c)).collect();
    let ok = code == 0 && got == want && took < Duration::from_secs(1);
    outcome(ok, format!("{} of 7 rows match, {:.3}s", got.iter().zip(&want).filter(|(a, b)| a == b).count(), secs(took)))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let entries = match gradsuite::run_all(&SuiteOptions::default()) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite failed to run: {e}")),
    };
    let took = t.elapsed();
    let failed: Vec<String> = entries.iter().filter(|e| !e.passed).map(|e| format!("{} ({:.2e})", e.name, e.max_rel_error)).collect();
    let worst = entries
        .iter()
        .filter(|e| e.name != "end-to-end")
        .map(|e| e.max_rel_error)
        .fold(0.0, f64::max);
    let e2e = entries.iter().find(|e| e.name == "end-to-end").map_or(f64::NAN, |e| e.max_rel_error);
    let ok = failed.is_empty() && took < Duration::from_secs(120);
    let mut detail = format!(
        "{} checks, worst {worst:.2e} (< 1e-5), end-to-end {e2e:.2e} (< 1e-4), {:.1}s",
        entries.len(),
        secs(took)
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    outcome(ok, detail)
}

/// Distinct random boxes with random scores.
fn random_bag(rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<f64>) {
    let n = rng.gen_range(1..=30);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    while boxes.len() < n {
        let s = rng.gen_range(2..=20) as f64;
        let b = BBox::square(rng.gen_range(0..44) as f64, rng.gen_range(0..44) as f64, s).unwrap();
        if !boxes.contains(&b) {
            boxes.push(b);
        }
    }
    let scores = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    (boxes, scores)
}

fn endpoint_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Instant::now();
    let mut bad = Vec::new();
    for bag in 0..1000 {
        let (boxes, scores) = random_bag(&mut rng);
        if form_subsets(&boxes, &scores, 0.0).unwrap().len() != 1 {
            bad.push(format!("bag {bag}: lambda 0 gave more than one subset"));
        }
        if form_subsets(&boxes, &scores, 1.0).unwrap().iter().any(|s| s.members.len() != 1) {
            bad.push(format!("bag {bag}: lambda 1 gave a non-singleton"));
        }
        let seed = rng.gen_range(0..boxes.len());
        let labels = label_patches(&boxes, seed, 1.0).unwrap();
        for (b, l) in boxes.iter().zip(labels) {
            let want = if iou(&boxes[seed], b) >= 0.5 { PatchLabel::Positive } else { PatchLabel::Negative };
            if l != want {
                bad.push(format!("bag {bag}: label disagrees with the 0.5 thresholds"));
                break;
            }
        }
    }
    let took = t.elapsed();
    outcome(
        bad.is_empty() && took < Duration::from_secs(10),
        format!("1000 bags, {} violations{}, {:.2}s", bad.len(), bad.first().map_or(String::new(), |b| format!(" (first: {b})")), secs(took)),
    )
}

fn convexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Instant::now();
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (boxes, s1) = random_bag(&mut rng);
        let s2: Vec<f64> = (0..boxes.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = if rng.gen_bool(0.5) { 1 } else { -1 };
        let loss = |s: &[f64]| {
            let subsets = form_subsets(&boxes, s, 0.0).unwrap();
            selection_loss(y, &subsets.iter().map(|t| t.score).collect::<Vec<_>>()).unwrap()
        };
        let mid: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 0.5 * (a + b)).collect();
        let gap = loss(&mid) - 0.5 * (loss(&s1) + loss(&s2));
        worst = worst.max(gap);
        if gap > 1e-12 {
            violations += 1;
        }
    }
    let took = t.elapsed();
    outcome(
        violations == 0 && took < Duration::from_secs(5),
        format!("1000 pairs, {violations} violations, largest excess {worst:.1e}, {:.2}s", secs(took)),
    )
}

fn eval_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Instant::now();
    let (mut match_bad, mut worst_ap): (usize, f64) = (0, 0.0);
    let small_box = |rng: &mut ChaCha8Rng| {
        BBox::square(rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64, rng.gen_range(1..5) as f64).unwrap()
    };
    for _ in 0..200 {
        let dets: Vec<Detection> = (0..rng.gen_range(0..=5))
            .map(|_| Detection {
                image: rng.gen_range(0..2),
                class: rng.gen_range(0..2),
                bbox: small_box(&mut rng),
                confidence: rng.gen_range(0..4) as f64 / 4.0,
            })
            .collect();
        let gts: Vec<GroundTruth> = (0..rng.gen_range(0..=5))
            .map(|_| GroundTruth {
                image: rng.gen_range(0..2),
                class: rng.gen_range(0..2),
                bbox: small_box(&mut rng),
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let m = match_detections(&dets, &gts, thr);
        if (m.order.clone(), m.flags.clone()) != oracle::matching(&dets, &gts, thr) {
            match_bad += 1;
        }
        let flags: Vec<bool> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_bool(0.5)).collect();
        let total = flags.iter().filter(|&&f| f).count() + rng.gen_range(0..3);
        let conf: Vec<f64> = (0..flags.len()).map(|k| 1.0 - k as f64 / 10.0).collect();
        let ap = average_precision(&pr_curve(&flags, &conf, total).unwrap());
        worst_ap = worst_ap.max((ap - oracle::all_points_ap(&flags, total)).abs());
    }
    let took = t.elapsed();
    outcome(
        match_bad == 0 && worst_ap < 1e-9 && took < Duration::from_secs(30),
        format!("200 instances, {match_bad} matching mismatches, max AP difference {worst_ap:.1e}, {:.2}s", secs(took)),
    )
}

fn fusion_speed() -> Outcome {
    let t = Instant::now();
    let rows = match bench::run(&BenchSpec::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("benchmark failed: {e}")),
    };
    let took = t.elapsed();
    let get = |m: &str| rows.iter().find(|r| r.fusion_mode == m).map(|r| r.median_ns);
    let (Some(inst), Some(soft), Some(soft_scalar)) = (get("instant"), get("softmax"), get("softmax-scalar")) else {
        return outcome(false, "missing benchmark rows");
    };
    outcome(
        inst <= soft && took < Duration::from_secs(60),
        format!(
            "median instant {inst} ns, softmax {soft} ns, ratio {:.3}; against one-logit-per-input softmax {:.3}; {:.1}s",
            inst as f64 / soft as f64,
            inst as f64 / soft_scalar as f64,
            secs(took)
        ),
    )
}

struct Run {
    map: f64,
    log: Vec<u8>,
    metrics: Vec<u8>,
    took: Duration,
}

struct Runs<'a> {
    data: &'a Dataset,
    cache: BTreeMap<String, Run>,
}

impl Runs<'_> {
    fn get(&mut self, key: &str, cfg: &RunConfig) -> &Run {
        if !self.cache.contains_key(key) {
            let t = Instant::now();
            let r = train(cfg, self.data, None, |_, _| {}).expect("training runs");
            let ev = evaluate_split(&r.model, &r.params, self.data, Split::Test, cfg.nms_iou, Interpolation::AllPoints)
                .expect("evaluation runs");
            let run = Run {
                map: ev.metrics.map,
                log: log_csv(&r.log).into_bytes(),
                metrics: serde_json::to_vec_pretty(&ev.metrics).unwrap(),
                took: t.elapsed(),
            };
            eprintln!("  [{key}] mAP {:.4} in {:.0}s", run.map, secs(run.took));
            self.cache.insert(key.to_string(), run);
        }
        &self.cache[key]
    }
}

fn config(fusion: FusionRule, loss: LossMode, seed: u64) -> RunConfig {
    RunConfig {
        fusion,
        loss,
        seed,
        ..RunConfig::default()
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn fusion_equivalence(runs: &mut Runs) -> Outcome {
    let a = runs.get("instant-0", &config(FusionRule::Instant, LossMode::Continuation, 0));
    let (ma, ta) = (a.map, a.took);
    let b = runs.get("softmax-0", &config(FusionRule::Softmax, LossMode::Continuation, 0));
    let (mb, tb) = (b.map, b.took);
    let limit = Duration::from_secs(600);
    outcome(
        (ma - mb).abs() <= 0.05 && ta < limit && tb < limit,
        format!("instant {ma:.4} ({:.0}s), softmax {mb:.4} ({:.0}s), gap {:.4} (<= 0.05)", secs(ta), secs(tb), (ma - mb).abs()),
    )
}

fn mean_map(runs: &mut Runs, fusion: FusionRule, loss: LossMode, prefix: &str) -> (Vec<f64>, Duration) {
    let mut maps = Vec::new();
    let mut took = Duration::ZERO;
    for s in SEEDS {
        let r = runs.get(&format!("{prefix}-{s}"), &config(fusion, loss, s));
        maps.push(r.map);
        took += r.took;
    }
    (maps, took)
}

fn weak_supervision(runs: &mut Runs) -> Outcome {
    let (maps, took) = mean_map(runs, FusionRule::Instant, LossMode::Continuation, "instant");
    let mean = maps.iter().sum::<f64>() / maps.len() as f64;
    outcome(
        mean >= 0.80 && took < Duration::from_secs(1800),
        format!("mAP@0.5 per seed {maps:.4?}, mean {mean:.4} (>= 0.80), {:.0}s total", secs(took)),
    )
}

fn continuation_benefit(runs: &mut Runs) -> Outcome {
    let (cont, t1) = mean_map(runs, FusionRule::Instant, LossMode::Continuation, "instant");
    let (mil, t2) = mean_map(runs, FusionRule::Instant, LossMode::StandardMil, "mil");
    let mc = cont.iter().sum::<f64>() / 3.0;
    let mm = mil.iter().sum::<f64>() / 3.0;
    outcome(
        mc >= mm && t1 + t2 < Duration::from_secs(3600),
        format!("continuation {mc:.4} vs standard MIL {mm:.4}, gap {:+.4}, {:.0}s total", mc - mm, secs(t1 + t2)),
    )
}

fn determinism(runs: &mut Runs) -> Outcome {
    let cfg = config(FusionRule::Instant, LossMode::Continuation, 0);
    let a = runs.get("instant-0", &cfg);
    let (log, metrics, ta) = (a.log.clone(), a.metrics.clone(), a.took);
    let b = runs.get("instant-0-repeat", &cfg);
    let same_log = log == b.log;
    let same_metrics = metrics == b.metrics;
    outcome(
        same_log && same_metrics && ta + b.took < Duration::from_secs(1200),
        format!(
            "loss log {} ({} bytes), metrics JSON {}, {:.0}s",
            if same_log { "identical" } else { "differs" },
            log.len(),
            if same_metrics { "identical" } else { "differs" },
            secs(ta + b.took)
        ),
    )
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("MPFP_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));

    let dir = tempfile::tempdir().unwrap();
    let needs_data = [6, 8, 9, 10].iter().any(|&n| want(n));
    let data = needs_data.then(|| {
        synth::generate(&SynthSpec::default(), dir.path()).unwrap();
        synth::load(dir.path()).unwrap()
    });
    let mut runs = data.as_ref().map(|d| Runs {
        data: d,
        cache: BTreeMap::new(),
    });

    type Check<'a> = Box<dyn FnOnce(&mut Option<Runs>) -> Outcome + 'a>;
    let checks: Vec<(usize, &str, Check)> = vec![
        (1, "scale table", Box::new(|_| scale_table())),
        (2, "gradient suite", Box::new(|_| gradients())),
        (3, "MPL endpoint laws", Box::new(|_| endpoint_laws())),
        (4, "selection loss convexity at lambda 0", Box::new(|_| convexity())),
        (5, "evaluation oracle equivalence", Box::new(|_| eval_oracles())),
        (7, "fusion speed ordering", Box::new(|_| fusion_speed())),
        (10, "determinism", Box::new(|r| determinism(r.as_mut().unwrap()))),
        (6, "instant vs softmax fusion", Box::new(|r| fusion_equivalence(r.as_mut().unwrap()))),
        (8, "weak supervision mAP@0.5", Box::new(|r| weak_supervision(r.as_mut().unwrap()))),
        (9, "continuation vs standard MIL", Box::new(|r| continuation_benefit(r.as_mut().unwrap()))),
    ];
    let mut results = Vec::new();
    for (n, name, check) in checks {
        if !want(n) {
            continue;
        }
        let o = check(&mut runs);
        println!("criterion {n:>2} {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o.passed));
    }
    results.sort();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
