//! Test-split evaluation: decode detections, score them, write reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mpfp_core::metrics::{evaluate, suppress, Detection, EvalReport, Interpolation};
use mpfp_core::pyramid::{Model, Prediction};
use mpfp_core::Params;
use serde::Serialize;

use crate::synth::{Dataset, Split};
use crate::{Error, Result};

/// Detections of one image: every patch with a positive selector score for
/// a class becomes a candidate, its detector probability the confidence;
/// keep-highest-score suppression at `nms_iou` thins overlapping candidates.
pub fn decode(model: &Model, pred: &Prediction, image: usize, nms_iou: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in 0..model.config.classes {
        let cand: Vec<usize> = (0..model.boxes.len()).filter(|&j| pred.scores[c][j] > 0.0).collect();
        let boxes: Vec<_> = cand.iter().map(|&j| model.boxes[j]).collect();
        let conf: Vec<f64> = cand.iter().map(|&j| pred.positive[c][j]).collect();
        for k in suppress(&boxes, &conf, nms_iou) {
            out.push(Detection {
                image,
                class: c,
                bbox: boxes[k],
                confidence: conf[k],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub ap: f64,
    pub ground_truths: usize,
    pub detections: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoding {
    pub candidates: &'static str,
    pub confidence: &'static str,
    pub suppression: &'static str,
    pub suppression_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub map: f64,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub images: usize,
    pub classes: Vec<ClassMetrics>,
    pub decoding: Decoding,
}

pub struct Evaluation {
    pub detections: Vec<Detection>,
    pub report: EvalReport,
    pub metrics: Metrics,
}

pub fn evaluate_split(
    model: &Model,
    params: &Params,
    data: &Dataset,
    split: Split,
    nms_iou: f64,
    interp: Interpolation,
) -> Result<Evaluation> {
    let mut detections = Vec::new();
    let mut images = 0;
    for (id, (rec, img)) in data.index.images.iter().zip(&data.images).enumerate() {
        if rec.split != split {
            continue;
        }
        images += 1;
        let pred = model.predict(params, img)?;
        detections.extend(decode(model, &pred, id, nms_iou));
    }
    let gts = data.ground_truth(split);
    let report = evaluate(&detections, &gts, data.classes(), 0.5, interp)?;
    let metrics = Metrics {
        map: report.map,
        iou_threshold: 0.5,
        interpolation: interp,
        images,
        classes: report
            .classes
            .iter()
            .map(|r| ClassMetrics {
                name: data.index.classes[r.class].clone(),
                ap: r.ap,
                ground_truths: r.ground_truths,
                detections: r.detections,
                true_positives: r.true_positives,
            })
            .collect(),
        decoding: Decoding {
            candidates: "patches with a positive selector score",
            confidence: "detector probability of the positive label",
            suppression: "keep-highest-score",
            suppression_iou: nms_iou,
        },
    };
    Ok(Evaluation {
        detections,
        report,
        metrics,
    })
}

pub fn pr_csv(class: &str, report: &mpfp_core::metrics::ClassReport) -> String {
    let mut s = String::from("class,threshold,precision,recall\n");
    for p in &report.curve {
        writeln!(s, "{class},{},{},{}", p.threshold, p.precision, p.recall).expect("writing to a String");
    }
    s
}

/// Writes `detections.json`, `metrics.json` and one `pr_<class>.csv` per class.
pub fn write_outputs(dir: &Path, data: &Dataset, ev: &Evaluation) -> Result<()> {
    let write = |file: String, bytes: Vec<u8>| {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })
    };
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write("detections.json".into(), serde_json::to_vec_pretty(&ev.detections)?)?;
    write("metrics.json".into(), serde_json::to_vec_pretty(&ev.metrics)?)?;
    for r in &ev.report.classes {
        let name = &data.index.classes[r.class];
        write(format!("pr_{name}.csv"), pr_csv(name, r).into_bytes())?;
    }
    Ok(())
}
