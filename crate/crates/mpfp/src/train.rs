//! The training loop: per bag, forward the detector, pick subsets and
//! pseudo-labels, evaluate the loss graph, then push its input gradients
//! back through the detector.

use std::fmt::Write as _;
use std::path::Path;

use mpfp_core::graph::{backward, forward, Evaluation};
use mpfp_core::mpl::{class_targets, schedule_lambda, ContinuationSchedule, LossGraph, OverlapTable};
use mpfp_core::optim::Adam;
use mpfp_core::pyramid::Model;
use mpfp_core::{Params, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{LossMode, RunConfig};
use crate::synth::{Bag, Dataset, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Summed over the bags of the batch.
    pub loss: f64,
    pub selection: f64,
    pub detector: f64,
    pub log_clamps: usize,
}

pub const LOG_HEADER: &str = "step,epoch,lambda,lr,loss,selection,detector,log_clamps";

pub fn log_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lambda, r.lr, r.loss, r.selection, r.detector, r.log_clamps
        )
        .expect("writing to a String");
    }
    s
}

/// Loss and parameter gradients of one bag.
pub struct BagStep {
    pub total: f64,
    pub detector: f64,
    pub log_clamps: usize,
    pub grads: Vec<Tensor>,
}

/// Everything needed to evaluate the objective on bags of one model.
pub struct Objective {
    pub model: Model,
    pub loss: LossGraph,
    pub overlaps: OverlapTable,
}

impl Objective {
    pub fn new(model: Model) -> Result<Self> {
        let loss = LossGraph::build(model.config.classes, model.boxes.len())?;
        let overlaps = OverlapTable::new(&model.boxes);
        Ok(Self { model, loss, overlaps })
    }

    fn loss_inputs(&self, eval: &Evaluation, labels: &[i8], lambda: f64) -> Result<(Tensor, Tensor, Vec<(String, Tensor)>)> {
        let sel = eval.value(self.model.scores).clone();
        let det = eval.value(self.model.probs).clone();
        let np = self.model.boxes.len();
        let targets = labels
            .iter()
            .enumerate()
            .map(|(c, &y)| class_targets(&self.overlaps, &sel.data()[c * np..(c + 1) * np], y, lambda))
            .collect::<Result<Vec<_>, _>>()?;
        let masks = self.loss.masks(&targets)?;
        Ok((sel, det, masks))
    }

    /// Value of the objective for one bag without gradients.
    pub fn value(&self, params: &Params, image: &Tensor, labels: &[i8], lambda: f64) -> Result<f64> {
        let x = self.model.preprocess(image)?;
        let eval = forward(&self.model.graph, &[("image", &x)], params)?;
        let (sel, det, masks) = self.loss_inputs(&eval, labels, lambda)?;
        let mut inputs: Vec<(&str, &Tensor)> = vec![("sel", &sel), ("det", &det)];
        inputs.extend(masks.iter().map(|(n, t)| (n.as_str(), t)));
        let le = forward(&self.loss.graph, &inputs, &Params::default())?;
        Ok(le.value(self.loss.total).item()?)
    }

    pub fn bag_step(&self, params: &Params, image: &Tensor, labels: &[i8], lambda: f64) -> Result<BagStep> {
        let x = self.model.preprocess(image)?;
        let eval = forward(&self.model.graph, &[("image", &x)], params)?;
        let (sel, det, masks) = self.loss_inputs(&eval, labels, lambda)?;
        let mut inputs: Vec<(&str, &Tensor)> = vec![("sel", &sel), ("det", &det)];
        inputs.extend(masks.iter().map(|(n, t)| (n.as_str(), t)));
        let lg = &self.loss.graph;
        let le = forward(lg, &inputs, &Params::default())?;
        let lgrads = backward(lg, &le, &[(self.loss.total, Tensor::scalar(1.0))])?;
        let mut seeds = Vec::with_capacity(2);
        if let Some(g) = lgrads.input(lg, "sel")? {
            seeds.push((self.model.scores, g.clone()));
        }
        if let Some(g) = lgrads.input(lg, "det")? {
            seeds.push((self.model.probs, g.clone()));
        }
        let grads = backward(&self.model.graph, &eval, &seeds)?;
        Ok(BagStep {
            total: le.value(self.loss.total).item()?,
            detector: le.value(self.loss.detector).item()?,
            log_clamps: le.log_clamps(),
            grads: grads.param_grads(&self.model.graph),
        })
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub params: Params,
    pub log: Vec<StepRecord>,
}

pub fn steps_per_epoch(cfg: &RunConfig, train_bags: usize) -> usize {
    train_bags.div_ceil(cfg.batch_size)
}

/// Trains on the dataset's training bags. `progress` sees each epoch's
/// records as they complete; `checkpoint_dir` receives periodic and final
/// checkpoints when given.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(usize, &[StepRecord]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bags: Vec<Bag> = data.bags(Split::Train);
    if bags.is_empty() {
        return Err(Error::Config("the dataset has no training images".into()));
    }
    let side = data.index.spec.image_side;
    let model = Model::build(cfg.model_config(data.classes(), side)?)?;
    let obj = Objective::new(model)?;
    let mut params = obj.model.init_params(cfg.seed);
    let per_epoch = steps_per_epoch(cfg, bags.len());
    let total = per_epoch * cfg.epochs;
    let schedule = ContinuationSchedule::linear(cfg.tau, total)?;
    let mut opt = Adam::new(cfg.adam(total), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba95);
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first = log.len();
        for batch in order.chunks(cfg.batch_size) {
            let lambda = match cfg.loss {
                LossMode::Continuation => schedule_lambda(&schedule, step)?,
                LossMode::StandardMil => 1.0,
            };
            let mut sum: Option<Vec<Tensor>> = None;
            let (mut loss, mut det, mut clamps) = (0.0, 0.0, 0);
            for &i in batch {
                let r = obj.bag_step(&params, &bags[i].image, &bags[i].labels, lambda)?;
                loss += r.total;
                det += r.detector;
                clamps += r.log_clamps;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.axpy(1.0, g);
                        }
                    }
                }
            }
            let grads = sum.expect("batches are nonempty");
            let lr = opt.config().lr_at(opt.step_count());
            opt.update(&mut params, &grads.iter().map(Some).collect::<Vec<_>>())?;
            if !params.values().iter().all(|t| t.is_finite()) {
                return Err(Error::Config(format!("parameters became non-finite at step {step}")));
            }
            log.push(StepRecord {
                step,
                epoch,
                lambda,
                lr,
                loss,
                selection: loss - det,
                detector: det,
                log_clamps: clamps,
            });
            step += 1;
        }
        progress(epoch, &log[first..]);
        if let Some(dir) = checkpoint_dir {
            let last = epoch + 1 == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                let meta = serde_json::json!({ "epoch": epoch + 1, "step": step, "config": cfg });
                checkpoint::save(dir, &params, meta)?;
            }
        }
    }
    Ok(TrainOutcome {
        model: obj.model,
        params,
        log,
    })
}
