//! Run configuration: a JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use mpfp_core::fusion::{FusionRule, FusionSpec};
use mpfp_core::optim::AdamConfig;
use mpfp_core::pyramid::{scale_config, ModelConfig, Neck};
use serde::{Deserialize, Serialize};

use crate::synth::SynthSpec;
use crate::{Error, Result};

/// How the selection loss groups patches over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Lambda follows the knot schedule from 0 to 1.
    Continuation,
    /// Lambda fixed at 1: plain multiple-instance learning.
    StandardMil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub psi: u8,
    /// Network input side. The compound table's side is far beyond desk
    /// scale, so images are resampled to this side instead; width and depth
    /// still follow the table.
    pub input_size: usize,
    pub fusion: FusionRule,
    pub theta: f64,
    pub neck: Neck,
    /// Patch grids as `(window, stride)` in image pixels.
    pub windows: Vec<(usize, usize)>,
    pub context: f64,
    pub hidden: usize,
    pub init_gain: f64,
    pub loss: LossMode,
    /// Knot count tau of the continuation schedule.
    pub tau: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of the total step count at which the learning rate drops.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Dataset generated by `synth` when `dataset` does not exist yet.
    pub synth: SynthSpec,
    /// IoU above which eval-time suppression drops a lower-scored box.
    pub nms_iou: f64,
    pub eleven_point: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            psi: 0,
            input_size: 256,
            fusion: FusionRule::Instant,
            theta: mpfp_core::fusion::DEFAULT_THETA,
            neck: Neck::CrossWise,
            windows: vec![(10, 3), (15, 4), (20, 5)],
            context: 1.0,
            hidden: 32,
            init_gain: 1.7,
            loss: LossMode::Continuation,
            tau: 4,
            epochs: 12,
            batch_size: 4,
            lr: 1e-3,
            lr_milestones: vec![0.8],
            lr_decay: 0.1,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            synth: SynthSpec::default(),
            nms_iou: 0.5,
            eleven_point: false,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.psi > 6 {
            return bad(format!("psi {} outside 0..=6", self.psi));
        }
        if self.input_size == 0 || self.input_size % 128 != 0 {
            return bad(format!("input_size {} is not a positive multiple of 128", self.input_size));
        }
        if self.input_size % self.synth.image_side != 0 {
            return bad("input_size must be a multiple of the image side".into());
        }
        let positive = [
            ("theta", self.theta),
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("init_gain", self.init_gain),
            ("nms_iou", self.nms_iou),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be >= 0 and the betas in [0, 1)".into());
        }
        if self.tau == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("tau, epochs and batch_size must be positive".into());
        }
        if self.windows.is_empty() {
            return bad("at least one patch window is required".into());
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr milestones are fractions of training in [0, 1]".into());
        }
        if self.context < 0.0 {
            return bad("context must be >= 0".into());
        }
        self.synth.validate()
    }

    pub fn model_config(&self, classes: usize, image_side: usize) -> Result<ModelConfig> {
        let pyramid = scale_config(self.psi)?.with_input_size(self.input_size)?;
        Ok(ModelConfig {
            pyramid,
            neck: self.neck,
            fusion: FusionSpec {
                theta: self.theta,
                ..FusionSpec::new(self.fusion)
            },
            classes,
            image_side,
            windows: self.windows.clone(),
            context: self.context,
            hidden: self.hidden,
            gain: self.init_gain,
        })
    }

    pub fn adam(&self, total_steps: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            milestones: self
                .lr_milestones
                .iter()
                .map(|f| (f * total_steps as f64).round() as usize)
                .collect(),
            decay_factor: self.lr_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5, "fusion": "softmax"}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.fusion, FusionRule::Softmax);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 5}"#).is_err());
    }

    #[test]
    fn validation_rejects_nonsense() {
        for c in [
            RunConfig { psi: 7, ..RunConfig::default() },
            RunConfig { lr: 0.0, ..RunConfig::default() },
            RunConfig { input_size: 192, ..RunConfig::default() },
            RunConfig { epochs: 0, ..RunConfig::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn milestones_scale_with_steps() {
        let c = RunConfig::default();
        assert_eq!(c.adam(1000).milestones, [800]);
    }
}
