//! Run configuration: one TOML document with `[motionnet]`, `[loss]`,
//! `[stacked]`, `[data]` and `[train]` sections. Unknown keys are rejected
//! and missing keys take their defaults; [`RunConfig::to_toml`] writes every
//! resolved value back out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::motionnet::{MotionNetConfig, FINEST_SCALE};
use crate::stacked::{FineTuneMode, HeadConfig, NormalizationSpec, StackedTrainConfig};
use crate::synth::{ClipSpec, FlowDatasetSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackedSection {
    pub mode: FineTuneMode,
    pub clip: f64,
    pub head_width: usize,
    pub classes: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub action_weight: f64,
    pub unsup_weight: f64,
    /// Spatial and temporal weights for score fusion.
    pub fusion_weights: [f64; 2],
}

impl Default for StackedSection {
    fn default() -> Self {
        let t = StackedTrainConfig::default();
        let h = HeadConfig::default();
        Self {
            mode: FineTuneMode::JointLoss,
            clip: NormalizationSpec::default().clip,
            head_width: h.width,
            classes: h.classes,
            steps: t.steps,
            learning_rate: t.learning_rate,
            motion_learning_rate: t.motion_learning_rate,
            batch_size: t.batch_size,
            action_weight: t.action_weight,
            unsup_weight: t.unsup_weight,
            fusion_weights: [1.0, 1.5],
        }
    }
}

impl StackedSection {
    pub fn normalization(&self) -> NormalizationSpec {
        NormalizationSpec { clip: self.clip, ..NormalizationSpec::default() }
    }

    pub fn head(&self, activation_slope: f64) -> HeadConfig {
        HeadConfig { width: self.head_width, classes: self.classes, activation_slope }
    }

    pub fn train_config(&self, seed: u64) -> StackedTrainConfig {
        StackedTrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            motion_learning_rate: self.motion_learning_rate,
            batch_size: self.batch_size,
            seed,
            action_weight: self.action_weight,
            unsup_weight: self.unsup_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Frame sequences for flow training and evaluation.
    pub flow: FlowDatasetSpec,
    /// Labelled clips for the stacked classifier.
    pub clips: ClipSpec,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { flow: FlowDatasetSpec::default(), clips: ClipSpec::default(), eval_samples: 64, eval_seed: 1_000_003 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub motionnet: MotionNetConfig,
    pub loss: LossConfig,
    pub stacked: StackedSection,
    pub data: DataSection,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses and validates; errors carry the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            Error::Config { key, detail: inner.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.motionnet.validate()?;
        let scene = &self.data.flow.scene;
        self.motionnet.check_extent(scene.height, scene.width)?;
        let clip_scene = &self.data.clips.scene;
        self.motionnet.check_extent(clip_scene.height, clip_scene.width)?;
        self.loss.validate(Some(scene.height.min(scene.width) >> FINEST_SCALE))?;
        self.train.validate()?;
        if !(self.data.flow.max_displacement >= 0.0) {
            return Err(Error::config("data.flow.max_displacement", "must be non-negative"));
        }
        if self.data.eval_samples == 0 {
            return Err(Error::config("data.eval_samples", "must be positive"));
        }
        let s = &self.stacked;
        self.stacked.normalization().validate()?;
        if s.classes != self.data.clips.classes.len() {
            return Err(Error::config(
                "stacked.classes",
                format!("{} classes but data.clips lists {}", s.classes, self.data.clips.classes.len()),
            ));
        }
        if s.head_width == 0 || s.batch_size == 0 {
            return Err(Error::config("stacked.head_width", "head width and batch size must be positive"));
        }
        if !(s.learning_rate > 0.0) {
            return Err(Error::config("stacked.learning_rate", "must be positive"));
        }
        if s.motion_learning_rate.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::config("stacked.motion_learning_rate", "must be positive"));
        }
        if !(s.action_weight >= 0.0 && s.unsup_weight >= 0.0) {
            return Err(Error::config("stacked.action_weight", "loss weights must be non-negative"));
        }
        if !(s.fusion_weights.iter().all(|w| *w >= 0.0) && s.fusion_weights.iter().any(|w| *w > 0.0)) {
            return Err(Error::config("stacked.fusion_weights", "must be non-negative and not both zero"));
        }
        Ok(())
    }
}
