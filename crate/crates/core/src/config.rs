//! The JSON run configuration shared by training, benchmarking and the CLI.

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationConfig;
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::flow::PseudoLabelConfig;
use crate::rng::PoolKind;
use crate::shiftworld::ShiftWorldConfig;
use crate::train::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Video,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingConfig {
    pub pool: PoolKind,
    pub picks_per_iteration: usize,
    pub include_long_tail: bool,
    pub confidence_threshold: f64,
    pub tau: usize,
}

impl Default for MixingConfig {
    fn default() -> Self {
        let p = PseudoLabelConfig::default();
        Self {
            pool: PoolKind::Things,
            picks_per_iteration: 1,
            include_long_tail: true,
            confidence_threshold: p.confidence_threshold,
            tau: p.tau,
        }
    }
}

impl MixingConfig {
    pub fn pseudo(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            tau: self.tau,
            confidence_threshold: self.confidence_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    /// Leading iterations trained on labelled source data only.
    pub warmup_iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate factor for the linear decoder.
    pub head_lr_multiplier: f64,
    /// Polynomial decay exponent; 0 keeps the learning rate constant.
    pub lr_decay_power: f64,
    /// Gradients longer than this are rescaled to it; 0 disables clipping.
    pub max_grad_norm: f64,
    pub lambda_t: f64,
    /// Target-test mIoU is logged every this many iterations (and at the end).
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            warmup_iterations: 150,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-5,
            head_lr_multiplier: 100.0,
            lr_decay_power: 1.0,
            max_grad_norm: 3.0,
            lambda_t: 1.0,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Pre-generated dataset directory; generated in memory when absent.
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

/// When `variants` is non-empty, `train` runs the multi-seed benchmark.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub dataset: ShiftWorldConfig,
    pub mixing: MixingConfig,
    pub augment: AugmentConfig,
    pub aggregation: AggregationConfig,
    pub training: TrainingConfig,
    pub benchmark: BenchmarkConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.mixing.pseudo().validate()?;
        self.aggregation.validate()?;
        let t = &self.training;
        let ok = t.learning_rate > 0.0
            && (0.0..1.0).contains(&t.momentum)
            && t.weight_decay >= 0.0
            && t.head_lr_multiplier > 0.0
            && t.lr_decay_power >= 0.0
            && t.max_grad_norm >= 0.0
            && t.lambda_t >= 0.0
            && t.eval_every > 0;
        if !ok {
            return Err(Error::Config(
                "training needs lr > 0, momentum in [0, 1), weight_decay >= 0, head_lr_multiplier > 0, lr_decay_power >= 0, max_grad_norm >= 0, lambda_t >= 0, eval_every > 0".into(),
            ));
        }
        if !self.benchmark.variants.is_empty() && self.benchmark.seeds.is_empty() {
            return Err(Error::Config("benchmark variants need at least one seed".into()));
        }
        // The sampled index must leave room for every look-back.
        let need = match self.mode {
            Mode::Video => (self.mixing.tau + 2).max(self.aggregation.max_offset() + 1),
            Mode::Image => 1,
        };
        if self.dataset.clip_length <= need {
            return Err(Error::Config(format!(
                "clip_length {} is too short: video training looks back {need} frames",
                self.dataset.clip_length
            )));
        }
        Ok(())
    }
}
