//! Test-time training: losses, confidence selection and the episodic engine.
//!
//! An episode adapts a fresh set of adapters to a single unlabeled test
//! image and resets them before the next image, so every prediction is a
//! pure function of the base model, the text table, the configuration, the
//! run seed and the instance.

mod engine;
mod losses;
mod output;
mod pretrain;

pub use engine::{run_stream, Engine, EpisodeResult, Instance, StreamOutput, TokenCounts};
pub use losses::{entropy, mae_loss, mem_loss, mem_loss_value, select_confident, selection_size, total_loss};
pub use output::{merge_reports, read_report, write_run, RunReport};
pub use pretrain::{contrastive_eval, lora_pretrain, LoraPretrainConfig, PretrainLog};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::VitConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::views::AugmentConfig;

/// Which adaptation an engine runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No adaptation.
    ZeroShot,
    /// LoRA with both losses.
    LoraTtt,
    /// LoRA, entropy loss only.
    LoraTttM,
    /// LoRA, reconstruction loss only.
    LoraTttA,
    /// Direct tuning of the targeted projections.
    FullTune,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::ZeroShot, Mode::LoraTtt, Mode::LoraTttM, Mode::LoraTttA, Mode::FullTune];

    /// Name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero-shot",
            Mode::LoraTtt => "lora-ttt",
            Mode::LoraTttM => "lora-ttt-m",
            Mode::LoraTttA => "lora-ttt-a",
            Mode::FullTune => "full-tune",
        }
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, Mode::LoraTtt | Mode::LoraTttM | Mode::LoraTttA)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

/// What the reconstruction loss compares between masked and unmasked passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    ClassToken,
    VisualTokens,
}

/// Every knob of a test-time run. Serialized in full as the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    /// Weight of the marginal entropy loss.
    pub lambda_mem: f64,
    /// Weight of the masked reconstruction loss.
    pub lambda_mae: f64,
    /// Fraction of lowest-entropy views kept.
    pub cutoff: f64,
    pub num_views: usize,
    pub mask_ratio: f64,
    pub recon_target: ReconTarget,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lora: LoraConfig,
    pub mode: Mode,
    pub seed: u64,
    /// Stop gradients through the unmasked branch of the reconstruction loss.
    pub detach_target: bool,
    pub augment: AugmentConfig,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            lambda_mem: 1.0,
            lambda_mae: 16.0,
            cutoff: 0.1,
            num_views: 64,
            mask_ratio: 0.5,
            recon_target: ReconTarget::ClassToken,
            steps: 1,
            lr: 1e-3,
            weight_decay: 0.2,
            lora: LoraConfig::default(),
            mode: Mode::LoraTtt,
            seed: 0,
            detach_target: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl TttConfig {
    /// Switches mode and zeroes the loss weight that mode excludes.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        match mode {
            Mode::LoraTttM => self.lambda_mae = 0.0,
            Mode::LoraTttA => self.lambda_mem = 0.0,
            _ => {}
        }
        self
    }

    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.lambda_mem) || !finite_nonneg(self.lambda_mae) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::invalid(format!("cutoff {} outside (0, 1]", self.cutoff)));
        }
        if self.num_views == 0 {
            return Err(Error::invalid("at least one view is required"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("at least one optimization step is required"));
        }
        if !finite_nonneg(self.lr) || !finite_nonneg(self.weight_decay) {
            return Err(Error::invalid("learning rate and weight decay must be finite and non-negative"));
        }
        let (mem, mae) = (self.lambda_mem > 0.0, self.lambda_mae > 0.0);
        match self.mode {
            Mode::LoraTttM if mae => return Err(Error::invalid("lora-ttt-m requires lambda_mae = 0")),
            Mode::LoraTttA if mem => return Err(Error::invalid("lora-ttt-a requires lambda_mem = 0")),
            Mode::LoraTtt if mem != mae => {
                return Err(Error::invalid(
                    "lora-ttt with a single active loss is lora-ttt-m or lora-ttt-a; use that mode",
                ))
            }
            _ => {}
        }
        if self.mode.uses_lora() {
            self.lora.validate(vit)?;
        }
        let a = &self.augment;
        if !(a.scale.0 > 0.0 && a.scale.0 <= a.scale.1) || !(a.ratio.0 > 0.0 && a.ratio.0 <= a.ratio.1) {
            return Err(Error::invalid("augmentation ranges must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&a.flip_prob) {
            return Err(Error::invalid("flip probability outside [0, 1]"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
