//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]`,
//! `[loss]` and `[eval]` sections plus a top-level `seed`.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! num_classes = 4
//!
//! [[data.shortcuts]]
//! kind = "background_color"
//! correlation = 0.95
//!
//! [train]
//! epochs = 30
//! ablate = ["s-i"]
//! ```
//!
//! Every key is optional. [`MimuConfig::effective`] resolves modality
//! defaults and ablation switches into concrete values; that resolved form
//! is what run artifacts record and hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MimuError, Result};
use crate::hashing::sha256_hex;
use crate::losses::{mask_and_top_m, LossWeights};
use crate::model::ModelSettings;
use crate::synthdata::{DatasetConfig, Modality};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    #[default]
    Fresh,
    /// Start the target from the trained source weights.
    Copy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlattRefit {
    /// Fit once after the last epoch.
    #[default]
    Final,
    EveryEpoch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(P_t || P_s)`.
    #[default]
    TargetSource,
    /// `KL(P_s || P_t)`, the usual teacher-first form.
    SourceTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Train the source with plain cross-entropy.
    #[serde(rename = "s-c")]
    SelfCalibration,
    /// Drop the alignment term and masking.
    #[serde(rename = "s-i")]
    SelfImprovement,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::SelfCalibration => "s-c",
            Ablation::SelfImprovement => "s-i",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = MimuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-c" => Ok(Ablation::SelfCalibration),
            "s-i" => Ok(Ablation::SelfImprovement),
            other => Err(MimuError::config("train.ablate", format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub target_init: TargetInit,
    pub platt_refit: PlattRefit,
    pub ablate: Vec<Ablation>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            grad_clip: 5.0,
            target_init: TargetInit::Fresh,
            platt_refit: PlattRefit::Final,
            ablate: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub lambda_c: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub temperature: f64,
    /// Fraction of the `l` positions masked per batch. Unset means 0.1 for
    /// images and 0.2 for text.
    pub mask_fraction: Option<f64>,
    /// Fraction of the unmasked differences averaged by the alignment loss.
    pub top_m_fraction: f64,
    pub kd_direction: KdDirection,
    /// Keep the class-token position out of masking and alignment.
    pub exclude_class_token: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            lambda_c: 1.0,
            lambda_1: 0.5,
            lambda_2: 0.5,
            temperature: 2.0,
            mask_fraction: None,
            top_m_fraction: 0.5,
            kd_direction: KdDirection::TargetSource,
            exclude_class_token: false,
        }
    }
}

impl LossSettings {
    pub fn default_mask_fraction(modality: Modality) -> f64 {
        match modality {
            Modality::Image => 0.1,
            Modality::Text => 0.2,
        }
    }

    pub fn mask_fraction_for(&self, modality: Modality) -> f64 {
        self.mask_fraction
            .unwrap_or_else(|| Self::default_mask_fraction(modality))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ece_bins: usize,
    /// OOD splits are scored every this many epochs and at the last one.
    pub ood_every: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ece_bins: 15,
            ood_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimuConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub loss: LossSettings,
    pub eval: EvalSettings,
}

impl Default for MimuConfig {
    fn default() -> Self {
        MimuConfig {
            seed: 0,
            data: DatasetConfig::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            loss: LossSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl MimuConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MimuConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            let message = e.message().trim().to_string();
            let key = message
                .split('`')
                .nth(1)
                .filter(|_| message.contains("unknown field"))
                .map(str::to_string)
                .unwrap_or_else(|| "<toml>".into());
            let reason = match line {
                Some(l) => format!("line {l}: {message}"),
                None => message,
            };
            MimuError::Config { key, reason }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MimuError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// sha256 of [`MimuConfig::to_toml_string`].
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(MimuError::config("train.epochs", "must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(MimuError::config("train.batch_size", "must be >= 1"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(MimuError::config("train.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(MimuError::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(t.grad_clip >= 0.0 && t.grad_clip.is_finite()) {
            return Err(MimuError::config("train.grad_clip", "must be >= 0"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(MimuError::config("train.weight_decay", "must be >= 0"));
        }
        let frac = self.loss.mask_fraction_for(self.data.modality);
        if !(0.0..1.0).contains(&frac) {
            return Err(MimuError::config(
                "loss.mask_fraction",
                format!("{frac} must lie in [0, 1)"),
            ));
        }
        if !(self.loss.top_m_fraction > 0.0 && self.loss.top_m_fraction <= 1.0) {
            return Err(MimuError::config("loss.top_m_fraction", "must lie in (0, 1]"));
        }
        if self.eval.ece_bins == 0 {
            return Err(MimuError::config("eval.ece_bins", "must be >= 1"));
        }
        if self.eval.ood_every == 0 {
            return Err(MimuError::config("eval.ood_every", "must be >= 1"));
        }
        let l = self.data.input_shape().seq_len();
        let eligible = self.alignment_positions(l);
        let (n, m) = mask_and_top_m(eligible, frac, self.loss.top_m_fraction);
        self.loss_weights(l)?.validate(eligible, n)?;
        debug_assert!(m >= 1);
        Ok(())
    }

    /// Positions that take part in masking and alignment.
    pub fn alignment_positions(&self, seq_len: usize) -> usize {
        let has_cls = self.data.modality == Modality::Image;
        if self.loss.exclude_class_token && has_cls {
            seq_len - 1
        } else {
            seq_len
        }
    }

    pub fn loss_weights(&self, seq_len: usize) -> Result<LossWeights> {
        let eligible = self.alignment_positions(seq_len);
        if eligible < 2 {
            return Err(MimuError::config("loss.exclude_class_token", "fewer than two positions left"));
        }
        let frac = self.loss.mask_fraction_for(self.data.modality);
        let (_, m) = mask_and_top_m(eligible, frac, self.loss.top_m_fraction);
        Ok(LossWeights {
            lambda_c: self.loss.lambda_c,
            lambda_1: self.loss.lambda_1,
            lambda_2: self.loss.lambda_2,
            temperature: self.loss.temperature,
            top_m: m,
        })
    }

    pub fn has_ablation(&self, a: Ablation) -> bool {
        self.train.ablate.contains(&a)
    }

    /// Resolves the modality mask default and applies ablations:
    /// `s-c` sets `lambda_c = 0`, `s-i` sets `lambda_2 = 0` and
    /// `mask_fraction = 0`.
    pub fn effective(&self) -> MimuConfig {
        let mut c = self.clone();
        c.loss.mask_fraction = Some(c.loss.mask_fraction_for(c.data.modality));
        c.train.ablate.sort();
        c.train.ablate.dedup();
        if c.has_ablation(Ablation::SelfCalibration) {
            c.loss.lambda_c = 0.0;
        }
        if c.has_ablation(Ablation::SelfImprovement) {
            c.loss.lambda_2 = 0.0;
            c.loss.mask_fraction = Some(0.0);
        }
        c
    }
}
