//! Configuration types for the model, losses, data shift, and training.
//!
//! Every weight lives in exactly one section: the adversarial loss weights
//! in [`AlignmentConfig`], the consistency weights in
//! [`ConsistencyConfig`], and the optimization schedule in
//! [`TrainConfig`]. A run serializes the resolved [`ExperimentConfig`] it
//! actually used next to its outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Detection transformer dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of backbone feature levels L.
    pub num_levels: usize,
    /// Token embedding width C.
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    /// Object query count M.
    pub num_object_queries: usize,
    pub num_heads: usize,
    /// Foreground class count K; the background class is index K.
    pub num_classes: usize,
    /// (height, width) of input images.
    pub image_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_levels: 1,
            hidden_dim: 64,
            num_encoder_layers: 3,
            num_decoder_layers: 3,
            num_object_queries: 20,
            num_heads: 4,
            num_classes: 3,
            image_size: (64, 64),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.num_levels < 1 {
            return Err(CoreError::Config("num_levels must be >= 1".into()));
        }
        if self.num_encoder_layers < 1 || self.num_decoder_layers < 1 {
            return Err(CoreError::Config(
                "encoder and decoder need at least one layer".into(),
            ));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_object_queries == 0 {
            return Err(CoreError::Config("num_object_queries must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(CoreError::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Background (no-object) class index.
    pub fn background_class(&self) -> usize {
        self.num_classes
    }
}

/// Weights of the adversarial alignment losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Balance of the encoder domain-query loss inside the hierarchy.
    pub lambda_enc_q: f64,
    /// Balance of the decoder domain-query loss inside the hierarchy.
    pub lambda_dec_q: f64,
    /// Weight of the encoder alignment total in the training objective.
    pub lambda_enc: f64,
    /// Weight of the decoder alignment total in the training objective.
    pub lambda_dec: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda_enc_q: 0.1,
            lambda_dec_q: 0.1,
            lambda_enc: 1.0,
            lambda_dec: 1.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, v) in [
            ("lambda_enc_q", self.lambda_enc_q),
            ("lambda_dec_q", self.lambda_dec_q),
            ("lambda_enc", self.lambda_enc),
            ("lambda_dec", self.lambda_dec),
        ] {
            if !(v >= 0.0) {
                return Err(CoreError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Domains on which the matching-consistency loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyOn {
    Source,
    Target,
    Both,
}

/// Weights of the bipartite matching consistency regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Balance of the box L1 term against the JSD term.
    pub lambda_l1: f64,
    /// Weight of the consistency total in the training objective.
    pub lambda_cons: f64,
    pub apply_on: ApplyOn,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_cons: 1.0,
            apply_on: ApplyOn::Both,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lambda_l1 >= 0.0) || !(self.lambda_cons >= 0.0) {
            return Err(CoreError::Config(
                "consistency weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Photometric shift applied to target-domain scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    /// Fog density; attenuation is exp(-density * depth).
    pub fog_density: f64,
    pub haze_color: [f64; 3],
    pub contrast_scale: f64,
    /// Rotation of RGB around the gray axis, radians.
    pub hue_rotation: f64,
    pub noise_std: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self::fog()
    }
}

impl ShiftConfig {
    /// Identity shift: target images equal source images per seed.
    pub fn none() -> Self {
        Self {
            fog_density: 0.0,
            haze_color: [1.0, 1.0, 1.0],
            contrast_scale: 1.0,
            hue_rotation: 0.0,
            noise_std: 0.0,
        }
    }

    /// Default foggy-target preset.
    pub fn fog() -> Self {
        Self {
            fog_density: 1.4,
            haze_color: [0.82, 0.84, 0.88],
            contrast_scale: 0.8,
            hue_rotation: 0.35,
            noise_std: 0.03,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::none()),
            "fog" => Some(Self::fog()),
            _ => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.fog_density == 0.0
            && self.contrast_scale == 1.0
            && self.hue_rotation == 0.0
            && self.noise_std == 0.0
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.fog_density >= 0.0) {
            return Err(CoreError::Config("fog_density must be >= 0".into()));
        }
        if self.haze_color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(CoreError::Config("haze_color must lie in [0,1]".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CoreError::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training arm: plain supervised baseline, backbone-level alignment, or
/// full sequence feature alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    SourceOnly,
    DaCnn,
    Sfa,
}

impl Arm {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "source_only" => Some(Self::SourceOnly),
            "da_cnn" => Some(Self::DaCnn),
            "sfa" => Some(Self::Sfa),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SourceOnly => "source_only",
            Self::DaCnn => "da_cnn",
            Self::Sfa => "sfa",
        }
    }
}

/// Toggles for the additive loss terms, mirroring the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub dqfa_enc: bool,
    pub dqfa_dec: bool,
    pub tda_enc: bool,
    pub tda_dec: bool,
    /// When false, alignment uses only the last encoder/decoder layer.
    pub hierarchical: bool,
    /// Bipartite matching consistency.
    pub bmc: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            dqfa_enc: true,
            dqfa_dec: true,
            tda_enc: true,
            tda_dec: true,
            hierarchical: true,
            bmc: true,
        }
    }
}

impl AblationFlags {
    /// Parses a comma-separated list of flags to disable, e.g. "bmc,hr".
    pub fn with_disabled(mut self, list: &str) -> Result<Self, CoreError> {
        for raw in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match raw {
                "dqfa_enc" => self.dqfa_enc = false,
                "dqfa_dec" => self.dqfa_dec = false,
                "dqfa" | "dq" => {
                    self.dqfa_enc = false;
                    self.dqfa_dec = false;
                }
                "tda_enc" => self.tda_enc = false,
                "tda_dec" => self.tda_dec = false,
                "tda" | "tw" => {
                    self.tda_enc = false;
                    self.tda_dec = false;
                }
                "hierarchical" | "hr" => self.hierarchical = false,
                "bmc" => self.bmc = false,
                other => {
                    return Err(CoreError::Config(format!(
                        "unknown ablation flag: {other}"
                    )))
                }
            }
        }
        Ok(self)
    }
}

/// Adam optimizer schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    /// Epoch index from which the decayed learning rate applies.
    pub lr_decay_epoch: usize,
    pub decay_factor: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 2e-4,
            lr_decay_epoch: 40,
            decay_factor: 0.1,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Training loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arm: Arm,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Scenes per domain per step; source and target batches are
    /// equal-sized and stepped together.
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arm: Arm::Sfa,
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            batch_size: 4,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, serialized back as `resolved.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub alignment: AlignmentConfig,
    pub consistency: ConsistencyConfig,
    pub train: TrainConfig,
    pub shift: ShiftConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.model.validate()?;
        self.alignment.validate()?;
        self.consistency.validate()?;
        self.train.validate()?;
        self.shift.validate()?;
        let any_loss = true; // detection loss is always active
        if !any_loss {
            return Err(CoreError::Config("no loss term is active".into()));
        }
        Ok(())
    }
}
