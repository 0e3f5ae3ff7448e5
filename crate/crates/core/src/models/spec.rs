use serde::{Deserialize, Serialize};

use super::ParamKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Fully convolutional regression network: conv/BN/ReLU/pool encoder,
    /// transposed-convolution decoder, no skip connections.
    #[serde(rename = "FCRN", alias = "fcrn")]
    Fcrn,
    /// Lightweight U-Net with skip connections (12 weighted layers at depth 3).
    #[serde(rename = "UNetLight", alias = "unet_light", alias = "unet")]
    UNetLight,
    /// One 3×3 conv/BN/ReLU layer and a 1×1 sigmoid head. Used for
    /// gradient checks and quick experiments.
    #[serde(rename = "TwoLayer", alias = "two_layer")]
    TwoLayer,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcrn" => Ok(Architecture::Fcrn),
            "unetlight" | "unet_light" | "unet" => Ok(Architecture::UNetLight),
            "twolayer" | "two_layer" => Ok(Architecture::TwoLayer),
            other => Err(Error::arg(format!("unsupported architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BnMetaMode {
    /// Normalize with batch statistics; scale and shift are frozen.
    #[default]
    StatsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormPolicy {
    #[serde(default)]
    pub meta_train_mode: BnMetaMode,
    /// Whether fine-tuning may learn the batch-norm scale and shift.
    pub finetune_affine: bool,
}

impl BatchNormPolicy {
    pub fn for_architecture(arch: Architecture) -> Self {
        Self { meta_train_mode: BnMetaMode::StatsOnly, finetune_affine: !matches!(arch, Architecture::UNetLight) }
    }
}

/// Training stage, which decides the trainable subset of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    MetaTrain,
    /// Pooled supervised training of the transfer baseline; follows the
    /// meta-training batch-norm protocol.
    Pretrain,
    FineTune,
}

impl BatchNormPolicy {
    pub fn is_trainable(&self, kind: ParamKind, phase: Phase) -> bool {
        match kind {
            ParamKind::Weight | ParamKind::Bias => true,
            ParamKind::RunningMean | ParamKind::RunningVar => false,
            ParamKind::BnScale | ParamKind::BnShift => match phase {
                Phase::MetaTrain | Phase::Pretrain => match self.meta_train_mode {
                    BnMetaMode::StatsOnly => false,
                },
                Phase::FineTune => self.finetune_affine,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub input_channels: usize,
    /// Channel count of the first encoder stage; stage `i` has `base_width·2^i`.
    pub base_width: usize,
    /// Number of down-sampling stages.
    pub depth: usize,
    /// Index into the weighted-layer table of the layer whose activation is
    /// used for distillation. `None` selects the bottleneck.
    #[serde(default)]
    pub latent_tap: Option<usize>,
    pub bn_policy: BatchNormPolicy,
}

fn one() -> usize {
    1
}

impl NetworkSpec {
    pub fn new(architecture: Architecture, base_width: usize, depth: usize) -> Self {
        Self {
            architecture,
            input_channels: 1,
            base_width,
            depth,
            latent_tap: None,
            bn_policy: BatchNormPolicy::for_architecture(architecture),
        }
    }

    /// Full-scale configuration: widths 32/64/128,
    /// bottleneck 256.
    pub fn full_scale(architecture: Architecture) -> Self {
        Self::new(architecture, 32, 3)
    }

    /// Number of down-sampling stages actually built.
    pub fn effective_depth(&self) -> usize {
        match self.architecture {
            Architecture::TwoLayer => 0,
            _ => self.depth,
        }
    }

    pub fn weighted_layer_count(&self) -> usize {
        let d = self.depth;
        match self.architecture {
            Architecture::Fcrn => 2 * d + 2,
            Architecture::UNetLight => 3 * d + 3,
            Architecture::TwoLayer => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::arg("input_channels and base_width must be positive"));
        }
        if self.architecture != Architecture::TwoLayer && self.depth == 0 {
            return Err(Error::arg("depth must be at least 1"));
        }
        if self.depth > 10 {
            return Err(Error::arg("depth above 10 is not supported"));
        }
        if let Some(tap) = self.latent_tap {
            if tap >= self.weighted_layer_count() {
                return Err(Error::arg(format!(
                    "latent tap {tap} outside the {} weighted layers",
                    self.weighted_layer_count()
                )));
            }
        }
        Ok(())
    }
}
