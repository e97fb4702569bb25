//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Which sub-networks attend to the context embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain transformer transducer, no context.
    #[serde(rename = "tt")]
    Tt,
    /// Audio embeddings query the context.
    #[serde(rename = "catt-audio-q")]
    CattAudio,
    /// Audio and label embeddings both query the context.
    #[serde(rename = "catt-audio-label-q")]
    CattAudioLabel,
}

impl Variant {
    pub fn uses_context(self) -> bool {
        !matches!(self, Variant::Tt)
    }

    pub fn biases_labels(self) -> bool {
        matches!(self, Variant::CattAudioLabel)
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tt" => Ok(Self::Tt),
            "catt-audio-q" => Ok(Self::CattAudio),
            "catt-audio-label-q" => Ok(Self::CattAudioLabel),
            other => Err(config(format!("unknown variant {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextEncoderKind {
    /// Trainable bidirectional LSTM over phrase tokens.
    Blstm,
    /// Frozen vectors loaded from an embedding file.
    PretrainedFrozen,
}

/// Activation applied to the biasing query/key/value projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Frames visible to the left of `t`.
    pub window_left: usize,
    /// Frames visible to the right of `t`.
    pub window_right: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Number of previous non-blank tokens fed to the label encoder.
    pub history: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoderConfig {
    pub kind: ContextEncoderKind,
    /// Width of a context embedding.
    pub d_c: usize,
    /// Token embedding width fed to the BLSTM.
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasingConfig {
    /// Attention width.
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    /// Output width of the combiner.
    pub d_ca: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Per-frame feature width.
    pub input_dim: usize,
    /// Number of non-blank output tokens; blank is index `vocab_size`.
    pub vocab_size: usize,
    pub audio: AudioEncoderConfig,
    pub label: LabelEncoderConfig,
    pub context: ContextEncoderConfig,
    pub biasing: BiasingConfig,
    pub joint_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CattAudio,
            input_dim: 16,
            vocab_size: 64,
            audio: AudioEncoderConfig {
                layers: 2,
                d_model: 32,
                heads: 2,
                window_left: 8,
                window_right: 8,
                ffn_dim: 64,
            },
            label: LabelEncoderConfig {
                layers: 1,
                d_model: 32,
                heads: 2,
                history: 4,
                ffn_dim: 64,
            },
            context: ContextEncoderConfig {
                kind: ContextEncoderKind::Blstm,
                d_c: 32,
                embed_dim: 16,
            },
            biasing: BiasingConfig {
                d: 32,
                heads: 2,
                blocks: 2,
                ffn_dim: 64,
                activation: Activation::Tanh,
                d_ca: 32,
            },
            joint_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("vocab_size", self.vocab_size),
            ("audio.layers", self.audio.layers),
            ("audio.d_model", self.audio.d_model),
            ("audio.heads", self.audio.heads),
            ("label.d_model", self.label.d_model),
            ("label.heads", self.label.heads),
            ("joint_dim", self.joint_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !self.audio.d_model.is_multiple_of(self.audio.heads) {
            return Err(config("audio.d_model must be divisible by audio.heads"));
        }
        if !self.label.d_model.is_multiple_of(self.label.heads) {
            return Err(config("label.d_model must be divisible by label.heads"));
        }
        if self.variant.uses_context() {
            let b = &self.biasing;
            if b.blocks == 0 || b.heads == 0 || b.d == 0 || b.d_ca == 0 {
                return Err(config("biasing dims, heads and blocks must be positive"));
            }
            if !b.d.is_multiple_of(b.heads) {
                return Err(config("biasing.d must be divisible by biasing.heads"));
            }
            if self.context.d_c == 0 {
                return Err(config("context.d_c must be positive"));
            }
            if self.context.kind == ContextEncoderKind::Blstm && !self.context.d_c.is_multiple_of(2) {
                return Err(config("BLSTM context width d_c must be even"));
            }
        }
        Ok(())
    }

    /// Width of the audio-side input to the joint network.
    pub fn joint_audio_dim(&self) -> usize {
        if self.variant.uses_context() {
            self.biasing.d_ca
        } else {
            self.audio.d_model
        }
    }

    /// Width of the label-side input to the joint network.
    pub fn joint_label_dim(&self) -> usize {
        if self.variant.biases_labels() {
            self.biasing.d_ca
        } else {
            self.label.d_model
        }
    }
}
