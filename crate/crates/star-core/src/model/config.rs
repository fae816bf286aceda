//! Model configuration and compression-method selection.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};

/// Special token ids shared by every vocabulary.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    /// Number of reserved ids before content tokens start.
    pub const SPECIAL_TOKENS: usize = 3;
}

/// Which compression mechanism a model was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// No compression: the decoder sees every frame representation.
    None,
    /// Anchor selection guided by injected segmenter scores.
    Star,
    /// Continuous integrate-and-fire weighted averaging.
    Cif,
    /// Strided convolution over the input frames.
    Cnn,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Star => "star",
            Method::Cif => "cif",
            Method::Cnn => "cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "none" => Ok(Method::None),
            "star" => Ok(Method::Star),
            "cif" => Ok(Method::Cif),
            "cnn" => Ok(Method::Cnn),
            other => Err(StarError::Config(format!(
                "unknown compression method `{other}` (expected none|star|cif|cnn)"
            ))),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Method::None => 0,
            Method::Star => 1,
            Method::Cif => 2,
            Method::Cnn => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Method> {
        match c {
            0 => Ok(Method::None),
            1 => Ok(Method::Star),
            2 => Ok(Method::Cif),
            3 => Ok(Method::Cnn),
            other => Err(StarError::Format(format!("unknown method code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Full vocabulary including PAD/BOS/EOS.
    pub vocab: usize,
    pub max_src_positions: usize,
    pub max_tgt_positions: usize,
    pub frame_dim: usize,
}

impl ModelConfig {
    /// Laptop-scale profile used throughout the tests and experiments.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 256,
            vocab: 67,
            max_src_positions: 512,
            max_tgt_positions: 64,
            frame_dim: 32,
        }
    }

    /// Full-size profile matching the reference hyper-parameters.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            ffn_dim: 2048,
            vocab: 10_000,
            max_src_positions: 1024,
            max_tgt_positions: 512,
            frame_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(StarError::Config(format!(
                "hidden dim {} must be divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 4 {
            return Err(StarError::Config("vocabulary must include specials plus content".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(StarError::Config("encoder and decoder need at least one layer".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
