//! Encoder-decoder transformer over flattened visit histories.
//!
//! The encoder reads the (possibly corrupted) history with full
//! bidirectional self-attention; the decoder generates the next visit's codes
//! left to right with causal self-attention and cross-attention into the
//! encoder. Input and output token embeddings are tied. A logistic risk head
//! on the decoder's first hidden state serves single-outcome fine-tuning.

mod attention;
mod layout;
mod network;

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub use attention::{AttentionRecord, AttentionSide};
pub use layout::expected_shapes;
use layout::Layout;
pub use network::Encoded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_prob: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 128,
            max_seq_len: 256,
            dropout_prob: 0.1,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model {name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout_prob {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Forward-pass mode. Dropout is only active in training.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Configuration plus parameters, with resolved parameter handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Model {
    /// Random initialization: embeddings ~ N(0, 0.02²), projections
    /// ~ N(0, 1/fan_in), biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamSet::new();
        for (name, shape) in expected_shapes(&config) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("_emb") {
                normal(&mut rng, 0.02, len)
            } else if name.ends_with(".g") {
                alloc::vec![1.0; len]
            } else if name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2") {
                normal(&mut rng, 1.0 / libm::sqrt(shape[0] as f64), len)
            } else {
                alloc::vec![0.0; len]
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking every name and shape against
    /// `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access for optimizers; shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamSet) {
        (self.config, self.params)
    }
}

fn normal(rng: &mut Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests;
