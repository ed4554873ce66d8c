use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSide {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl AttentionSide {
    pub fn name(self) -> &'static str {
        match self {
            Self::EncoderSelf => "encoder_self",
            Self::DecoderSelf => "decoder_self",
            Self::Cross => "cross",
        }
    }
}

/// Attention weights of one head: rows are query positions, columns key
/// positions, each row a probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub side: AttentionSide,
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<Vec<f64>>,
    pub query_tokens: Vec<TokenId>,
    pub key_tokens: Vec<TokenId>,
}
