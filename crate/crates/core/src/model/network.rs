use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::layout::{Attn, FeedForward, Linear, Norm};
use super::{Activation, AttentionRecord, AttentionSide, Mode, Model};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{TokenId, TokenSequence, BOS, PAD};
use crate::error::{Error, Result};

/// Encoder output for one history, kept for repeated decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `[len × d_model]` final encoder states.
    pub states: Tensor,
    /// Encoder input tokens (for the key padding mask).
    pub tokens: Vec<TokenId>,
}

type Capture<'c> = Option<&'c mut Vec<AttentionRecord>>;

struct HeadLabels<'a> {
    side: AttentionSide,
    layer: usize,
    queries: &'a [TokenId],
    keys: &'a [TokenId],
}

/// `[rows × cols]` additive mask: 0 where attention is allowed, -inf
/// elsewhere.
fn mask_tensor(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !allowed(r, c) {
                data[r * cols + c] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::matrix(rows, cols, data).expect("mask shape")
}

fn key_padding_mask(g: &mut Graph, rows: usize, keys: &[TokenId]) -> Option<Var> {
    if !keys.contains(&PAD) {
        return None;
    }
    Some(g.constant(mask_tensor(rows, keys.len(), |_, c| keys[c] != PAD)))
}

impl Model {
    fn p(&self, g: &mut Graph, id: crate::autodiff::ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, lin: Linear, x: Var) -> Result<Var> {
        let w = self.p(g, lin.w);
        let b = self.p(g, lin.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: Var) -> Result<Var> {
        let gamma = self.p(g, n.g);
        let beta = self.p(g, n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.config.dropout_prob;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let shape = g.value(x).shape().to_vec();
                let data = (0..g.value(x).len())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = g.constant(Tensor::new(shape, data)?);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn feed_forward(&self, g: &mut Graph, ff: FeedForward, x: Var) -> Result<Var> {
        let w1 = self.p(g, ff.w1);
        let b1 = self.p(g, ff.b1);
        let w2 = self.p(g, ff.w2);
        let b2 = self.p(g, ff.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = match self.config.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        let y = g.matmul(h, w2)?;
        g.add_bias(y, b2)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        a: &Attn,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
        capture: &mut Capture<'_>,
        labels: HeadLabels<'_>,
    ) -> Result<Var> {
        let q = self.linear(g, a.q, xq)?;
        let kw = self.p(g, a.k);
        let k = g.matmul(xkv, kw)?;
        let v = self.linear(g, a.v, xkv)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let probs = g.softmax(scores);
            if let Some(records) = capture.as_deref_mut() {
                let p = g.value(probs);
                records.push(AttentionRecord {
                    side: labels.side,
                    layer: labels.layer,
                    head: h,
                    weights: (0..p.rows()).map(|r| p.row(r).to_vec()).collect(),
                    query_tokens: labels.queries.to_vec(),
                    key_tokens: labels.keys.to_vec(),
                });
            }
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.linear(g, a.o, cat)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Encoder over `seq`; returns `[len × d_model]` states after the final
    /// layer norm.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        seq: &TokenSequence,
        mode: &mut Mode<'_>,
        mut capture: Capture<'_>,
    ) -> Result<Var> {
        let len = seq.len();
        if len == 0 {
            return Err(Error::Empty("encoder input"));
        }
        self.check_len(len)?;
        if seq.visit_index.len() != len {
            return Err(Error::Shape {
                op: "encode",
                detail: alloc::format!("{len} tokens but {} visit indices", seq.visit_index.len()),
            });
        }
        let lay = &self.layout;
        let tok = self.p(g, lay.tok_emb);
        let pos = self.p(g, lay.pos_emb);
        let vis = self.p(g, lay.visit_emb);
        let positions: Vec<u32> = (0..len as u32).collect();
        let te = g.embedding(tok, &seq.token_ids)?;
        let pe = g.embedding(pos, &positions)?;
        let ve = g.embedding(vis, &seq.visit_index)?;
        let x = g.add(te, pe)?;
        let x = g.add(x, ve)?;
        let x = self.norm(g, lay.enc_emb_ln, x)?;
        let mut x = self.dropout(g, x, mode)?;

        let mask = key_padding_mask(g, len, &seq.token_ids);
        for (l, layer) in lay.encoder.iter().enumerate() {
            let h = self.norm(g, layer.attn_ln, x)?;
            let labels = HeadLabels {
                side: AttentionSide::EncoderSelf,
                layer: l,
                queries: &seq.token_ids,
                keys: &seq.token_ids,
            };
            let a = self.attention(g, &layer.attn, h, h, mask, &mut capture, labels)?;
            let a = self.dropout(g, a, mode)?;
            x = g.add(x, a)?;
            let h = self.norm(g, layer.ff_ln, x)?;
            let f = self.feed_forward(g, layer.ff, h)?;
            let f = self.dropout(g, f, mode)?;
            x = g.add(x, f)?;
        }
        self.norm(g, lay.enc_ln_f, x)
    }

    /// Decoder over `prefix` (which must start with `[BOS]`), attending to
    /// encoder states `enc`. Returns `[prefix_len × d_model]` hidden states.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        enc: Var,
        enc_tokens: &[TokenId],
        prefix: &[TokenId],
        mode: &mut Mode<'_>,
        mut capture: Capture<'_>,
    ) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::InvalidArgument("decoder prefix must begin with [BOS]".into()));
        }
        let t = prefix.len();
        self.check_len(t)?;
        if g.value(enc).rows() != enc_tokens.len() {
            return Err(Error::Shape {
                op: "decode",
                detail: alloc::format!(
                    "{} encoder states for {} encoder tokens",
                    g.value(enc).rows(),
                    enc_tokens.len()
                ),
            });
        }
        let lay = &self.layout;
        let tok = self.p(g, lay.tok_emb);
        let pos = self.p(g, lay.pos_emb);
        let positions: Vec<u32> = (0..t as u32).collect();
        let te = g.embedding(tok, prefix)?;
        let pe = g.embedding(pos, &positions)?;
        let y = g.add(te, pe)?;
        let y = self.norm(g, lay.dec_emb_ln, y)?;
        let mut y = self.dropout(g, y, mode)?;

        let causal = (t > 1).then(|| g.constant(mask_tensor(t, t, |r, c| c <= r)));
        let cross_mask = key_padding_mask(g, t, enc_tokens);
        for (l, layer) in lay.decoder.iter().enumerate() {
            let h = self.norm(g, layer.self_ln, y)?;
            let labels = HeadLabels {
                side: AttentionSide::DecoderSelf,
                layer: l,
                queries: prefix,
                keys: prefix,
            };
            let a = self.attention(g, &layer.self_attn, h, h, causal, &mut capture, labels)?;
            let a = self.dropout(g, a, mode)?;
            y = g.add(y, a)?;

            let h = self.norm(g, layer.cross_ln, y)?;
            let labels = HeadLabels {
                side: AttentionSide::Cross,
                layer: l,
                queries: prefix,
                keys: enc_tokens,
            };
            let c = self.attention(g, &layer.cross_attn, h, enc, cross_mask, &mut capture, labels)?;
            let c = self.dropout(g, c, mode)?;
            y = g.add(y, c)?;

            let h = self.norm(g, layer.ff_ln, y)?;
            let f = self.feed_forward(g, layer.ff, h)?;
            let f = self.dropout(g, f, mode)?;
            y = g.add(y, f)?;
        }
        self.norm(g, lay.dec_ln_f, y)
    }

    /// Tied output projection: `hidden · tok_embᵀ + lm_bias`.
    pub fn logits_graph(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let tok = self.p(g, self.layout.tok_emb);
        let bias = self.p(g, self.layout.lm_bias);
        let logits = g.matmul_t(hidden, tok)?;
        g.add_bias(logits, bias)
    }

    /// Teacher-forced next-visit cross-entropy, averaged over non-pad target
    /// positions.
    pub fn seq2seq_loss_graph(
        &self,
        g: &mut Graph,
        input: &TokenSequence,
        target: &[TokenId],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Empty("decoder target"));
        }
        let enc = self.encode_graph(g, input, mode, None)?;
        let mut prefix = Vec::with_capacity(target.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&target[..target.len() - 1]);
        let hidden = self.decode_graph(g, enc, &input.token_ids, &prefix, mode, None)?;
        let logits = self.logits_graph(g, hidden)?;
        g.cross_entropy(logits, target, PAD)
    }

    /// Encoder-only masked-token objective: predicts `original_ids` at
    /// `masked_positions` from the encoder states through the tied
    /// projection. The decoder is not used.
    pub fn mlm_loss_graph(
        &self,
        g: &mut Graph,
        input: &TokenSequence,
        masked_positions: &[usize],
        original_ids: &[TokenId],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if masked_positions.is_empty() {
            return Err(Error::Empty("masked positions"));
        }
        if masked_positions.len() != original_ids.len() {
            return Err(Error::Shape {
                op: "mlm_loss",
                detail: alloc::format!(
                    "{} positions vs {} original ids",
                    masked_positions.len(),
                    original_ids.len()
                ),
            });
        }
        if let Some(&bad) = masked_positions.iter().find(|&&p| p >= input.len()) {
            return Err(Error::OutOfRange {
                what: "masked position",
                index: bad,
                len: input.len(),
            });
        }
        let enc = self.encode_graph(g, input, mode, None)?;
        let rows: Vec<u32> = masked_positions.iter().map(|&p| p as u32).collect();
        let picked = g.embedding(enc, &rows)?;
        let logits = self.logits_graph(g, picked)?;
        g.cross_entropy(logits, original_ids, PAD)
    }

    /// Risk logit `[1 × 1]`: the decoder runs one step from `[BOS]` over the
    /// encoded history and its hidden state feeds the linear risk head.
    pub fn risk_logit_graph(&self, g: &mut Graph, input: &TokenSequence, mode: &mut Mode<'_>) -> Result<Var> {
        let enc = self.encode_graph(g, input, mode, None)?;
        let hidden = self.decode_graph(g, enc, &input.token_ids, &[BOS], mode, None)?;
        let w = self.p(g, self.layout.risk.w);
        let b = self.p(g, self.layout.risk.b);
        let z = g.matmul(hidden, w)?;
        g.add_bias(z, b)
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Encoded> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, seq, &mut Mode::Eval, None)?;
        Ok(Encoded {
            states: g.value(enc).clone(),
            tokens: seq.token_ids.clone(),
        })
    }

    /// Logits `[prefix_len × vocab_size]` for a decoder prefix.
    pub fn decode_logits(&self, prefix: &[TokenId], enc: &Encoded) -> Result<Tensor> {
        let mut g = Graph::new();
        let states = g.constant(enc.states.clone());
        let hidden = self.decode_graph(&mut g, states, &enc.tokens, prefix, &mut Mode::Eval, None)?;
        let logits = self.logits_graph(&mut g, hidden)?;
        Ok(g.value(logits).clone())
    }

    pub fn seq2seq_loss(&self, input: &TokenSequence, target: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.seq2seq_loss_graph(&mut g, input, target, &mut Mode::Eval)?;
        Ok(g.value(loss).item())
    }

    pub fn encoder_only_mlm_loss(
        &self,
        input: &TokenSequence,
        masked_positions: &[usize],
        original_ids: &[TokenId],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.mlm_loss_graph(&mut g, input, masked_positions, original_ids, &mut Mode::Eval)?;
        Ok(g.value(loss).item())
    }

    /// Probability from the risk head, evaluation mode.
    pub fn risk_score(&self, input: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let z = self.risk_logit_graph(&mut g, input, &mut Mode::Eval)?;
        Ok(crate::autodiff::sigmoid(g.value(z).item()))
    }

    /// Every attention map (encoder self, decoder self, cross) for one
    /// history and decoder prefix, evaluation mode.
    pub fn capture_attention(&self, history: &TokenSequence, prefix: &[TokenId]) -> Result<Vec<AttentionRecord>> {
        let mut records = Vec::new();
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, history, &mut Mode::Eval, Some(&mut records))?;
        self.decode_graph(
            &mut g,
            enc,
            &history.token_ids,
            prefix,
            &mut Mode::Eval,
            Some(&mut records),
        )?;
        Ok(records)
    }
}
