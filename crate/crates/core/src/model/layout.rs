use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::autodiff::{ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Attn {
    pub q: Linear,
    /// Keys carry no bias: softmax is invariant to it.
    pub k: ParamId,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayer {
    pub attn_ln: Norm,
    pub attn: Attn,
    pub ff_ln: Norm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayer {
    pub self_ln: Norm,
    pub self_attn: Attn,
    pub cross_ln: Norm,
    pub cross_attn: Attn,
    pub ff_ln: Norm,
    pub ff: FeedForward,
}

/// Resolved handles for every named parameter.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub visit_emb: ParamId,
    pub enc_emb_ln: Norm,
    pub encoder: Vec<EncoderLayer>,
    pub enc_ln_f: Norm,
    pub dec_emb_ln: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_ln_f: Norm,
    pub lm_bias: ParamId,
    pub risk: Linear,
}

fn push_norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), vec![d]));
    out.push((format!("{prefix}.b"), vec![d]));
}

fn push_attn(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}.w"), vec![d, d]));
        if p != "k" {
            out.push((format!("{prefix}.{p}.b"), vec![d]));
        }
    }
}

fn push_ff(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, d_ff: usize) {
    out.push((format!("{prefix}.w1"), vec![d, d_ff]));
    out.push((format!("{prefix}.b1"), vec![d_ff]));
    out.push((format!("{prefix}.w2"), vec![d_ff, d]));
    out.push((format!("{prefix}.b2"), vec![d]));
}

/// Every parameter name with its shape, in canonical order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".into(), vec![cfg.vocab_size, d]),
        ("pos_emb".into(), vec![cfg.max_seq_len, d]),
        ("visit_emb".into(), vec![cfg.max_seq_len, d]),
    ];
    push_norm(&mut out, "enc.emb_ln", d);
    for l in 0..cfg.n_encoder_layers {
        push_norm(&mut out, &format!("enc.{l}.attn_ln"), d);
        push_attn(&mut out, &format!("enc.{l}.self"), d);
        push_norm(&mut out, &format!("enc.{l}.ff_ln"), d);
        push_ff(&mut out, &format!("enc.{l}.ff"), d, cfg.d_ff);
    }
    push_norm(&mut out, "enc.ln_f", d);
    push_norm(&mut out, "dec.emb_ln", d);
    for l in 0..cfg.n_decoder_layers {
        push_norm(&mut out, &format!("dec.{l}.self_ln"), d);
        push_attn(&mut out, &format!("dec.{l}.self"), d);
        push_norm(&mut out, &format!("dec.{l}.cross_ln"), d);
        push_attn(&mut out, &format!("dec.{l}.cross"), d);
        push_norm(&mut out, &format!("dec.{l}.ff_ln"), d);
        push_ff(&mut out, &format!("dec.{l}.ff"), d, cfg.d_ff);
    }
    push_norm(&mut out, "dec.ln_f", d);
    out.push(("lm_bias".into(), vec![cfg.vocab_size]));
    out.push(("risk.w".into(), vec![d, 1]));
    out.push(("risk.b".into(), vec![1]));
    out
}

struct Resolver<'a> {
    params: &'a ParamSet,
}

impl Resolver<'_> {
    fn id(&self, name: &str) -> Result<ParamId> {
        self.params.id(name).ok_or_else(|| Error::Shape {
            op: "parameters",
            detail: format!("missing parameter {name}"),
        })
    }

    fn norm(&self, p: &str) -> Result<Norm> {
        Ok(Norm {
            g: self.id(&format!("{p}.g"))?,
            b: self.id(&format!("{p}.b"))?,
        })
    }

    fn linear(&self, p: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.id(&format!("{p}.w"))?,
            b: self.id(&format!("{p}.b"))?,
        })
    }

    fn attn(&self, p: &str) -> Result<Attn> {
        Ok(Attn {
            q: self.linear(&format!("{p}.q"))?,
            k: self.id(&format!("{p}.k.w"))?,
            v: self.linear(&format!("{p}.v"))?,
            o: self.linear(&format!("{p}.o"))?,
        })
    }

    fn ff(&self, p: &str) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: self.id(&format!("{p}.w1"))?,
            b1: self.id(&format!("{p}.b1"))?,
            w2: self.id(&format!("{p}.w2"))?,
            b2: self.id(&format!("{p}.b2"))?,
        })
    }
}

impl Layout {
    pub fn resolve(cfg: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let expected = expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = params.by_name(name).ok_or_else(|| Error::Shape {
                op: "parameters",
                detail: format!("missing parameter {name}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameters",
                    detail: format!("{name}: expected {shape:?}, found {:?}", t.shape()),
                });
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Shape {
                op: "parameters",
                detail: format!("expected {} tensors, found {}", expected.len(), params.len()),
            });
        }
        let r = Resolver { params };
        Ok(Layout {
            tok_emb: r.id("tok_emb")?,
            pos_emb: r.id("pos_emb")?,
            visit_emb: r.id("visit_emb")?,
            enc_emb_ln: r.norm("enc.emb_ln")?,
            encoder: (0..cfg.n_encoder_layers)
                .map(|l| {
                    Ok(EncoderLayer {
                        attn_ln: r.norm(&format!("enc.{l}.attn_ln"))?,
                        attn: r.attn(&format!("enc.{l}.self"))?,
                        ff_ln: r.norm(&format!("enc.{l}.ff_ln"))?,
                        ff: r.ff(&format!("enc.{l}.ff"))?,
                    })
                })
                .collect::<Result<_>>()?,
            enc_ln_f: r.norm("enc.ln_f")?,
            dec_emb_ln: r.norm("dec.emb_ln")?,
            decoder: (0..cfg.n_decoder_layers)
                .map(|l| {
                    Ok(DecoderLayer {
                        self_ln: r.norm(&format!("dec.{l}.self_ln"))?,
                        self_attn: r.attn(&format!("dec.{l}.self"))?,
                        cross_ln: r.norm(&format!("dec.{l}.cross_ln"))?,
                        cross_attn: r.attn(&format!("dec.{l}.cross"))?,
                        ff_ln: r.norm(&format!("dec.{l}.ff_ln"))?,
                        ff: r.ff(&format!("dec.{l}.ff"))?,
                    })
                })
                .collect::<Result<_>>()?,
            dec_ln_f: r.norm("dec.ln_f")?,
            lm_bias: r.id("lm_bias")?,
            risk: r.linear("risk")?,
        })
    }
}
