//! Corruption schemes applied to encoder-input histories during pretraining.
//!
//! Every scheme leaves the demographic prefix and all `[SEP]` delimiters in
//! place; only code tokens change.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_history, target_visit, PatientRecord, TokenId, TokenSequence, Vocabulary, FIRST_CODE, MASK};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[serde(rename = "code")]
    CodeMask,
    #[serde(rename = "permute")]
    VisitPermute,
    #[serde(rename = "span")]
    SpanMask,
    #[serde(rename = "visit")]
    VisitMask,
    None,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::CodeMask,
        Scheme::VisitPermute,
        Scheme::SpanMask,
        Scheme::VisitMask,
        Scheme::None,
    ];

    /// Short name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            Scheme::CodeMask => "code",
            Scheme::VisitPermute => "permute",
            Scheme::SpanMask => "span",
            Scheme::VisitMask => "visit",
            Scheme::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown scheme {s:?}")))
    }
}

/// Scheme selection and rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub scheme: Scheme,
    /// Per-token rate for code masking; coverage target for span masking.
    pub mask_rate: f64,
    pub mean_span: f64,
    pub visit_rate: f64,
    /// Replace masked tokens 80/10/10 with `[MASK]` / random code / original.
    pub random_replace: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            scheme: Scheme::VisitMask,
            mask_rate: 0.15,
            mean_span: 3.0,
            visit_rate: 0.15,
            random_replace: false,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("mask_rate", self.mask_rate), ("visit_rate", self.visit_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(alloc::format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.mean_span >= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "mean_span {} must be >= 1",
                self.mean_span
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisedExample {
    pub corrupted: TokenSequence,
    pub target: Vec<TokenId>,
    pub scheme: Scheme,
}

fn replacement(original: TokenId, random_replace: Option<usize>, rng: &mut Rng) -> TokenId {
    let Some(vocab_len) = random_replace else { return MASK };
    let u: f64 = rng.random();
    if u < 0.8 || vocab_len <= FIRST_CODE as usize {
        MASK
    } else if u < 0.9 {
        rng.random_range(FIRST_CODE..vocab_len as TokenId)
    } else {
        original
    }
}

/// Replaces each code token with `[MASK]` independently with probability
/// `rate`.
pub fn code_mask(seq: &TokenSequence, rate: f64, rng: &mut Rng) -> TokenSequence {
    code_mask_inner(seq, rate, None, rng)
}

/// [`code_mask`] with the 80/10/10 split: a selected token becomes `[MASK]`,
/// a uniformly random code id below `vocab_len`, or stays as it was.
pub fn code_mask_mixed(seq: &TokenSequence, rate: f64, vocab_len: usize, rng: &mut Rng) -> TokenSequence {
    code_mask_inner(seq, rate, Some(vocab_len), rng)
}

fn code_mask_inner(seq: &TokenSequence, rate: f64, mix: Option<usize>, rng: &mut Rng) -> TokenSequence {
    let mut out = seq.clone();
    for i in 0..seq.len() {
        if seq.is_code_position(i) && rng.random::<f64>() < rate {
            out.token_ids[i] = replacement(seq.token_ids[i], mix, rng);
        }
    }
    out
}

/// Masks contiguous runs of code tokens, each collapsed to one `[MASK]`.
///
/// The number of covered code tokens is `rate · n` rounded stochastically,
/// so its expectation equals that of [`code_mask`]. Span lengths are
/// Poisson(`mean_span`) clamped to at least one and never cross a `[SEP]`.
pub fn span_mask(seq: &TokenSequence, rate: f64, mean_span: f64, rng: &mut Rng) -> TokenSequence {
    let code_pos: Vec<usize> = (0..seq.len()).filter(|&i| seq.is_code_position(i)).collect();
    let n = code_pos.len();
    let exact = rate * n as f64;
    let mut target = libm::floor(exact) as usize;
    if rng.random::<f64>() < exact - target as f64 {
        target += 1;
    }
    let target = target.min(n);
    if target == 0 {
        return seq.clone();
    }
    let poisson = Poisson::new(mean_span).ok();
    // span id per position, 0 = untouched
    let mut span_of = alloc::vec![0usize; seq.len()];
    let mut covered = 0;
    let mut next_id = 1;
    while covered < target {
        let free: Vec<usize> = code_pos.iter().copied().filter(|&p| span_of[p] == 0).collect();
        let start = free[rng.random_range(0..free.len())];
        let drawn = poisson.map_or(1.0, |d| d.sample(rng)) as usize;
        let len = drawn.max(1).min(target - covered);
        let mut p = start;
        let mut taken = 0;
        while taken < len && p < seq.len() && seq.is_code_position(p) && span_of[p] == 0 {
            span_of[p] = next_id;
            taken += 1;
            p += 1;
        }
        covered += taken;
        next_id += 1;
    }
    let mut out = TokenSequence {
        token_ids: Vec::with_capacity(seq.len()),
        visit_index: Vec::with_capacity(seq.len()),
    };
    for i in 0..seq.len() {
        let id = span_of[i];
        if id != 0 && i > 0 && span_of[i - 1] == id {
            continue;
        }
        out.token_ids.push(if id == 0 { seq.token_ids[i] } else { MASK });
        out.visit_index.push(seq.visit_index[i]);
    }
    out
}

/// Masks every code token of each visit selected with probability
/// `visit_rate`. If every visit is selected the most recent one is left
/// intact.
pub fn visit_mask(seq: &TokenSequence, visit_rate: f64, rng: &mut Rng) -> TokenSequence {
    let segments = seq.visit_segments();
    let mut selected: Vec<bool> = segments.iter().map(|_| rng.random::<f64>() < visit_rate).collect();
    if !selected.is_empty() && selected.iter().all(|&s| s) {
        *selected.last_mut().unwrap() = false;
    }
    let mut out = seq.clone();
    for (seg, _) in segments.iter().zip(&selected).filter(|(_, &s)| s) {
        for i in seg.clone() {
            if seq.is_code_position(i) {
                out.token_ids[i] = MASK;
            }
        }
    }
    out
}

/// Reorders visit segments by a uniform random permutation. Visit indices
/// are reassigned by position, so the encoder cannot recover the original
/// order from them.
pub fn visit_permute(seq: &TokenSequence, rng: &mut Rng) -> TokenSequence {
    let mut segments = seq.visit_segments();
    let Some(first) = segments.first().map(|s| s.start) else {
        return seq.clone();
    };
    let tail = segments.last().map_or(first, |s| s.end);
    segments.shuffle(rng);
    let mut out = TokenSequence {
        token_ids: seq.token_ids[..first].to_vec(),
        visit_index: seq.visit_index[..first].to_vec(),
    };
    for (k, seg) in segments.into_iter().enumerate() {
        let vi = k as u32 + 1;
        for i in seg {
            out.token_ids.push(seq.token_ids[i]);
            out.visit_index.push(vi);
        }
    }
    out.token_ids.extend_from_slice(&seq.token_ids[tail..]);
    out.visit_index.extend_from_slice(&seq.visit_index[tail..]);
    out
}

/// Applies the configured scheme to `seq`.
pub fn apply(seq: &TokenSequence, params: &NoiseParams, vocab_len: usize, rng: &mut Rng) -> TokenSequence {
    match params.scheme {
        Scheme::CodeMask if params.random_replace => code_mask_mixed(seq, params.mask_rate, vocab_len, rng),
        Scheme::CodeMask => code_mask(seq, params.mask_rate, rng),
        Scheme::SpanMask => span_mask(seq, params.mask_rate, params.mean_span, rng),
        Scheme::VisitMask => visit_mask(seq, params.visit_rate, rng),
        Scheme::VisitPermute => visit_permute(seq, rng),
        Scheme::None => seq.clone(),
    }
}

/// Pretraining pair for predicting visit `visit_idx` (0-based) from the
/// corrupted history of visits `0..visit_idx`.
pub fn make_pretrain_example(
    record: &PatientRecord,
    visit_idx: usize,
    params: &NoiseParams,
    vocab: &Vocabulary,
    max_seq_len: usize,
    rng: &mut Rng,
) -> Result<NoisedExample> {
    if visit_idx < 1 || visit_idx >= record.visits.len() {
        return Err(Error::OutOfRange {
            what: "visit_idx",
            index: visit_idx,
            len: record.visits.len(),
        });
    }
    let history = flatten_history(record, visit_idx, vocab, max_seq_len)?;
    let target = target_visit(record, visit_idx, vocab)?;
    Ok(NoisedExample {
        corrupted: apply(&history, params, vocab.len(), rng),
        target,
        scheme: params.scheme,
    })
}
