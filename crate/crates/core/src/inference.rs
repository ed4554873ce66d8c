//! Next-visit generation, risk scoring and the two baselines.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    age_token, flatten_history, sex_token, truncate_history, PatientRecord, TokenId, TokenSequence, Vocabulary,
    AGE_BASE, AGE_BUCKETS, BOS, EOS, SEX_M,
};
use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_MAX_CODES: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub visit_idx: usize,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
}

/// Greedy decoding from `[BOS]` over code tokens and `[EOS]`; stops at
/// `[EOS]` or after `max_codes` emissions. Repeated emissions collapse.
pub fn generate_ids(model: &Model, vocab: &Vocabulary, history: &TokenSequence, max_codes: usize) -> Result<Vec<TokenId>> {
    let enc = model.encode(history)?;
    let v = model.config().vocab_size;
    let mut prefix = vec![BOS];
    let mut emitted = Vec::new();
    let max_codes = max_codes.min(model.config().max_seq_len.saturating_sub(1));
    while emitted.len() < max_codes {
        let logits = model.decode_logits(&prefix, &enc)?;
        let row = logits.row(prefix.len() - 1);
        let mut best = EOS;
        let mut best_logit = row[EOS as usize];
        for id in (0..v as TokenId).filter(|&id| vocab.is_code(id)) {
            if row[id as usize] > best_logit {
                best = id;
                best_logit = row[id as usize];
            }
        }
        if best == EOS {
            break;
        }
        emitted.push(best);
        prefix.push(best);
    }
    Ok(emitted)
}

/// [`generate_ids`] mapped to code strings.
pub fn generate_next_visit(
    model: &Model,
    vocab: &Vocabulary,
    history: &TokenSequence,
    max_codes: usize,
) -> Result<BTreeSet<String>> {
    let ids = generate_ids(model, vocab, history, max_codes)?;
    Ok(ids.into_iter().filter_map(|id| vocab.code(id)).map(String::from).collect())
}

/// Codes of visit `visit_idx - 1`.
pub fn copy_predict(record: &PatientRecord, visit_idx: usize) -> Result<BTreeSet<String>> {
    if visit_idx == 0 || visit_idx > record.visits.len() {
        return Err(Error::OutOfRange {
            what: "visit_idx",
            index: visit_idx,
            len: record.visits.len(),
        });
    }
    Ok(record.visits[visit_idx - 1].codes.iter().cloned().collect())
}

fn gold(record: &PatientRecord, visit_idx: usize) -> BTreeSet<String> {
    record.visits[visit_idx].codes.iter().cloned().collect()
}

/// Which (patient, visit) pairs to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSelection {
    /// The final visit of each patient, from all earlier visits.
    Last,
    /// Every visit after the first.
    All,
}

pub fn eval_pairs(cohort: &[PatientRecord], selection: PairSelection) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (p, r) in cohort.iter().enumerate() {
        match selection {
            PairSelection::Last => out.push((p, r.visits.len() - 1)),
            PairSelection::All => out.extend((1..r.visits.len()).map(|v| (p, v))),
        }
    }
    out
}

/// Model predictions for the given pairs.
pub fn predict_pairs(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[PatientRecord],
    pairs: &[(usize, usize)],
    max_codes: usize,
) -> Result<Vec<Prediction>> {
    pairs
        .iter()
        .map(|&(p, v)| {
            let r = &cohort[p];
            let history = flatten_history(r, v, vocab, model.config().max_seq_len)?;
            Ok(Prediction {
                patient_id: r.patient_id.clone(),
                visit_idx: v,
                predicted: generate_next_visit(model, vocab, &history, max_codes)?,
                gold: gold(r, v),
            })
        })
        .collect()
}

/// Copy-forward predictions for the given pairs.
pub fn copy_pairs(cohort: &[PatientRecord], pairs: &[(usize, usize)]) -> Result<Vec<Prediction>> {
    pairs
        .iter()
        .map(|&(p, v)| {
            let r = &cohort[p];
            Ok(Prediction {
                patient_id: r.patient_id.clone(),
                visit_idx: v,
                predicted: copy_predict(r, v)?,
                gold: gold(r, v),
            })
        })
        .collect()
}

/// Number of demographic features: ten age buckets and three sex values.
pub const DEMOGRAPHIC_FEATURES: usize = AGE_BUCKETS as usize + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    pub l2: f64,
    pub max_steps: usize,
    pub tolerance: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            l2: 1e-4,
            max_steps: 5000,
            tolerance: 1e-6,
        }
    }
}

/// L2-regularized logistic regression over binary history-wide code
/// indicators plus one-hot age bucket and sex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// Feature order: `codes`, then age buckets, then sex.
    pub codes: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub steps: usize,
    pub grad_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    crate::autodiff::sigmoid(z)
}

/// Softplus, `ln(1 + e^z)`, without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

fn features(codes: &Vocabulary, record: &PatientRecord) -> Vec<usize> {
    let n_codes = codes.n_codes();
    let mut f: BTreeSet<usize> = record
        .visits
        .iter()
        .flat_map(|v| v.codes.iter())
        .filter_map(|c| codes.get(c))
        .map(|id| (id - crate::corpus::FIRST_CODE) as usize)
        .collect();
    f.insert(n_codes + (age_token(record.demographics.age_years) - AGE_BASE) as usize);
    f.insert(n_codes + AGE_BUCKETS as usize + (sex_token(record.demographics.sex) - SEX_M) as usize);
    f.into_iter().collect()
}

struct Objective<'a> {
    x: &'a [Vec<usize>],
    y: &'a [u8],
    l2: f64,
    dim: usize,
}

impl Objective<'_> {
    fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.x.len() as f64;
        let data: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(xi, &yi)| {
                let z = b + xi.iter().map(|&j| w[j]).sum::<f64>();
                softplus(z) - yi as f64 * z
            })
            .sum();
        data / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.x.len() as f64;
        let mut gw = vec![0.0; self.dim];
        let mut gb = 0.0;
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let z = b + xi.iter().map(|&j| w[j]).sum::<f64>();
            let r = sigmoid(z) - yi as f64;
            gb += r;
            for &j in xi {
                gw[j] += r;
            }
        }
        for (g, &wj) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wj;
        }
        (gw, gb / n)
    }
}

/// Gradient descent with backtracking line search until the gradient norm
/// drops below `tolerance` or `max_steps` is reached.
pub fn logreg_train(cohort: &[PatientRecord], labels: &[u8], cfg: &LogRegConfig) -> Result<LogRegModel> {
    if cohort.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} patients but {} labels",
            cohort.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "logistic regression needs both classes ({pos} of {} positive)",
            labels.len()
        )));
    }
    if !(cfg.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 {} must be >= 0", cfg.l2)));
    }
    let codes = Vocabulary::build(cohort, 1)?;
    let dim = codes.n_codes() + DEMOGRAPHIC_FEATURES;
    let x: Vec<Vec<usize>> = cohort.iter().map(|r| features(&codes, r)).collect();
    let obj = Objective { x: &x, y: labels, l2: cfg.l2, dim };

    let mut w = vec![0.0; dim];
    let prior = pos as f64 / labels.len() as f64;
    let mut b = libm::log(prior / (1.0 - prior));
    let mut step = 1.0;
    let mut loss = obj.loss(&w, b);
    let mut steps = 0;
    let mut grad_norm;
    loop {
        let (gw, gb) = obj.grad(&w, b);
        let sq = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        grad_norm = libm::sqrt(sq);
        if grad_norm < cfg.tolerance || steps >= cfg.max_steps {
            break;
        }
        // Armijo backtracking from a step that grows after each success.
        step *= 2.0;
        loop {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let b_new = b - step * gb;
            let l_new = obj.loss(&w_new, b_new);
            if l_new <= loss - 0.5 * step * sq {
                w = w_new;
                b = b_new;
                loss = l_new;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Ok(LogRegModel {
                    codes: codes.codes().to_vec(),
                    weights: w,
                    bias: b,
                    steps,
                    grad_norm,
                });
            }
        }
        steps += 1;
    }
    Ok(LogRegModel {
        codes: codes.codes().to_vec(),
        weights: w,
        bias: b,
        steps,
        grad_norm,
    })
}

impl LogRegModel {
    pub fn score(&self, record: &PatientRecord) -> f64 {
        let codes = Vocabulary::from_codes(self.codes.clone(), 1);
        self.score_with(&codes, record)
    }

    fn score_with(&self, codes: &Vocabulary, record: &PatientRecord) -> f64 {
        let z = self.bias + features(codes, record).iter().map(|&j| self.weights[j]).sum::<f64>();
        sigmoid(z)
    }
}

/// How much history a score may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryWindow {
    Full,
    /// The `k` most recent visits.
    LastK(usize),
}

pub enum Scorer<'a> {
    Model { model: &'a Model, vocab: &'a Vocabulary },
    LogReg(&'a LogRegModel),
}

/// One risk score per patient, in cohort order.
pub fn batch_score(scorer: &Scorer<'_>, cohort: &[PatientRecord], window: HistoryWindow) -> Result<Vec<(String, f64)>> {
    let logreg_codes = match scorer {
        Scorer::LogReg(m) => Some(Vocabulary::from_codes(m.codes.clone(), 1)),
        Scorer::Model { .. } => None,
    };
    cohort
        .iter()
        .map(|r| {
            let truncated;
            let record = match window {
                HistoryWindow::Full => r,
                HistoryWindow::LastK(k) => {
                    truncated = truncate_history(r, k)?;
                    &truncated
                }
            };
            let score = match scorer {
                Scorer::Model { model, vocab } => {
                    let h = flatten_history(record, record.visits.len(), vocab, model.config().max_seq_len)?;
                    model.risk_score(&h)?
                }
                Scorer::LogReg(m) => m.score_with(logreg_codes.as_ref().unwrap(), record),
            };
            Ok((r.patient_id.clone(), score))
        })
        .collect()
}
