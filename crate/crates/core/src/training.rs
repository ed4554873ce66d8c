//! Pretraining and fine-tuning loops.
//!
//! Every step draws its examples, noise and dropout masks from one seeded
//! stream, so a run is a pure function of (cohort, configs, seed).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, Grads, ParamSet};
use crate::corpus::{flatten_history, PatientRecord, TokenSequence, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::noising::{self, NoiseParams, Scheme};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Previous-to-future decoding of the next visit from a corrupted
    /// history.
    Seq2seqDenoise,
    /// Encoder-only masked-code recovery.
    EncoderMlm,
    BinaryFinetune,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Seq2seqDenoise => "seq2seq_denoise",
            Objective::EncoderMlm => "encoder_mlm",
            Objective::BinaryFinetune => "binary_finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Fraction of `lr` left at the last step after linear decay; 1.0 keeps
    /// the rate constant after warmup.
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation interval in steps; 0 disables validation.
    pub eval_every: usize,
    /// Corruption applied during pretraining.
    pub noise: NoiseParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Seq2seqDenoise,
            batch_size: 16,
            max_steps: 1000,
            lr: 3e-4,
            warmup_steps: 100,
            final_lr_fraction: 1.0,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 0,
            noise: NoiseParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("max_steps and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidArgument(format!(
                "final_lr_fraction {} outside [0, 1]",
                self.final_lr_fraction
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        self.noise.validate()
    }

    /// Linear warmup to `lr`, then linear decay to
    /// `lr * final_lr_fraction` at the last step (constant by default).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.max_steps.saturating_sub(self.warmup_steps + 1);
        if span == 0 {
            return self.lr;
        }
        let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
        self.lr * (1.0 - t * (1.0 - self.final_lr_fraction))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub objective: Objective,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
    /// `(step, loss)` on the validation set, when one was given.
    pub validation: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.step, e.loss));
        }
        out
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    /// Mean loss of the last `n` entries.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.entries[self.entries.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Model weights with everything needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn from_model(model: Model, vocab: Vocabulary) -> Self {
        let (config, params) = model.into_parts();
        Checkpoint { config, params, vocab }
    }

    pub fn model(&self) -> Result<Model> {
        if self.config.vocab_size != self.vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                self.config.vocab_size,
                self.vocab.len()
            )));
        }
        Model::from_params(self.config.clone(), self.params.clone())
    }
}

/// Every `(patient, visit_idx)` with at least one earlier visit.
pub fn eligible_pairs(cohort: &[PatientRecord]) -> Vec<(usize, usize)> {
    cohort
        .iter()
        .enumerate()
        .flat_map(|(p, r)| (1..r.visits.len()).map(move |v| (p, v)))
        .collect()
}

/// Per-step hook: `(step, loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

struct Optimizer {
    adam: AdamState,
    grads: Grads,
}

impl Optimizer {
    fn new(params: &ParamSet) -> Self {
        Optimizer {
            adam: AdamState::new(params, AdamConfig::default()),
            grads: params.zero_grads(),
        }
    }

    /// Runs `n` per-example graphs, averages their gradients, clips and
    /// updates. Returns (mean loss, pre-clip norm).
    fn step<F>(&mut self, model: &mut Model, cfg: &TrainConfig, step: usize, n: usize, mut example: F) -> Result<(f64, f64)>
    where
        F: FnMut(&mut Graph, &Model, usize) -> Result<crate::autodiff::Var>,
    {
        self.grads = model.params().zero_grads();
        let mut total = 0.0;
        for i in 0..n {
            let mut g = Graph::new();
            let loss = example(&mut g, model, i)?;
            total += g.value(loss).item();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut self.grads);
        }
        self.grads.scale(1.0 / n as f64);
        let norm = self.grads.clip_global_norm(cfg.clip_norm);
        self.adam.step_with_lr(model.params_mut(), &self.grads, cfg.lr_at(step))?;
        Ok((total / n as f64, norm))
    }
}

fn resolve_config(model_config: &ModelConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mut c = model_config.clone();
    if c.vocab_size == 0 {
        c.vocab_size = vocab.len();
    }
    if c.vocab_size != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            c.vocab_size,
            vocab.len()
        )));
    }
    Ok(c)
}

/// Checks that a pretraining input holds only visits before the target.
fn assert_no_leak(input: &TokenSequence, visit_idx: usize) -> Result<()> {
    let visits = input.visit_index.iter().copied().max().unwrap_or(0) as usize;
    if visits > visit_idx {
        return Err(Error::Invariant(format!(
            "encoder input spans {visits} visits but targets visit {visit_idx}"
        )));
    }
    Ok(())
}

/// Masked positions and originals for the encoder-only objective. Uses code
/// masking so positions stay aligned; at least one code is always masked.
fn mlm_example(history: &TokenSequence, rate: f64, rng: &mut Rng) -> (TokenSequence, Vec<usize>, Vec<u32>) {
    let mut corrupted = noising::code_mask(history, rate, rng);
    let mut positions: Vec<usize> = (0..history.len())
        .filter(|&i| corrupted.token_ids[i] == MASK && history.token_ids[i] != MASK)
        .collect();
    if positions.is_empty() {
        let codes: Vec<usize> = (0..history.len()).filter(|&i| history.is_code_position(i)).collect();
        let p = codes[rng.random_range(0..codes.len())];
        corrupted.token_ids[p] = MASK;
        positions.push(p);
    }
    let originals = positions.iter().map(|&p| history.token_ids[p]).collect();
    (corrupted, positions, originals)
}

/// Pretrains a fresh model on next-visit pairs from `cohort`.
pub fn pretrain(
    cohort: &[PatientRecord],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    progress: Option<Progress<'_>>,
) -> Result<(Checkpoint, LossTrace)> {
    let config = resolve_config(model_config, vocab)?;
    let model = Model::init(config, cfg.seed)?;
    continue_pretraining(model, cohort, vocab, cfg, progress)
}

/// Pretraining from an existing model.
pub fn continue_pretraining(
    mut model: Model,
    cohort: &[PatientRecord],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut progress: Option<Progress<'_>>,
) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    if !matches!(cfg.objective, Objective::Seq2seqDenoise | Objective::EncoderMlm) {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs seq2seq_denoise or encoder_mlm, not {}",
            cfg.objective.name()
        )));
    }
    let pairs = eligible_pairs(cohort);
    if pairs.is_empty() {
        return Err(Error::Empty("eligible (patient, visit) pairs"));
    }
    let max_len = model.config().max_seq_len;
    let mut rng = rng::seeded(cfg.seed);
    let mut opt = Optimizer::new(model.params());
    let mut trace = LossTrace::default();
    for step in 0..cfg.max_steps {
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| pairs[rng.random_range(0..pairs.len())])
            .collect();
        let (loss, grad_norm) = opt.step(&mut model, cfg, step, batch.len(), |g, m, i| {
            let (p, v) = batch[i];
            match cfg.objective {
                Objective::Seq2seqDenoise => {
                    let ex = noising::make_pretrain_example(&cohort[p], v, &cfg.noise, vocab, max_len, &mut rng)?;
                    assert_no_leak(&ex.corrupted, v)?;
                    m.seq2seq_loss_graph(g, &ex.corrupted, &ex.target, &mut Mode::Train(&mut rng))
                }
                _ => {
                    let history = flatten_history(&cohort[p], v, vocab, max_len)?;
                    let (input, pos, orig) = mlm_example(&history, cfg.noise.mask_rate, &mut rng);
                    m.mlm_loss_graph(g, &input, &pos, &orig, &mut Mode::Train(&mut rng))
                }
            }
        })?;
        trace.entries.push(TraceEntry {
            step,
            loss,
            objective: cfg.objective,
            grad_norm,
        });
        if let Some(f) = progress.as_mut() {
            f(step, loss);
        }
    }
    Ok((Checkpoint::from_model(model, vocab.clone()), trace))
}

/// Mean teacher-forced next-visit loss (no corruption, no dropout) over
/// `pairs`.
pub fn seq2seq_eval_loss(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[PatientRecord],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let none = NoiseParams {
        scheme: Scheme::None,
        ..NoiseParams::default()
    };
    let mut rng = rng::seeded(0);
    let mut total = 0.0;
    for &(p, v) in pairs {
        let ex = noising::make_pretrain_example(&cohort[p], v, &none, vocab, model.config().max_seq_len, &mut rng)?;
        total += model.seq2seq_loss(&ex.corrupted, &ex.target)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Where fine-tuning starts.
pub enum FinetuneBase<'a> {
    Pretrained(&'a Checkpoint),
    /// Fresh weights from `TrainConfig::seed`: the no-pretraining comparator.
    Random { config: ModelConfig, vocab: &'a Vocabulary },
}

pub struct Validation<'a> {
    pub cohort: &'a [PatientRecord],
    pub labels: &'a [u8],
}

fn check_labels(cohort: &[PatientRecord], labels: &[u8]) -> Result<f64> {
    if cohort.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} patients but {} labels",
            cohort.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::InvalidArgument(format!(
            "single-class labels ({pos} of {} positive)",
            labels.len()
        )));
    }
    Ok(pos as f64 / labels.len() as f64)
}

/// Mean binary cross-entropy of the risk head over full histories.
pub fn finetune_eval_loss(model: &Model, vocab: &Vocabulary, cohort: &[PatientRecord], labels: &[u8]) -> Result<f64> {
    if cohort.is_empty() || cohort.len() != labels.len() {
        return Err(Error::InvalidArgument("validation cohort and labels must be non-empty and aligned".into()));
    }
    let mut total = 0.0;
    for (r, &y) in cohort.iter().zip(labels) {
        let h = flatten_history(r, r.visits.len(), vocab, model.config().max_seq_len)?;
        let mut g = Graph::new();
        let z = model.risk_logit_graph(&mut g, &h, &mut Mode::Eval)?;
        let loss = g.bce_with_logits(z, &[y as f64])?;
        total += g.value(loss).item();
    }
    Ok(total / cohort.len() as f64)
}

/// Binary fine-tuning of every parameter on `risk_score` over full
/// histories. Patients are sampled uniformly with no class rebalancing; the
/// risk bias starts at the training log-odds.
pub fn finetune(
    cohort: &[PatientRecord],
    labels: &[u8],
    base: FinetuneBase<'_>,
    cfg: &TrainConfig,
    validation: Option<Validation<'_>>,
    mut progress: Option<Progress<'_>>,
) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    if cfg.objective != Objective::BinaryFinetune {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning needs binary_finetune, not {}",
            cfg.objective.name()
        )));
    }
    let prevalence = check_labels(cohort, labels)?;
    let (mut model, vocab) = match base {
        FinetuneBase::Pretrained(ck) => (ck.model()?, ck.vocab.clone()),
        FinetuneBase::Random { config, vocab } => (Model::init(resolve_config(&config, vocab)?, cfg.seed)?, vocab.clone()),
    };
    let bias = model.params().id("risk.b").expect("risk head");
    model.params_mut().get_mut(bias).data_mut()[0] = libm::log(prevalence / (1.0 - prevalence));

    let max_len = model.config().max_seq_len;
    let inputs = cohort
        .iter()
        .map(|r| flatten_history(r, r.visits.len(), &vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng::derived(cfg.seed, 1);
    let mut opt = Optimizer::new(model.params());
    let mut trace = LossTrace::default();
    for step in 0..cfg.max_steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..cohort.len())).collect();
        let (loss, grad_norm) = opt.step(&mut model, cfg, step, batch.len(), |g, m, i| {
            let p = batch[i];
            let z = m.risk_logit_graph(g, &inputs[p], &mut Mode::Train(&mut rng))?;
            g.bce_with_logits(z, &[labels[p] as f64])
        })?;
        trace.entries.push(TraceEntry {
            step,
            loss,
            objective: cfg.objective,
            grad_norm,
        });
        if let Some(v) = &validation {
            if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
                trace
                    .validation
                    .push((step, finetune_eval_loss(&model, &vocab, v.cohort, v.labels)?));
            }
        }
        if let Some(f) = progress.as_mut() {
            f(step, loss);
        }
    }
    Ok((Checkpoint::from_model(model, vocab), trace))
}
