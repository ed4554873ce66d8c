//! End-to-end experiments on generated cohorts: next-visit prediction
//! against the copy baseline, and fine-tuning from pretrained versus random
//! weights against logistic regression.

use std::time::Instant;

use decode_core::corpus::{PatientRecord, Vocabulary};
use decode_core::inference::{
    batch_score, copy_pairs, eval_pairs, logreg_train, predict_pairs, HistoryWindow, LogRegConfig, PairSelection,
    Prediction, Scorer,
};
use decode_core::metrics::{auprc, auroc, daop_report, CodeSets, EvalReport, ReportConfig};
use decode_core::model::{Model, ModelConfig};
use decode_core::noising::{NoiseParams, Scheme};
use decode_core::synthgen::{self, generate_cohort, labels_for, GenConfig, PlantedRule, RuleKind};
use decode_core::training::{finetune, pretrain, Checkpoint, FinetuneBase, Objective, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::parallel::map_chunks;

/// Model predictions for `pairs`, fanned out over worker threads.
pub fn predict_pairs_parallel(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[PatientRecord],
    pairs: &[(usize, usize)],
    max_codes: usize,
) -> Result<Vec<Prediction>> {
    Ok(map_chunks(pairs, |chunk| predict_pairs(model, vocab, cohort, chunk, max_codes))?)
}

/// Risk scores in cohort order, fanned out over worker threads.
pub fn batch_score_parallel(
    scorer: &Scorer<'_>,
    cohort: &[PatientRecord],
    window: HistoryWindow,
) -> Result<Vec<(String, f64)>> {
    Ok(map_chunks(cohort, |chunk| batch_score(scorer, chunk, window))?)
}

/// The pretraining run shared by both experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSetup {
    /// Generator for the pretraining cohort; its first `n_train` patients
    /// train, the rest are held out for next-visit evaluation.
    pub gen: GenConfig,
    pub n_train: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Code of the next-visit rule that shares its precursor pair with the
/// binary outcome.
pub const SHARED_ONSET_TARGET: &str = "A10.0";
pub const OUTCOME_RULE: &str = "outcome";

impl Default for PretrainSetup {
    fn default() -> Self {
        let mut gen = GenConfig::default();
        // The pretraining cohort carries no outcome labels. Instead the
        // outcome's precursor pair drives one more next-visit rule, so the
        // ordered-pair pattern is learnable from unlabeled histories.
        gen.planted_rules.retain(|r| r.kind == RuleKind::NextVisitCode);
        gen.planted_rules.push(PlantedRule {
            base_prob: 0.002,
            ..PlantedRule::new("onset_shared", "A10.1", "A10.2", SHARED_ONSET_TARGET, RuleKind::NextVisitCode)
        });
        gen.outcome_prevalence_target = None;
        gen.n_patients = 10_300;
        PretrainSetup {
            gen,
            n_train: 10_000,
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                n_encoder_layers: 1,
                n_decoder_layers: 1,
                d_ff: 64,
                max_seq_len: 128,
                dropout_prob: 0.0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                objective: Objective::Seq2seqDenoise,
                batch_size: 16,
                max_steps: 10_000,
                lr: 2e-3,
                warmup_steps: 100,
                final_lr_fraction: 0.1,
                noise: NoiseParams {
                    scheme: Scheme::VisitMask,
                    ..NoiseParams::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub final_loss: f64,
    pub train: Vec<PatientRecord>,
    pub held_out: Vec<PatientRecord>,
    pub secs: f64,
}

impl PretrainSetup {
    /// Generates the cohort under `seed` and pretrains on its training part.
    pub fn run(&self, seed: u64) -> Result<Pretrained> {
        let start = Instant::now();
        let gen = GenConfig { seed, ..self.gen.clone() };
        let (mut train, _) = generate_cohort(&gen)?;
        let held_out = train.split_off(self.n_train.min(train.len()));
        let vocab = Vocabulary::build(&train, 1)?;
        let cfg = TrainConfig { seed, ..self.train.clone() };
        let (checkpoint, trace) = pretrain(&train, &vocab, &self.model, &cfg, None)?;
        Ok(Pretrained {
            checkpoint,
            final_loss: trace.tail_mean(100).unwrap_or(f64::NAN),
            train,
            held_out,
            secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Next-visit prediction on the held-out patients, model versus copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaopSetup {
    pub pairs: PairSelection,
    pub max_codes: usize,
    pub report: ReportConfig,
}

impl Default for DaopSetup {
    fn default() -> Self {
        DaopSetup {
            pairs: PairSelection::All,
            max_codes: decode_core::inference::DEFAULT_MAX_CODES,
            report: ReportConfig {
                n_boot: 200,
                ..ReportConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DaopOutcome {
    pub model: EvalReport,
    pub copy: EvalReport,
    pub secs: f64,
}

impl DaopOutcome {
    fn value(report: &EvalReport, stratum: &str) -> f64 {
        report.get("jaccard", stratum).map_or(f64::NAN, |m| m.value)
    }

    /// Model minus copy Jaccard, in points, for a stratum key such as
    /// `"overall"` or `"tracked/0"`.
    pub fn gain(&self, stratum: &str) -> f64 {
        100.0 * (Self::value(&self.model, stratum) - Self::value(&self.copy, stratum))
    }

    pub fn model_value(&self, stratum: &str) -> f64 {
        Self::value(&self.model, stratum)
    }

    pub fn copy_value(&self, stratum: &str) -> f64 {
        Self::value(&self.copy, stratum)
    }
}

impl DaopSetup {
    pub fn run(&self, pre: &Pretrained, code_sets: &CodeSets) -> Result<DaopOutcome> {
        let start = Instant::now();
        let model = pre.checkpoint.model()?;
        let cohort = &pre.held_out;
        let pairs = eval_pairs(cohort, self.pairs);
        let preds = predict_pairs_parallel(&model, &pre.checkpoint.vocab, cohort, &pairs, self.max_codes)?;
        let copy = copy_pairs(cohort, &pairs)?;
        Ok(DaopOutcome {
            model: daop_report("daop_model", &preds, cohort, code_sets, &self.report)?,
            copy: daop_report("daop_copy", &copy, cohort, code_sets, &self.report)?,
            secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Binary outcome fine-tuning from pretrained and from random weights,
/// against logistic regression and the generator's Bayes oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenefitSetup {
    /// Generator for the labeled cohort: the first `n_train` patients train,
    /// the next `n_test` are scored.
    pub gen: GenConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub finetune: TrainConfig,
    pub logreg: LogRegConfig,
}

impl Default for BenefitSetup {
    fn default() -> Self {
        let mut gen = GenConfig::default();
        gen.planted_rules.retain(|r| r.kind == RuleKind::BinaryOutcome);
        for r in &mut gen.planted_rules {
            r.base_prob = 0.002;
        }
        gen.outcome_prevalence_target = Some(0.02);
        gen.n_patients = 15_000;
        BenefitSetup {
            gen,
            n_train: 10_000,
            n_test: 5_000,
            finetune: TrainConfig {
                objective: Objective::BinaryFinetune,
                batch_size: 16,
                max_steps: 1000,
                lr: 1e-3,
                warmup_steps: 50,
                ..TrainConfig::default()
            },
            logreg: LogRegConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitOutcome {
    pub prevalence_test: f64,
    pub auprc_pretrained: f64,
    pub auprc_random: f64,
    pub auprc_logreg: f64,
    pub auroc_pretrained: f64,
    pub auroc_random: f64,
    pub auroc_logreg: f64,
    pub auroc_oracle: f64,
    pub secs: f64,
}

impl BenefitSetup {
    pub fn run(&self, pre: &Pretrained, seed: u64) -> Result<BenefitOutcome> {
        let start = Instant::now();
        // A separate stream from the pretraining cohort under the same seed.
        let gen = GenConfig {
            seed: seed.wrapping_add(1 << 32),
            ..self.gen.clone()
        };
        let (cohort, labels) = generate_cohort(&gen)?;
        let y = labels_for(&labels, &cohort, OUTCOME_RULE)?;
        let resolved = gen.resolved()?;
        let (train, rest) = cohort.split_at(self.n_train);
        let test = &rest[..self.n_test.min(rest.len())];
        let (y_train, rest_y) = y.split_at(self.n_train);
        let y_test = &rest_y[..test.len()];

        let cfg = TrainConfig { seed, ..self.finetune.clone() };
        let vocab = &pre.checkpoint.vocab;
        let (from_pre, _) = finetune(train, y_train, FinetuneBase::Pretrained(&pre.checkpoint), &cfg, None, None)?;
        let random_base = FinetuneBase::Random {
            config: pre.checkpoint.config.clone(),
            vocab,
        };
        let (from_random, _) = finetune(train, y_train, random_base, &cfg, None, None)?;
        let lr = logreg_train(train, y_train, &self.logreg)?;

        let scores = |scorer: Scorer<'_>| -> Result<Vec<f64>> {
            Ok(batch_score_parallel(&scorer, test, HistoryWindow::Full)?
                .into_iter()
                .map(|(_, s)| s)
                .collect())
        };
        let m_pre = from_pre.model()?;
        let m_rand = from_random.model()?;
        let s_pre = scores(Scorer::Model { model: &m_pre, vocab })?;
        let s_rand = scores(Scorer::Model { model: &m_rand, vocab })?;
        let s_lr = scores(Scorer::LogReg(&lr))?;
        let pos = y_test.iter().filter(|&&l| l == 1).count();
        Ok(BenefitOutcome {
            prevalence_test: pos as f64 / y_test.len() as f64,
            auprc_pretrained: auprc(&s_pre, y_test)?,
            auprc_random: auprc(&s_rand, y_test)?,
            auprc_logreg: auprc(&s_lr, y_test)?,
            auroc_pretrained: auroc(&s_pre, y_test)?,
            auroc_random: auroc(&s_rand, y_test)?,
            auroc_logreg: auroc(&s_lr, y_test)?,
            auroc_oracle: synthgen::oracle_auroc(&resolved, test, y_test, OUTCOME_RULE)?,
            secs: start.elapsed().as_secs_f64(),
        })
    }
}
