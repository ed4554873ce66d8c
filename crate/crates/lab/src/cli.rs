//! The `decode-lab` command line.
//!
//! Exit status: 0 success, 2 bad usage or unreadable input, 3 a metric is
//! undefined on the given data, 4 an internal invariant or a checkpoint
//! config mismatch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use decode_core::autodiff::{Difference, Fault};
use decode_core::corpus::{flatten_history, target_visit, PatientRecord, Vocabulary, BOS, EOS};
use decode_core::inference::{copy_pairs, eval_pairs, logreg_train, HistoryWindow, LogRegConfig, PairSelection, Scorer};
use decode_core::metrics::{daop_report, task_report, CodeSets, ReportConfig};
use decode_core::model::ModelConfig;
use decode_core::noising::Scheme;
use decode_core::synthgen::{self, cohort_stats, generate_cohort, labels_for, GenConfig};
use decode_core::training::{finetune, pretrain, Checkpoint, FinetuneBase, Objective, TrainConfig, Validation};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, EXIT_INVARIANT, EXIT_OK, EXIT_USAGE};
use crate::experiments::{batch_score_parallel, predict_pairs_parallel};
use crate::files::{self, ScoreRow};
use crate::gradcheck::{seq2seq_gradcheck, GradcheckOptions};
use crate::manifest::ManifestBuilder;
use crate::checkpoint;

pub const CHECKPOINT_FILE: &str = "checkpoint.dckp";
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "decode-lab", version, about = "Pretrain, fine-tune and evaluate denoising encoder-decoder models on diagnosis-code histories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort and its outcome labels.
    GenData(GenDataArgs),
    /// Pretrain on next-visit prediction (or encoder-only masking).
    Pretrain(PretrainArgs),
    /// Fine-tune the risk head and all weights on one binary outcome.
    Finetune(FinetuneArgs),
    /// Predict next visits and report stratified Jaccard.
    EvaluateDaop(EvaluateDaopArgs),
    /// Score a binary task and report AUROC, AUPRC and operating points.
    EvaluateTask(EvaluateTaskArgs),
    /// Run the copy-forward or logistic-regression baseline.
    Baseline(BaselineArgs),
    /// Check backpropagated gradients of the full model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump every attention map for one patient as JSON.
    AttentionExport(AttentionArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON config file; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_patients: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Seq2seq,
    Mlm,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// Corruption applied to histories: code, span, visit, permute or none.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub mean_span: Option<f64>,
    #[arg(long)]
    pub visit_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Pretrained checkpoint; without it the model starts from random weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, requires = "val_labels")]
    pub val_cohort: Option<PathBuf>,
    #[arg(long, requires = "val_cohort")]
    pub val_labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PairsArg {
    Last,
    All,
}

impl From<PairsArg> for PairSelection {
    fn from(p: PairsArg) -> Self {
        match p {
            PairsArg::Last => PairSelection::Last,
            PairsArg::All => PairSelection::All,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateDaopArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub pairs: Option<PairsArg>,
    #[arg(long)]
    pub max_codes: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HistoryArg {
    Full,
    LastK,
}

#[derive(Args, Debug)]
pub struct HistoryArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub history: HistoryArg,
    /// Visits kept by `--history last-k`.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

impl HistoryArgs {
    fn window(&self) -> HistoryWindow {
        match self.history {
            HistoryArg::Full => HistoryWindow::Full,
            HistoryArg::LastK => HistoryWindow::LastK(self.k),
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateTaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// Precomputed `patient_id,score,label` CSV; replaces model scoring.
    #[arg(long, conflicts_with_all = ["checkpoint", "cohort", "labels"])]
    pub scores: Option<PathBuf>,
    #[arg(long, requires_all = ["cohort", "labels"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub rule: Option<String>,
    #[command(flatten)]
    pub history: HistoryArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineKind {
    Copy,
    Logreg,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    /// Evaluation cohort for copy; training cohort for logreg.
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub pairs: Option<PairsArg>,
    /// Cohort to score with the fitted logistic regression; defaults to the
    /// training cohort.
    #[arg(long, requires = "test_labels")]
    pub test_cohort: Option<PathBuf>,
    #[arg(long, requires = "test_cohort")]
    pub test_labels: Option<PathBuf>,
    #[command(flatten)]
    pub history: HistoryArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    Softmax,
    LayerNorm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DifferenceArg {
    Central,
    Richardson,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Finite-difference step; defaults to the value suited to --difference.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, value_enum, default_value_t = DifferenceArg::Richardson)]
    pub difference: DifferenceArg,
    /// Break one backward rule on purpose, to confirm the check notices.
    #[arg(long, value_enum)]
    pub fault: Option<FaultArg>,
    /// Where to write the report and manifest; printed only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub patient: String,
    /// Visit whose codes form the decoder prefix; defaults to the last.
    #[arg(long)]
    pub visit: Option<usize>,
}

/// Settings for every subcommand except `gen-data`, read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_count: u32,
    pub max_codes: usize,
    pub pairs: PairSelection,
    /// Label rule used by fine-tuning and task evaluation.
    pub rule: String,
    pub code_sets: CodeSets,
    pub report: ReportConfig,
    pub logreg: LogRegConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_count: 1,
            max_codes: decode_core::inference::DEFAULT_MAX_CODES,
            pairs: PairSelection::Last,
            rule: "outcome".into(),
            code_sets: synthgen::code_sets(),
            report: ReportConfig::default(),
            logreg: LogRegConfig::default(),
        }
    }
}

/// A run config plus whether the file pinned the model architecture.
struct Loaded {
    config: RunConfig,
    pins_model: bool,
}

fn load_run_config(path: Option<&Path>, mb: &mut ManifestBuilder) -> anyhow::Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: RunConfig::default(),
            pins_model: false,
        });
    };
    mb.input(path);
    let raw: serde_json::Value = files::read_json(path)?;
    let pins_model = raw.get("model").is_some();
    let config = serde_json::from_value(raw)
        .map_err(|e| LabError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Loaded { config, pins_model })
}

fn load_checkpoint(path: &Path, loaded: &Loaded, mb: &mut ManifestBuilder) -> anyhow::Result<Checkpoint> {
    mb.input(path);
    Ok(if loaded.pins_model {
        checkpoint::load_expecting(path, &loaded.config.model)?
    } else {
        checkpoint::load(path)?
    })
}

fn load_cohort(path: &Path, mb: &mut ManifestBuilder) -> anyhow::Result<Vec<PatientRecord>> {
    mb.input(path);
    Ok(files::load_jsonl(path)?)
}

fn load_labels(path: &Path, cohort: &[PatientRecord], rule: &str, mb: &mut ManifestBuilder) -> anyhow::Result<Vec<u8>> {
    mb.input(path);
    let labels = files::read_labels(path)?;
    Ok(labels_for(&labels, cohort, rule)?)
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    Ok(())
}

fn progress_printer(total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    move |step, loss| {
        if (step + 1) % every == 0 || step + 1 == total {
            eprintln!("step {:>6}/{total}  loss {loss:.4}", step + 1);
        }
    }
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("gen-data");
    let Some(path) = args.common.config.as_deref() else {
        bail!(LabError::Usage("gen-data needs --config".into()));
    };
    mb.input(path);
    let mut config: GenConfig = files::read_json(path)?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n_patients {
        config.n_patients = n;
    }
    let resolved = config.resolved()?;
    let (cohort, labels) = generate_cohort(&config)?;
    let stats = cohort_stats(&resolved, &cohort, &labels)?;
    let out = &args.common.out;
    create_out(out)?;
    mb.emit(&out.join("cohort.jsonl"), &files::to_jsonl(&cohort))?;
    mb.emit(&out.join("labels.jsonl"), &files::to_jsonl(&labels))?;
    mb.emit(&out.join("stats.json"), &files::to_json_pretty(&stats))?;
    mb.finish(out, &resolved, Some(resolved.seed))?;
    eprintln!("{} patients, {} label rows written to {}", cohort.len(), labels.len(), out.display());
    Ok(EXIT_OK)
}

fn pretrain_cmd(args: PretrainArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("pretrain");
    let mut cfg = load_run_config(args.common.config.as_deref(), &mut mb)?.config;
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    if let Some(s) = &args.noise.scheme {
        cfg.train.noise.scheme = Scheme::parse(s)?;
    }
    if let Some(r) = args.noise.mask_rate {
        cfg.train.noise.mask_rate = r;
    }
    if let Some(m) = args.noise.mean_span {
        cfg.train.noise.mean_span = m;
    }
    if let Some(r) = args.noise.visit_rate {
        cfg.train.noise.visit_rate = r;
    }
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    match args.objective {
        Some(ObjectiveArg::Seq2seq) => cfg.train.objective = Objective::Seq2seqDenoise,
        Some(ObjectiveArg::Mlm) => cfg.train.objective = Objective::EncoderMlm,
        None => {}
    }
    let cohort = load_cohort(&args.cohort, &mut mb)?;
    let vocab = Vocabulary::build(&cohort, cfg.min_count)?;
    let mut progress = progress_printer(cfg.train.max_steps);
    let (ck, trace) = pretrain(&cohort, &vocab, &cfg.model, &cfg.train, Some(&mut progress))?;
    cfg.model.vocab_size = ck.config.vocab_size;
    let out = &args.common.out;
    create_out(out)?;
    mb.emit(&out.join(CHECKPOINT_FILE), &checkpoint::encode(&ck))?;
    mb.emit(&out.join("trace.csv"), trace.to_csv().as_bytes())?;
    mb.finish(out, &cfg, Some(cfg.train.seed))?;
    Ok(EXIT_OK)
}

fn finetune_cmd(args: FinetuneArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("finetune");
    let loaded = load_run_config(args.common.config.as_deref(), &mut mb)?;
    let mut cfg = loaded.config.clone();
    cfg.train.objective = Objective::BinaryFinetune;
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    if let Some(r) = &args.rule {
        cfg.rule = r.clone();
    }
    let base_ck = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p, &loaded, &mut mb)?),
        None => None,
    };
    let cohort = load_cohort(&args.cohort, &mut mb)?;
    let labels = load_labels(&args.labels, &cohort, &cfg.rule, &mut mb)?;
    let val = match (&args.val_cohort, &args.val_labels) {
        (Some(c), Some(l)) => {
            let vc = load_cohort(c, &mut mb)?;
            let vl = load_labels(l, &vc, &cfg.rule, &mut mb)?;
            if cfg.train.eval_every == 0 {
                cfg.train.eval_every = (cfg.train.max_steps / 10).max(1);
            }
            Some((vc, vl))
        }
        _ => None,
    };
    let fresh_vocab;
    let base = match &base_ck {
        Some(ck) => {
            cfg.model = ck.config.clone();
            FinetuneBase::Pretrained(ck)
        }
        None => {
            fresh_vocab = Vocabulary::build(&cohort, cfg.min_count)?;
            FinetuneBase::Random {
                config: cfg.model.clone(),
                vocab: &fresh_vocab,
            }
        }
    };
    let validation = val.as_ref().map(|(c, l)| Validation { cohort: c, labels: l });
    let mut progress = progress_printer(cfg.train.max_steps);
    let (ck, trace) = finetune(&cohort, &labels, base, &cfg.train, validation, Some(&mut progress))?;
    cfg.model.vocab_size = ck.config.vocab_size;
    let out = &args.common.out;
    create_out(out)?;
    mb.emit(&out.join(CHECKPOINT_FILE), &checkpoint::encode(&ck))?;
    mb.emit(&out.join("trace.csv"), trace.to_csv().as_bytes())?;
    if !trace.validation.is_empty() {
        let mut csv = String::from("step,loss\n");
        for (step, loss) in &trace.validation {
            csv.push_str(&format!("{step},{loss}\n"));
        }
        mb.emit(&out.join("validation.csv"), csv.as_bytes())?;
    }
    mb.finish(out, &cfg, Some(cfg.train.seed))?;
    Ok(EXIT_OK)
}

fn emit_report(mb: &mut ManifestBuilder, out: &Path, report: &decode_core::metrics::EvalReport) -> anyhow::Result<()> {
    mb.emit(&out.join("report.json"), &files::to_json_pretty(report))?;
    mb.emit(&out.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

fn evaluate_daop(args: EvaluateDaopArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("evaluate-daop");
    let loaded = load_run_config(args.common.config.as_deref(), &mut mb)?;
    let mut cfg = loaded.config.clone();
    if let Some(seed) = args.common.seed {
        cfg.report.seed = seed;
    }
    if let Some(p) = args.pairs {
        cfg.pairs = p.into();
    }
    if let Some(m) = args.max_codes {
        cfg.max_codes = m;
    }
    let ck = load_checkpoint(&args.checkpoint, &loaded, &mut mb)?;
    let model = ck.model()?;
    let cohort = load_cohort(&args.cohort, &mut mb)?;
    let pairs = eval_pairs(&cohort, cfg.pairs);
    let preds = predict_pairs_parallel(&model, &ck.vocab, &cohort, &pairs, cfg.max_codes)?;
    let report = daop_report("daop", &preds, &cohort, &cfg.code_sets, &cfg.report)?;
    let out = &args.common.out;
    create_out(out)?;
    mb.emit(&out.join("predictions.jsonl"), &files::to_jsonl(&preds))?;
    emit_report(&mut mb, out, &report)?;
    mb.finish(out, &cfg, Some(cfg.report.seed))?;
    Ok(EXIT_OK)
}

fn score_rows(ids_scores: Vec<(String, f64)>, labels: &[u8]) -> Vec<ScoreRow> {
    ids_scores
        .into_iter()
        .zip(labels)
        .map(|((patient_id, score), &label)| ScoreRow { patient_id, score, label })
        .collect()
}

fn split_rows(rows: &[ScoreRow]) -> (Vec<f64>, Vec<u8>) {
    rows.iter().map(|r| (r.score, r.label)).unzip()
}

fn evaluate_task(args: EvaluateTaskArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("evaluate-task");
    let loaded = load_run_config(args.common.config.as_deref(), &mut mb)?;
    let mut cfg = loaded.config.clone();
    if let Some(seed) = args.common.seed {
        cfg.report.seed = seed;
    }
    if let Some(r) = &args.rule {
        cfg.rule = r.clone();
    }
    let out = &args.common.out;
    let rows = match (&args.scores, &args.checkpoint, &args.cohort, &args.labels) {
        (Some(s), _, _, _) => {
            mb.input(s);
            files::read_scores(s)?
        }
        (None, Some(ck_path), Some(c), Some(l)) => {
            let ck = load_checkpoint(ck_path, &loaded, &mut mb)?;
            let model = ck.model()?;
            let cohort = load_cohort(c, &mut mb)?;
            let labels = load_labels(l, &cohort, &cfg.rule, &mut mb)?;
            let scorer = Scorer::Model {
                model: &model,
                vocab: &ck.vocab,
            };
            score_rows(batch_score_parallel(&scorer, &cohort, args.history.window())?, &labels)
        }
        _ => bail!(LabError::Usage("evaluate-task needs --scores, or --checkpoint with --cohort and --labels".into())),
    };
    let (scores, labels) = split_rows(&rows);
    let report = task_report(&cfg.rule, &scores, &labels, &cfg.report)?;
    create_out(out)?;
    if args.scores.is_none() {
        mb.emit(&out.join("scores.csv"), files::scores_csv(&rows).as_bytes())?;
    }
    emit_report(&mut mb, out, &report)?;
    mb.finish(out, &cfg, Some(cfg.report.seed))?;
    Ok(EXIT_OK)
}

fn baseline(args: BaselineArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("baseline");
    let mut cfg = load_run_config(args.common.config.as_deref(), &mut mb)?.config;
    if let Some(seed) = args.common.seed {
        cfg.report.seed = seed;
    }
    if let Some(p) = args.pairs {
        cfg.pairs = p.into();
    }
    if let Some(r) = &args.rule {
        cfg.rule = r.clone();
    }
    let out = &args.common.out;
    let cohort = load_cohort(&args.cohort, &mut mb)?;
    match args.kind {
        BaselineKind::Copy => {
            let pairs = eval_pairs(&cohort, cfg.pairs);
            let preds = copy_pairs(&cohort, &pairs)?;
            let report = daop_report("daop", &preds, &cohort, &cfg.code_sets, &cfg.report)?;
            create_out(out)?;
            mb.emit(&out.join("predictions.jsonl"), &files::to_jsonl(&preds))?;
            emit_report(&mut mb, out, &report)?;
        }
        BaselineKind::Logreg => {
            let Some(labels_path) = &args.labels else {
                bail!(LabError::Usage("the logreg baseline needs --labels".into()));
            };
            let labels = load_labels(labels_path, &cohort, &cfg.rule, &mut mb)?;
            let model = logreg_train(&cohort, &labels, &cfg.logreg)?;
            let (test, test_labels) = match (&args.test_cohort, &args.test_labels) {
                (Some(c), Some(l)) => {
                    let tc = load_cohort(c, &mut mb)?;
                    let tl = load_labels(l, &tc, &cfg.rule, &mut mb)?;
                    (tc, tl)
                }
                _ => (cohort, labels),
            };
            let scored = batch_score_parallel(&Scorer::LogReg(&model), &test, args.history.window())?;
            let rows = score_rows(scored, &test_labels);
            let (scores, y) = split_rows(&rows);
            let report = task_report(&cfg.rule, &scores, &y, &cfg.report)?;
            create_out(out)?;
            mb.emit(&out.join("logreg.json"), &files::to_json_pretty(&model))?;
            mb.emit(&out.join("scores.csv"), files::scores_csv(&rows).as_bytes())?;
            emit_report(&mut mb, out, &report)?;
        }
    }
    mb.finish(out, &cfg, Some(cfg.report.seed))?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd(args: GradcheckArgs) -> anyhow::Result<i32> {
    let mb = ManifestBuilder::start("gradcheck");
    let opts = GradcheckOptions {
        layers: args.layers,
        heads: args.heads,
        d_model: args.d_model,
        batch: args.batch,
        seed: args.seed,
        samples_per_tensor: args.samples,
        eps: args.eps.unwrap_or(match args.difference {
            DifferenceArg::Central => 1e-5,
            DifferenceArg::Richardson => GradcheckOptions::default().eps,
        }),
        difference: match args.difference {
            DifferenceArg::Central => Difference::Central,
            DifferenceArg::Richardson => Difference::Richardson,
        },
        fault: args.fault.map(|f| match f {
            FaultArg::Softmax => Fault::Softmax,
            FaultArg::LayerNorm => Fault::LayerNorm,
        }),
        ..GradcheckOptions::default()
    };
    let report = seq2seq_gradcheck(&opts)?;
    let worst = report
        .worst
        .as_ref()
        .map_or_else(String::new, |(name, i)| format!(", worst at {name}[{i}]"));
    println!(
        "max relative error {:.3e} over {} coordinates{worst}",
        report.max_rel_error, report.checked
    );
    if let Some(out) = &args.out {
        #[derive(Serialize)]
        struct Summary<'a> {
            options: &'a GradcheckOptions,
            fault: Option<String>,
            max_rel_error: f64,
            checked: usize,
            worst: &'a Option<(String, usize)>,
        }
        create_out(out)?;
        let summary = Summary {
            options: &opts,
            fault: opts.fault.map(|f| format!("{f:?}")),
            max_rel_error: report.max_rel_error,
            checked: report.checked,
            worst: &report.worst,
        };
        let mut mb = mb;
        mb.emit(&out.join("gradcheck.json"), &files::to_json_pretty(&summary))?;
        mb.finish(out, &opts, Some(opts.seed))?;
    }
    Ok(if report.max_rel_error < GRADCHECK_TOLERANCE {
        EXIT_OK
    } else {
        EXIT_INVARIANT
    })
}

#[derive(Serialize)]
struct AttentionEntry {
    side: &'static str,
    layer: usize,
    head: usize,
    query_tokens: Vec<String>,
    key_tokens: Vec<String>,
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AttentionExport {
    patient_id: String,
    visit_idx: usize,
    /// Keyed `side/layer/head`.
    records: BTreeMap<String, AttentionEntry>,
}

fn attention_export(args: AttentionArgs) -> anyhow::Result<i32> {
    let mut mb = ManifestBuilder::start("attention-export");
    let loaded = load_run_config(args.common.config.as_deref(), &mut mb)?;
    let ck = load_checkpoint(&args.checkpoint, &loaded, &mut mb)?;
    let model = ck.model()?;
    let cohort = load_cohort(&args.cohort, &mut mb)?;
    let record = cohort
        .iter()
        .find(|r| r.patient_id == args.patient)
        .ok_or_else(|| LabError::Usage(format!("patient {:?} not in {}", args.patient, args.cohort.display())))?;
    let visit = args.visit.unwrap_or(record.visits.len() - 1);
    if visit == 0 || visit >= record.visits.len() {
        bail!(LabError::Usage(format!(
            "--visit must be in 1..{} for patient {}",
            record.visits.len(),
            record.patient_id
        )));
    }
    let history = flatten_history(record, visit, &ck.vocab, model.config().max_seq_len)?;
    // Gold codes of the visit as the decoder prefix, without the final [EOS].
    let mut prefix = vec![BOS];
    prefix.extend(target_visit(record, visit, &ck.vocab)?.into_iter().filter(|&t| t != EOS));
    prefix.truncate(model.config().max_seq_len);
    let labels = |ids: &[u32]| ids.iter().map(|&t| ck.vocab.label(t)).collect::<Vec<_>>();
    let records = model
        .capture_attention(&history, &prefix)?
        .into_iter()
        .map(|r| {
            let key = format!("{}/{}/{}", r.side.name(), r.layer, r.head);
            let entry = AttentionEntry {
                side: r.side.name(),
                layer: r.layer,
                head: r.head,
                query_tokens: labels(&r.query_tokens),
                key_tokens: labels(&r.key_tokens),
                weights: r.weights,
            };
            (key, entry)
        })
        .collect();
    let export = AttentionExport {
        patient_id: record.patient_id.clone(),
        visit_idx: visit,
        records,
    };
    let out = &args.common.out;
    create_out(out)?;
    mb.emit(&out.join("attention.json"), &files::to_json_pretty(&export))?;
    mb.finish(out, &loaded.config, args.common.seed)?;
    Ok(EXIT_OK)
}

pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::EvaluateDaop(a) => evaluate_daop(a),
        Command::EvaluateTask(a) => evaluate_task(a),
        Command::Baseline(a) => baseline(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::AttentionExport(a) => attention_export(a),
    }
}

/// Exit status for an error raised by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<LabError>() {
        return e.exit_code();
    }
    if let Some(e) = err.downcast_ref::<decode_core::Error>() {
        return LabError::Core(e.clone()).exit_code();
    }
    EXIT_USAGE
}

/// Parses the process arguments, runs the subcommand and returns the exit
/// status.
pub fn main() -> i32 {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
