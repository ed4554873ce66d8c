//! Finite-difference check of the full next-visit loss on a generated batch.

use decode_core::autodiff::{finite_diff_check_with, Difference, Fault, FdOptions, GradCheckReport, Graph, Var};
use decode_core::corpus::{flatten_history, target_visit, TokenId, TokenSequence, Vocabulary, BOS, PAD};
use decode_core::model::{Encoded, Mode, Model, ModelConfig};
use decode_core::synthgen::{generate_cohort, GenConfig};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub batch: usize,
    pub seed: u64,
    /// Coordinates sampled from each larger tensor.
    pub samples_per_tensor: usize,
    pub eps: f64,
    pub difference: Difference,
    /// History length cap; keeps each loss evaluation cheap.
    pub max_seq_len: usize,
    /// Longest decoder target (codes plus EOS) accepted when picking the
    /// visit to predict for each patient.
    pub max_target_len: usize,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            layers: 2,
            heads: 4,
            d_model: 64,
            batch: 4,
            seed: 0,
            samples_per_tensor: 64,
            eps: 2e-4,
            difference: Difference::Richardson,
            max_seq_len: 16,
            max_target_len: 8,
            fault: None,
        }
    }
}

type Example = (TokenSequence, Vec<TokenId>);

fn prefix_of(target: &[TokenId]) -> Vec<TokenId> {
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&target[..target.len() - 1]);
    prefix
}

fn mean_loss(g: &mut Graph, losses: Vec<Var>) -> decode_core::Result<Var> {
    let n = losses.len() as f64;
    let mut it = losses.into_iter();
    let mut total = it.next().expect("non-empty batch");
    for l in it {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / n))
}

fn batch_loss(g: &mut Graph, model: &Model, batch: &[Example]) -> decode_core::Result<Var> {
    let losses = batch
        .iter()
        .map(|(input, target)| model.seq2seq_loss_graph(g, input, target, &mut Mode::Eval))
        .collect::<decode_core::Result<Vec<_>>>()?;
    mean_loss(g, losses)
}

/// Same loss with the encoder states supplied as constants; valid when
/// only decoder-side parameters differ from those that produced `encoded`.
fn batch_loss_from_states(
    g: &mut Graph,
    model: &Model,
    batch: &[Example],
    encoded: &[Encoded],
) -> decode_core::Result<Var> {
    let losses = batch
        .iter()
        .zip(encoded)
        .map(|((_, target), enc)| {
            let states = g.constant(enc.states.clone());
            let hidden = model.decode_graph(g, states, &enc.tokens, &prefix_of(target), &mut Mode::Eval, None)?;
            let logits = model.logits_graph(g, hidden)?;
            g.cross_entropy(logits, target, PAD)
        })
        .collect::<decode_core::Result<Vec<_>>>()?;
    mean_loss(g, losses)
}

/// Parameters read by the encoder. Everything else only affects the loss
/// through the decoder, so perturbing it leaves the encoder states intact.
fn feeds_encoder(name: &str) -> bool {
    name.starts_with("enc.") || matches!(name, "tok_emb" | "pos_emb" | "visit_emb")
}

/// Compares backpropagated gradients of the mean next-visit loss over
/// `batch` generated patients with finite differences. With `fault` set,
/// the analytic pass runs a deliberately broken backward rule.
pub fn seq2seq_gradcheck(opts: &GradcheckOptions) -> Result<GradCheckReport> {
    let gen = GenConfig {
        n_patients: opts.batch.max(1),
        seed: opts.seed,
        ..GenConfig::default()
    };
    let (cohort, _) = generate_cohort(&gen)?;
    let vocab = Vocabulary::build(&cohort, 1)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: opts.d_model,
        n_heads: opts.heads,
        n_encoder_layers: opts.layers,
        n_decoder_layers: opts.layers,
        d_ff: 2 * opts.d_model,
        max_seq_len: opts.max_seq_len,
        dropout_prob: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::init(config, opts.seed)?;
    let target_cap = opts.max_target_len.min(opts.max_seq_len);
    let batch = cohort
        .iter()
        .map(|r| {
            // The latest visit whose target fits.
            let v = (1..r.visits.len())
                .rev()
                .find(|&v| r.visits[v].codes.len() < target_cap)
                .unwrap_or(1);
            Ok((flatten_history(r, v, &vocab, opts.max_seq_len)?, target_visit(r, v, &vocab)?))
        })
        .collect::<decode_core::Result<Vec<_>>>()?;

    let mut g = opts.fault.map_or_else(Graph::new, Graph::with_fault);
    let loss = batch_loss(&mut g, &model, &batch)?;
    g.backward(loss)?;
    let mut grads = model.params().zero_grads();
    g.accumulate_param_grads(&mut grads);

    let encoded = batch
        .iter()
        .map(|(input, _)| model.encode(input))
        .collect::<decode_core::Result<Vec<_>>>()?;
    let fd = FdOptions {
        eps: opts.eps,
        samples_per_tensor: opts.samples_per_tensor,
        seed: opts.seed,
        difference: opts.difference,
    };
    // One working model; each call copies in the perturbed tensor and
    // restores the one touched by the previous call.
    let mut probe = model.clone();
    let mut last = None;
    let report = finite_diff_check_with(
        model.params(),
        &grads,
        |p, id| {
            for touched in last.into_iter().chain([id]) {
                probe.params_mut().get_mut(touched).data_mut().copy_from_slice(p.get(touched).data());
            }
            last = Some(id);
            let mut g = Graph::new().centered();
            let loss = if feeds_encoder(p.name(id)) {
                batch_loss(&mut g, &probe, &batch)?
            } else {
                batch_loss_from_states(&mut g, &probe, &batch, &encoded)?
            };
            Ok(g.value(loss).item())
        },
        &fd,
    )?;
    Ok(report)
}
