use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::autodiff::{finite_diff_check, Graph, Grads};
use crate::corpus::{TokenSequence, BOS, EOS, PAD, SEP};

const V: usize = 40;

fn tiny(d_model: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: V,
        d_model,
        n_heads,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        d_ff: 2 * d_model,
        max_seq_len: 32,
        dropout_prob: 0.0,
        activation: Activation::Gelu,
    }
}

fn history() -> TokenSequence {
    TokenSequence {
        token_ids: vec![8, 16, 20, 25, SEP, 21, 30, 22, SEP],
        visit_index: vec![0, 0, 1, 1, 1, 2, 2, 2, 2],
    }
}

fn grads_of(model: &Model, build: impl Fn(&mut Graph, &Model) -> crate::Result<crate::autodiff::Var>) -> Grads {
    let mut g = Graph::new();
    let loss = build(&mut g, model).unwrap();
    g.backward(loss).unwrap();
    let mut grads = model.params().zero_grads();
    g.accumulate_param_grads(&mut grads);
    grads
}

#[test]
fn parameter_shapes_follow_config() {
    let cfg = tiny(16, 4);
    let m = Model::init(cfg.clone(), 1).unwrap();
    let shapes = expected_shapes(&cfg);
    assert_eq!(m.params().len(), shapes.len());
    for (name, shape) in shapes {
        assert_eq!(m.params().by_name(&name).unwrap().shape(), &shape[..], "{name}");
    }
    let (cfg2, params) = m.clone().into_parts();
    assert_eq!(Model::from_params(cfg2, params).unwrap(), m);
}

#[test]
fn mismatched_params_are_rejected() {
    let m = Model::init(tiny(16, 4), 1).unwrap();
    let (_, params) = m.into_parts();
    assert!(Model::from_params(tiny(8, 4), params).is_err());
}

#[test]
fn config_validation() {
    assert!(tiny(10, 4).validate().is_err());
    let mut c = tiny(16, 4);
    c.n_encoder_layers = 0;
    assert!(c.validate().is_err());
    c = tiny(16, 4);
    c.dropout_prob = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn encoder_and_logit_shapes() {
    let m = Model::init(tiny(16, 4), 2).unwrap();
    let h = history();
    let enc = m.encode(&h).unwrap();
    assert_eq!(enc.states.shape(), &[h.len(), 16]);
    let logits = m.decode_logits(&[BOS, 20, 21], &enc).unwrap();
    assert_eq!(logits.shape(), &[3, V]);
}

#[test]
fn overlong_input_is_rejected() {
    let m = Model::init(tiny(16, 4), 2).unwrap();
    let seq = TokenSequence {
        token_ids: vec![20; 33],
        visit_index: vec![1; 33],
    };
    assert!(matches!(m.encode(&seq), Err(crate::Error::SequenceTooLong { len: 33, max: 32 })));
    assert!(m.risk_score(&seq).is_err());
}

#[test]
fn prefix_must_start_with_bos() {
    let m = Model::init(tiny(16, 4), 2).unwrap();
    let enc = m.encode(&history()).unwrap();
    assert!(m.decode_logits(&[20, 21], &enc).is_err());
}

#[test]
fn decoder_is_causal_bit_exact() {
    let m = Model::init(tiny(16, 4), 3).unwrap();
    let enc = m.encode(&history()).unwrap();
    let a = m.decode_logits(&[BOS, 20, 21, 22, 23], &enc).unwrap();
    for j in 1..5 {
        let mut prefix = vec![BOS, 20, 21, 22, 23];
        prefix[j] = 33;
        let b = m.decode_logits(&prefix, &enc).unwrap();
        for i in 0..j {
            assert_eq!(a.row(i), b.row(i), "position {i} changed when {j} was perturbed");
        }
        assert_ne!(a.row(j), b.row(j));
    }
}

#[test]
fn encoder_changes_reach_every_decoder_position() {
    let m = Model::init(tiny(16, 4), 3).unwrap();
    let prefix = [BOS, 20, 21, 22];
    let a = m.decode_logits(&prefix, &m.encode(&history()).unwrap()).unwrap();
    let mut h = history();
    h.token_ids[2] = 35;
    let b = m.decode_logits(&prefix, &m.encode(&h).unwrap()).unwrap();
    for i in 0..prefix.len() {
        assert_ne!(a.row(i), b.row(i));
    }
}

#[test]
fn padding_leaves_real_positions_unchanged() {
    let m = Model::init(tiny(16, 4), 4).unwrap();
    let h = history();
    let plain = m.encode(&h).unwrap();
    let padded_seq = h.padded(h.len() + 5);
    let padded = m.encode(&padded_seq).unwrap();
    for i in 0..h.len() {
        assert_eq!(plain.states.row(i), padded.states.row(i));
    }
    let prefix = [BOS, 20, 21];
    assert_eq!(
        m.decode_logits(&prefix, &plain).unwrap(),
        m.decode_logits(&prefix, &padded).unwrap()
    );
    assert_eq!(m.risk_score(&h).unwrap(), m.risk_score(&padded_seq).unwrap());

    // Reordering pad tail entries (with different visit indices) changes nothing.
    let mut shuffled = padded_seq.clone();
    let n = shuffled.len();
    shuffled.visit_index[n - 1] = 3;
    shuffled.visit_index.swap(n - 1, n - 2);
    let again = m.encode(&shuffled).unwrap();
    for i in 0..h.len() {
        assert_eq!(plain.states.row(i), again.states.row(i));
    }
}

#[test]
fn random_init_losses_near_uniform() {
    let ln_v = libm::log(V as f64);
    for seed in 0..3 {
        let m = Model::init(tiny(64, 4), seed).unwrap();
        let loss = m.seq2seq_loss(&history(), &[20, 24, EOS]).unwrap();
        assert!(loss >= 0.0);
        assert!((loss - ln_v).abs() < 0.15 * ln_v, "seq2seq {loss} vs {ln_v}");
        let mlm = m.encoder_only_mlm_loss(&history(), &[2, 6], &[20, 30]).unwrap();
        assert!((mlm - ln_v).abs() < 0.15 * ln_v, "mlm {mlm} vs {ln_v}");
    }
}

#[test]
fn pad_targets_are_ignored() {
    let m = Model::init(tiny(16, 4), 5).unwrap();
    let a = m.seq2seq_loss(&history(), &[20, 24, EOS]).unwrap();
    let b = m.seq2seq_loss(&history(), &[20, 24, EOS, PAD, PAD]).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn empty_objectives_error() {
    let m = Model::init(tiny(16, 4), 5).unwrap();
    assert!(m.seq2seq_loss(&history(), &[]).is_err());
    assert!(m.encoder_only_mlm_loss(&history(), &[], &[]).is_err());
    assert!(m.encoder_only_mlm_loss(&history(), &[1], &[1, 2]).is_err());
    assert!(m.encoder_only_mlm_loss(&history(), &[99], &[20]).is_err());
}

#[test]
fn risk_score_is_a_deterministic_probability() {
    let m = Model::init(tiny(16, 4), 6).unwrap();
    let p = m.risk_score(&history()).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(p, m.risk_score(&history()).unwrap());
}

#[test]
fn dropout_only_in_training() {
    let mut cfg = tiny(16, 4);
    cfg.dropout_prob = 0.3;
    let m = Model::init(cfg, 7).unwrap();
    let eval = m.seq2seq_loss(&history(), &[20, EOS]).unwrap();
    assert_eq!(eval, m.seq2seq_loss(&history(), &[20, EOS]).unwrap());
    let mut rng = crate::rng::seeded(0);
    let mut g = Graph::new();
    let loss = m
        .seq2seq_loss_graph(&mut g, &history(), &[20, EOS], &mut Mode::Train(&mut rng))
        .unwrap();
    assert_ne!(g.value(loss).item(), eval);
}

#[test]
fn attention_capture_counts_and_rows() {
    let cfg = ModelConfig {
        n_encoder_layers: 3,
        n_decoder_layers: 2,
        ..tiny(16, 4)
    };
    let m = Model::init(cfg, 8).unwrap();
    let h = history().padded(12);
    let prefix = [BOS, 20, 21];
    let records = m.capture_attention(&h, &prefix).unwrap();
    assert_eq!(records.len(), 4 * (2 * 2 + 3));
    for r in &records {
        let (queries, keys): (&[u32], &[u32]) = match r.side {
            AttentionSide::EncoderSelf => (&h.token_ids, &h.token_ids),
            AttentionSide::DecoderSelf => (&prefix, &prefix),
            AttentionSide::Cross => (&prefix, &h.token_ids),
        };
        assert_eq!(r.query_tokens, queries);
        assert_eq!(r.key_tokens, keys);
        assert_eq!(r.weights.len(), queries.len());
        for (qi, row) in r.weights.iter().enumerate() {
            assert_eq!(row.len(), keys.len());
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for (ki, w) in row.iter().enumerate() {
                if keys[ki] == PAD && queries[qi] != PAD {
                    assert_eq!(*w, 0.0);
                }
                if r.side == AttentionSide::DecoderSelf && ki > qi {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }
}

fn check(model: &Model, build: impl Fn(&mut Graph, &Model) -> crate::Result<crate::autodiff::Var> + Copy) -> f64 {
    let grads = grads_of(model, build);
    let cfg = model.config().clone();
    let report = finite_diff_check(
        model.params(),
        &grads,
        |p| {
            let m = Model::from_params(cfg.clone(), p.clone())?;
            let mut g = Graph::new().centered();
            let loss = build(&mut g, &m)?;
            Ok(g.value(loss).item())
        },
        1e-5,
        4,
        11,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn seq2seq_gradients_match_finite_differences() {
    let m = Model::init(tiny(8, 2), 9).unwrap();
    let err = check(&m, |g, m| m.seq2seq_loss_graph(g, &history().padded(11), &[20, 24, EOS], &mut Mode::Eval));
    assert!(err < 1e-6, "max rel error {err}");
}

#[test]
fn mlm_gradients_match_finite_differences() {
    let m = Model::init(tiny(8, 2), 10).unwrap();
    let err = check(&m, |g, m| m.mlm_loss_graph(g, &history(), &[2, 5, 6], &[20, 21, 30], &mut Mode::Eval));
    assert!(err < 1e-6, "max rel error {err}");
}

#[test]
fn risk_gradients_match_finite_differences() {
    let m = Model::init(tiny(8, 2), 12).unwrap();
    let err = check(&m, |g, m| {
        let z = m.risk_logit_graph(g, &history(), &mut Mode::Eval)?;
        g.bce_with_logits(z, &[1.0])
    });
    assert!(err < 1e-6, "max rel error {err}");
}

#[test]
fn relu_variant_runs() {
    let cfg = ModelConfig {
        activation: Activation::Relu,
        ..tiny(16, 4)
    };
    let m = Model::init(cfg, 13).unwrap();
    let loss = m.seq2seq_loss(&history(), &[20, EOS]).unwrap();
    assert!(loss.is_finite());
    let _: Vec<_> = m.capture_attention(&history(), &[BOS]).unwrap();
}
