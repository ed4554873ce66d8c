use decode_core::corpus::Vocabulary;
use decode_core::model::{Model, ModelConfig};
use decode_core::training::Checkpoint;
use decode_lab::checkpoint::{decode, encode, load, load_expecting, save};
use decode_lab::error::{EXIT_INVARIANT, EXIT_USAGE};
use decode_lab::LabError;
use proptest::prelude::*;
use std::path::Path;

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::from_codes((0..n).map(|i| format!("C{i:03}")).collect(), 1)
}

fn small(seed: u64, d_model: usize) -> Checkpoint {
    let v = vocab(7);
    let cfg = ModelConfig {
        vocab_size: v.len(),
        d_model,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        d_ff: 12,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    Checkpoint::from_model(Model::init(cfg, seed).unwrap(), v)
}

fn bits(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    ck.params
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn round_trip_is_bit_exact(seed in any::<u64>(), scale in -300i32..300) {
        let mut ck = small(seed, 8);
        // Push values across the exponent range, including subnormals.
        for (i, x) in ck.params.iter().map(|(id, _, _)| id).collect::<Vec<_>>().into_iter().enumerate() {
            for v in ck.params.get_mut(x).data_mut() {
                *v *= 2f64.powi(scale + i as i32 % 7);
            }
        }
        let back = decode(&encode(&ck), Path::new("mem")).unwrap();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(back.config, ck.config);
        prop_assert_eq!(back.vocab, ck.vocab);
    }
}

#[test]
fn save_load_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dckp");
    let ck = small(3, 8);
    save(&path, &ck).unwrap();
    assert_eq!(bits(&load(&path).unwrap()), bits(&ck));
    assert_eq!(std::fs::read(&path).unwrap(), encode(&ck));
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode(&small(4, 4));
    for cut in 0..bytes.len() {
        let err = decode(&bytes[..cut], Path::new("t")).unwrap_err();
        assert!(matches!(err, LabError::Checkpoint { .. }), "cut {cut}: {err}");
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode(&longer, Path::new("t")).is_err());
}

#[test]
fn bad_magic_and_version() {
    let mut bytes = encode(&small(5, 4));
    bytes[0] = b'X';
    assert!(decode(&bytes, Path::new("t")).unwrap_err().to_string().contains("magic"));
    let mut bytes = encode(&small(5, 4));
    bytes[4] = 9;
    assert!(decode(&bytes, Path::new("t")).unwrap_err().to_string().contains("version"));
}

/// Rewrites the header so it claims `d_model` while the arrays keep their
/// shapes: every array length still adds up, so only the config check can
/// catch it.
fn with_header_edit(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + len..]);
    out
}

#[test]
fn config_disagreeing_with_arrays_is_an_invariant_breach() {
    let bytes = encode(&small(6, 8));
    let edited = with_header_edit(&bytes, |h| h["config"]["d_model"] = 4.into());
    let err = decode(&edited, Path::new("t")).unwrap_err();
    assert!(matches!(err, LabError::ConfigMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), EXIT_INVARIANT);

    let edited = with_header_edit(&bytes, |h| h["config"]["vocab_size"] = 99.into());
    assert_eq!(decode(&edited, Path::new("t")).unwrap_err().exit_code(), EXIT_INVARIANT);
}

#[test]
fn loading_under_a_different_run_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dckp");
    let ck = small(7, 8);
    save(&path, &ck).unwrap();
    let same = ModelConfig { vocab_size: 0, ..ck.config.clone() };
    assert!(load_expecting(&path, &same).is_ok());
    let other = ModelConfig { d_model: 16, ..ck.config.clone() };
    let err = load_expecting(&path, &other).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_INVARIANT);
}

#[test]
fn missing_file_is_a_usage_error() {
    let err = load(Path::new("/nonexistent/ck.dckp")).unwrap_err();
    assert!(matches!(err, LabError::Io { .. }));
    assert_eq!(err.exit_code(), EXIT_USAGE);
}
