//! Line-oriented file formats and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use decode_core::corpus::{Cohort, PatientRecord};
use decode_core::inference::Prediction;
use decode_core::synthgen::{LabelEntry, LabelMap};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| LabError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(LabError::io(path, e));
    }
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Reads a JSON document, reporting the line of the first syntax error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory serialization");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_pretty(value))
}

/// One JSON value per non-blank line, in file order.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| LabError::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("in-memory serialization");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(items))
}

/// Loads a cohort and rejects records that break the record invariants.
pub fn load_jsonl(path: &Path) -> Result<Cohort> {
    let cohort: Vec<PatientRecord> = read_jsonl(path)?;
    for r in &cohort {
        r.validate()?;
    }
    Ok(cohort)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let labels: Vec<LabelEntry> = read_jsonl(path)?;
    if let Some((i, e)) = labels.iter().enumerate().find(|(_, e)| e.label > 1) {
        return Err(LabError::Parse {
            path: path.into(),
            line: i + 1,
            message: format!("label {} for {} is not 0 or 1", e.label, e.patient_id),
        });
    }
    Ok(labels)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path)
}

/// A scored patient, as written to `patient_id,score,label` CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub patient_id: String,
    pub score: f64,
    pub label: u8,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("patient_id,score,label\n");
    for r in rows {
        // `{}` on f64 prints the shortest string that parses back exactly.
        out.push_str(&format!("{},{},{}\n", r.patient_id, r.score, r.label));
    }
    out
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = read_string(path)?;
    let bad = |line: usize, message: String| LabError::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "patient_id,score,label" => {}
        _ => return Err(bad(1, "expected header patient_id,score,label".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [id, score, label] = fields[..] else {
            return Err(bad(i + 1, format!("expected 3 fields, found {}", fields.len())));
        };
        let score: f64 = score.trim().parse().map_err(|e| bad(i + 1, format!("score: {e}")))?;
        let label: u8 = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(i + 1, format!("label {other:?} is not 0 or 1"))),
        };
        rows.push(ScoreRow {
            patient_id: id.to_string(),
            score,
            label,
        });
    }
    Ok(rows)
}
