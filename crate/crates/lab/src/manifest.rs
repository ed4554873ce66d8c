use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::files;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of_file(path: &Path) -> Result<Self> {
        let data = files::read_bytes(path)?;
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: files::sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

/// Record of one subcommand invocation. Together with the inputs it pins
/// down every output; only `duration_secs` varies between reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

/// Collects inputs and outputs while a subcommand runs.
pub struct ManifestBuilder {
    subcommand: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(subcommand: &str) -> Self {
        ManifestBuilder {
            subcommand: subcommand.into(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `bytes` atomically and records the file as an output.
    pub fn emit(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        files::write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Checksums everything and writes `manifest.json` into `out_dir`.
    pub fn finish<C: Serialize>(self, out_dir: &Path, config: &C, seed: Option<u64>) -> Result<RunManifest> {
        let hash = |paths: &[PathBuf]| paths.iter().map(|p| Artifact::of_file(p)).collect::<Result<Vec<_>>>();
        let manifest = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            inputs: hash(&self.inputs)?,
            outputs: hash(&self.outputs)?,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        files::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}
