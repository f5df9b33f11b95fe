//! Run manifest: what went in, what came out, and in which formats.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use augsearch::data::AUGD_VERSION;
use augsearch::predictor::CHECKPOINT_MAGIC;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Serialize)]
pub struct InputHash {
    pub path: String,
    /// SHA-256 over `blob <len>\0<bytes>`, the git object convention.
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub tool_version: &'static str,
    pub command: String,
    pub status: String,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
    pub formats: serde_json::Value,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config_path: &Path, cfg: &RunConfig) -> Result<Manifest> {
        let mut m = Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            status: "running".into(),
            seed: cfg.seed,
            inputs: Vec::new(),
            formats: serde_json::json!({
                "augd": AUGD_VERSION,
                "checkpoint": String::from_utf8_lossy(CHECKPOINT_MAGIC),
                "policy": "json K/N/logits/mag_upper/sigma/transform_ids",
                "trace": "csv step,round,kl_to_anchor,inner_loss,outer_loss,entropy_k,pk_T,mu_T",
            }),
            config: cfg.clone(),
            outputs: Vec::new(),
        };
        m.add_input(config_path)?;
        for p in cfg.input_files() {
            m.add_input(&p)?;
        }
        Ok(m)
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: content_hash(&bytes),
        });
        Ok(())
    }

    pub fn write_output(&mut self, dir: &Path, name: &str, contents: &str) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn finish(&mut self, dir: &Path, status: &str) -> Result<()> {
        self.status = status.to_string();
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
