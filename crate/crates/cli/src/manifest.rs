//! `manifest.json`: what went in, which seeds were used and how long each
//! stage took.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const LABELS: [&str; 3] = ["synth", "train", "allocate"];

/// Seed of one stage: the first eight bytes of sha256(root seed ‖ label).
pub fn stage_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub seconds: f64,
    /// Output path relative to the output directory, and its sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    /// Input path and its sha256.
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            stage_seeds: LABELS.iter().map(|l| (l.to_string(), stage_seed(seed, l))).collect(),
            config,
            inputs: BTreeMap::new(),
            stages: BTreeMap::new(),
        }
    }

    /// Continues an existing manifest when it describes the same seed and
    /// configuration, so stage-wise runs accumulate into one record.
    pub fn open(path: &Path, seed: u64, config: serde_json::Value) -> Self {
        let fresh = Self::new(seed, config);
        match std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        {
            Some(old) if old.seed == fresh.seed && old.config == fresh.config && old.version == fresh.version => old,
            _ => fresh,
        }
    }

    pub fn record_inputs(&mut self, paths: &[&Path]) -> Result<()> {
        for p in paths {
            if p.exists() {
                self.inputs.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        Ok(())
    }

    pub fn record_stage(&mut self, name: &str, seconds: f64, out_dir: &Path, outputs: &[&Path]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for p in outputs {
            let key = p.strip_prefix(out_dir).unwrap_or(p).display().to_string();
            hashes.insert(key, sha256_file(p)?);
        }
        self.stages.insert(
            name.to_string(),
            StageRecord {
                seconds,
                outputs: hashes,
            },
        );
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}
