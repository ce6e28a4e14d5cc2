//! Staged artifact output. Nothing touches the output directory until
//! every artifact of a command has been computed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub artifact: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub sha256: String,
    pub bytes: usize,
    /// Rotary variant the artifact was evaluated with, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// `trained` when evaluated with the training variant, `swapped` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
    pub variant: Option<String>,
    pub mode: Option<String>,
}

impl Artifact {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            bytes,
            variant: None,
            mode: None,
        }
    }

    pub fn for_variant(mut self, variant: &str, swapped: bool) -> Self {
        self.variant = Some(variant.to_string());
        self.mode = Some(if swapped { "swapped" } else { "trained" }.to_string());
        self
    }
}

pub struct Staging {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

impl Staging {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            artifacts: Vec::new(),
        }
    }

    pub fn push(&mut self, artifact: Artifact) {
        self.artifacts.push(artifact);
    }

    /// Writes every artifact (via temporary file and rename) and merges the
    /// entries into the manifest, replacing older entries of the same name.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut entries = read_manifest(dir)?;
        let mut written = Vec::new();
        for a in &self.artifacts {
            let path = dir.join(&a.name);
            write_atomic(&path, &a.bytes)?;
            entries.retain(|e| e.artifact != a.name);
            entries.push(ManifestEntry {
                artifact: a.name.clone(),
                command: self.command.clone(),
                config_hash: self.config_hash.clone(),
                seed: self.seed,
                sha256: sha256_hex(&a.bytes),
                bytes: a.bytes.len(),
                variant: a.variant.clone(),
                mode: a.mode.clone(),
            });
            written.push(path);
        }
        entries.sort_by(|a, b| a.artifact.cmp(&b.artifact));
        let mut buf = Vec::new();
        ropelab::report::write_ndjson(&mut buf, &entries)?;
        write_atomic(&dir.join(MANIFEST), &buf)?;
        Ok(written)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad manifest line in {}", path.display())))
        .collect()
}
