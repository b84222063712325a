//! Run manifests: what was run, with which settings, on which bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Git-style object hash: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file, or of a directory as a sorted tree of `name hash` lines.
pub fn content_hash(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).with_context(|| format!("cannot read {}", path.display()))?;
    if !meta.is_dir() {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("cannot list {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.retain(|p| p.file_name().is_some_and(|n| n != "manifest.json"));
    entries.sort();
    let mut tree = String::new();
    for p in &entries {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        tree.push_str(&format!("{name} {}\n", content_hash(p)?));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", tree.len()).as_bytes());
    h.update(tree.as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| Ok(FileHash { path: p.display().to_string(), hash: content_hash(p)? }))
        .collect()
}

/// Write `manifest.json` into `out_dir`.
pub fn write(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: &impl Serialize,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        command: command.to_string(),
        argv: std::env::args().skip(1).collect(),
        seed,
        config: serde_json::to_value(config)?,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
