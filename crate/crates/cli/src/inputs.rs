//! Input discovery, digests and provenance blocks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use esmerge_core::checkpoint::{load_adapter, load_bundle};
use esmerge_core::{LoraAdapter, ModelBundle, ModelConfig};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const BASE_FILE: &str = "base.esmg";

pub fn adapter_file(tag: &str) -> String {
    format!("adapter_{tag}.esmg")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Input files keyed by file name, valued by SHA-256.
#[derive(Debug, Default, Clone)]
pub struct Inputs(BTreeMap<String, String>);

impl Inputs {
    pub fn add(&mut self, path: &Path) -> Result<()> {
        self.0.insert(file_name(path), digest_file(path)?);
        Ok(())
    }
}

/// Provenance block shared by every output. Paths are left out on purpose
/// so outputs do not depend on where they were written.
pub fn provenance(command: &str, args: &impl Serialize, inputs: &Inputs, extra: Value) -> Value {
    let mut v = json!({
        "tool": "esmerge",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": args,
        "inputs": inputs.0,
    });
    if let (Value::Object(o), Value::Object(e)) = (&mut v, extra) {
        o.extend(e);
    }
    v
}

pub fn meta_with(key: &str, value: Value) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert(key.into(), value);
    m
}

pub fn ensure_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("missing input file {}", path.display());
    }
    Ok(())
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

pub fn load_adapter_file(path: &Path, inputs: &mut Inputs) -> Result<(ModelConfig, LoraAdapter)> {
    ensure_file(path)?;
    let out = load_adapter(path).with_context(|| format!("loading adapter {}", path.display()))?;
    inputs.add(path)?;
    Ok(out)
}

/// Loads the base model in `dir` and the adapters for `models` (all
/// modalities of the base when empty) into one bundle.
pub fn load_workspace(dir: &Path, models: &[String], inputs: &mut Inputs) -> Result<(ModelBundle, Vec<String>)> {
    let base_path = dir.join(BASE_FILE);
    ensure_file(&base_path)?;
    let mut bundle = load_bundle(&base_path).with_context(|| format!("loading {}", base_path.display()))?;
    inputs.add(&base_path)?;
    let models: Vec<String> = if models.is_empty() {
        bundle.modalities.iter().map(|m| m.tag.clone()).collect()
    } else {
        models.to_vec()
    };
    for tag in &models {
        let path = dir.join(adapter_file(tag));
        let (cfg, adapter) = load_adapter_file(&path, inputs)?;
        if cfg != bundle.config {
            bail!("adapter {} was built for a different model config", path.display());
        }
        bundle.adapters.insert(tag.clone(), adapter);
    }
    bundle.validate()?;
    Ok((bundle, models))
}

pub fn adapter_paths(dir: &Path, models: &[String]) -> Vec<PathBuf> {
    models.iter().map(|t| dir.join(adapter_file(t))).collect()
}
