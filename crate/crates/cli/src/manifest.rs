use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use alifuse::data::MANIFEST_NAME;
use alifuse::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const RUN_MANIFEST_NAME: &str = "run.json";

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub dataset: PathBuf,
    pub val_dataset: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub config: RunConfig,
    /// SHA-256 of the input datasets.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of the files written by the run, filled in when it ends.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(RUN_MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Digest of a dataset directory: the manifest followed by every volume it
/// references, in manifest order.
pub fn sha256_dataset(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST_NAME))?);
    for entry in alifuse::data::read_manifest(dir)? {
        h.update(entry.volume.as_bytes());
        h.update(fs::read(dir.join(&entry.volume))?);
    }
    Ok(hex::encode(h.finalize()))
}
