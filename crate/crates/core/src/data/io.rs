//! Datasets on disk.
//!
//! A dataset directory holds `manifest.jsonl`, one JSON object per record,
//! and one volume file per record under `volumes/`. A volume file is the
//! magic `ALIV`, a little-endian `u32` format version, three `u32` dims and
//! then the voxels as little-endian `f64` in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{ClinicalFields, PatientRecord};
use super::volume::Volume;
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: [u8; 4] = *b"ALIV";
pub const VOLUME_VERSION: u32 = 1;
pub const VOLUME_HEADER_LEN: usize = 20;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    /// Volume file path relative to the dataset directory.
    pub volume: String,
    #[serde(flatten)]
    pub fields: ClinicalFields,
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + v.data().len() * 8);
    out.extend_from_slice(&VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < VOLUME_HEADER_LEN {
        return Err(Error::Truncated(format!("volume header needs {VOLUME_HEADER_LEN} bytes, got {}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != VOLUME_MAGIC {
        return Err(Error::MagicMismatch { expected: VOLUME_MAGIC, found: magic });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(Error::VersionMismatch { expected: VOLUME_VERSION, found: version });
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let n: usize = dims.iter().product();
    let body = &bytes[VOLUME_HEADER_LEN..];
    if body.len() != n * 8 {
        return Err(Error::Truncated(format!("volume {dims:?} needs {} data bytes, got {}", n * 8, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Volume::new(dims, data)
}

/// Writes `records` as a dataset rooted at `dir`.
pub fn write_dataset(dir: &Path, records: &[PatientRecord]) -> Result<()> {
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_NAME))?);
    for (i, r) in records.iter().enumerate() {
        let id = format!("{i:06}");
        let rel = format!("volumes/{id}.aliv");
        fs::write(dir.join(&rel), encode_volume(&r.volume))?;
        let entry = ManifestEntry { id, label: r.label, volume: rel, fields: r.fields.clone() };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| Error::Format { path: path.clone(), line: i + 1, message };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        entry.fields.validate().map_err(|e| format_err(e.to_string()))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Format { path, line: 0, message: "manifest has no records".into() });
    }
    Ok(entries)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<PatientRecord>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    read_manifest(dir)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let vol_path: PathBuf = dir.join(&e.volume);
            let bytes = fs::read(&vol_path)?;
            let volume = decode_volume(&bytes).map_err(|err| match err {
                Error::Io(_) => err,
                other => Error::Format {
                    path: manifest_path.clone(),
                    line: i + 1,
                    message: format!("{}: {other}", vol_path.display()),
                },
            })?;
            Ok(PatientRecord { volume, fields: e.fields, label: e.label })
        })
        .collect()
}
