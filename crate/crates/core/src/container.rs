//! Session containers: a JSON manifest plus one raw little-endian array file
//! per modality, and a dataset index tying sessions together.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Matrix, SessionRecord, Split, ZStats};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const INDEX: &str = "index.json";
pub const SPLIT: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerManifest {
    pub schema_version: u32,
    pub session_id: String,
    pub subject_id: String,
    pub bin_ms: f64,
    pub n_timesteps: usize,
    pub n_spikes: usize,
    pub n_lfp: usize,
    pub n_behavior: usize,
    pub n_latents: usize,
    pub lfp_stats: Option<ZStats>,
    pub behavior_stats: Option<ZStats>,
}

/// Dataset-level index listing session directories in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub seq_len: usize,
    pub seed: Option<u64>,
    pub sessions: Vec<String>,
}

const SPIKES: &str = "spikes.u8";
const LFP: &str = "lfp.f32";
const BEHAVIOR: &str = "behavior.f32";
const LATENTS: &str = "true_latents.f32";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(m: &Matrix<f32>) -> Vec<u8> {
    m.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write(path, (text + "\n").as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes one session into `dir`.
pub fn write_session(dir: &Path, rec: &SessionRecord) -> Result<()> {
    rec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ContainerManifest {
        schema_version: SCHEMA_VERSION,
        session_id: rec.session_id.clone(),
        subject_id: rec.subject_id.clone(),
        bin_ms: rec.bin_ms,
        n_timesteps: rec.n_timesteps(),
        n_spikes: rec.n_spikes(),
        n_lfp: rec.n_lfp(),
        n_behavior: rec.n_behavior(),
        n_latents: rec.true_latents.as_ref().map_or(0, |m| m.cols),
        lfp_stats: rec.lfp_stats.clone(),
        behavior_stats: rec.behavior_stats.clone(),
    };
    if let Some(s) = &rec.spikes {
        write(&dir.join(SPIKES), &s.data)?;
    }
    for (name, m) in [(LFP, &rec.lfp), (BEHAVIOR, &rec.behavior), (LATENTS, &rec.true_latents)] {
        if let Some(m) = m {
            write(&dir.join(name), &f32_bytes(m))?;
        }
    }
    write_json(&dir.join(MANIFEST), &manifest)
}

fn read_array(dir: &Path, name: &str, rows: usize, cols: usize, width: usize) -> Result<Option<Vec<u8>>> {
    if cols == 0 {
        return Ok(None);
    }
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = rows * cols * width;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: dim mismatch: manifest says {rows}x{cols} ({expected} bytes) but the file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(Some(bytes))
}

fn f32_matrix(bytes: Option<Vec<u8>>, rows: usize, cols: usize) -> Result<Option<Matrix<f32>>> {
    bytes
        .map(|b| {
            let data = b
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Matrix::new(rows, cols, data)
        })
        .transpose()
}

pub fn read_session(dir: &Path) -> Result<SessionRecord> {
    let m: ContainerManifest = read_json(&dir.join(MANIFEST))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            dir.display(),
            m.schema_version
        )));
    }
    let t = m.n_timesteps;
    let spikes = read_array(dir, SPIKES, t, m.n_spikes, 1)?
        .map(|b| Matrix::new(t, m.n_spikes, b))
        .transpose()?;
    let lfp = f32_matrix(read_array(dir, LFP, t, m.n_lfp, 4)?, t, m.n_lfp)?;
    let behavior = f32_matrix(read_array(dir, BEHAVIOR, t, m.n_behavior, 4)?, t, m.n_behavior)?;
    let true_latents = f32_matrix(read_array(dir, LATENTS, t, m.n_latents, 4)?, t, m.n_latents)?;
    let rec = SessionRecord {
        session_id: m.session_id,
        subject_id: m.subject_id,
        bin_ms: m.bin_ms,
        spikes,
        lfp,
        behavior,
        true_latents,
        lfp_stats: m.lfp_stats,
        behavior_stats: m.behavior_stats,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn write_split(dir: &Path, split: &Split) -> Result<()> {
    write_json(&dir.join(SPLIT), split)
}

pub fn read_split(dir: &Path) -> Result<Split> {
    read_json(&dir.join(SPLIT))
}

/// Directory of one session inside a dataset.
pub fn session_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

/// Writes sessions, their splits and the index.
pub fn write_dataset(root: &Path, index: &DatasetIndex, sessions: &[(SessionRecord, Split)]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (rec, split) in sessions {
        let dir = session_dir(root, &rec.session_id);
        write_session(&dir, rec)?;
        write_split(&dir, split)?;
    }
    write_json(&root.join(INDEX), index)
}

/// Reads every session listed in the index, with its split.
pub fn read_dataset(root: &Path) -> Result<(DatasetIndex, Vec<(SessionRecord, Split)>)> {
    let index: DatasetIndex = read_json(&root.join(INDEX))?;
    if index.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} is not supported",
            root.display(),
            index.schema_version
        )));
    }
    let mut out = Vec::with_capacity(index.sessions.len());
    for id in &index.sessions {
        let dir = session_dir(root, id);
        out.push((read_session(&dir)?, read_split(&dir)?));
    }
    Ok((index, out))
}

/// True when `dir` exists and has at least one entry.
pub fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}
