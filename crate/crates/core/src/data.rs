//! In-memory session records, sequence windows and train/val/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `[rows x cols]` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Data(format!(
                "array of {} values cannot be shaped [{rows} x {cols}]",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Copy of rows `start..start + len`.
    pub fn rows_slice(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One recording session, binned at `bin_ms`.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub subject_id: String,
    pub bin_ms: f64,
    pub spikes: Option<Matrix<u8>>,
    pub lfp: Option<Matrix<f32>>,
    pub behavior: Option<Matrix<f32>>,
    /// Generator ground truth; only evaluation code may read it.
    pub true_latents: Option<Matrix<f32>>,
    pub lfp_stats: Option<ZStats>,
    pub behavior_stats: Option<ZStats>,
}

impl SessionRecord {
    pub fn n_timesteps(&self) -> usize {
        [
            self.spikes.as_ref().map(|m| m.rows),
            self.lfp.as_ref().map(|m| m.rows),
            self.behavior.as_ref().map(|m| m.rows),
            self.true_latents.as_ref().map(|m| m.rows),
        ]
        .into_iter()
        .flatten()
        .next()
        .unwrap_or(0)
    }

    pub fn n_spikes(&self) -> usize {
        self.spikes.as_ref().map_or(0, |m| m.cols)
    }

    pub fn n_lfp(&self) -> usize {
        self.lfp.as_ref().map_or(0, |m| m.cols)
    }

    pub fn n_behavior(&self) -> usize {
        self.behavior.as_ref().map_or(0, |m| m.cols)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.n_timesteps();
        let lens = [
            ("spikes", self.spikes.as_ref().map(|m| m.rows)),
            ("lfp", self.lfp.as_ref().map(|m| m.rows)),
            ("behavior", self.behavior.as_ref().map(|m| m.rows)),
            ("true_latents", self.true_latents.as_ref().map(|m| m.rows)),
        ];
        for (name, rows) in lens {
            if let Some(r) = rows {
                if r != t {
                    return Err(Error::Data(format!(
                        "session {}: {name} has {r} timesteps, expected {t}",
                        self.session_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn require_spikes(&self) -> Result<&Matrix<u8>> {
        self.spikes
            .as_ref()
            .ok_or_else(|| Error::Data(format!("session {} has no spikes", self.session_id)))
    }

    pub fn require_lfp(&self) -> Result<&Matrix<f32>> {
        self.lfp
            .as_ref()
            .ok_or_else(|| Error::Data(format!("session {} has no lfp", self.session_id)))
    }

    pub fn require_behavior(&self) -> Result<&Matrix<f32>> {
        self.behavior
            .as_ref()
            .ok_or_else(|| Error::Data(format!("session {} has no behavior", self.session_id)))
    }
}

/// Sequence indices for each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Training sequences including the validation subset.
    pub fn fit(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Shuffles `0..n` with a fixed seed, takes `test_fraction` as test and
/// `val_fraction` of the remainder as validation.
pub fn split_sequences(n: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    let rest = n - n_test;
    let n_val = ((rest as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(rest.saturating_sub(1));
    let mut test = idx[..n_test].to_vec();
    let mut val = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Split { train, val, test }
}

/// A session cut into equal windows, with its split.
#[derive(Clone, Debug)]
pub struct SegmentedSession {
    pub record: SessionRecord,
    pub seq_len: usize,
    pub n_seqs: usize,
    pub split: Split,
}

impl SegmentedSession {
    pub fn new(record: SessionRecord, seq_len: usize, split: Split) -> Result<Self> {
        record.validate()?;
        let t = record.n_timesteps();
        if seq_len == 0 || t < seq_len {
            return Err(Error::Data(format!(
                "session {} has {t} timesteps, fewer than one sequence of {seq_len}",
                record.session_id
            )));
        }
        let n_seqs = t / seq_len;
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= n_seqs {
                return Err(Error::Data(format!(
                    "split references sequence {i} but session {} has {n_seqs}",
                    record.session_id
                )));
            }
        }
        Ok(Self {
            record,
            seq_len,
            n_seqs,
            split,
        })
    }

    pub fn id(&self) -> &str {
        &self.record.session_id
    }

    pub fn spikes(&self, seq: usize) -> Result<Matrix<u8>> {
        Ok(self.record.require_spikes()?.rows_slice(seq * self.seq_len, self.seq_len))
    }

    pub fn lfp(&self, seq: usize) -> Result<Matrix<f32>> {
        Ok(self.record.require_lfp()?.rows_slice(seq * self.seq_len, self.seq_len))
    }

    pub fn behavior(&self, seq: usize) -> Result<Matrix<f32>> {
        Ok(self.record.require_behavior()?.rows_slice(seq * self.seq_len, self.seq_len))
    }

    pub fn latents(&self, seq: usize) -> Option<Matrix<f32>> {
        self.record
            .true_latents
            .as_ref()
            .map(|m| m.rows_slice(seq * self.seq_len, self.seq_len))
    }
}
