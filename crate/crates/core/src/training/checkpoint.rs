//! On-disk checkpoints: a JSON manifest plus a little-endian `f64` blob.
//!
//! Layout of `params.bin`: every parameter in name order, then the first
//! and second AdamW moments in name order. Offsets are listed in the
//! manifest so readers never depend on the ordering rule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numkit::{OptimState, ParamStore, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tokenizer::Tokenizer;

pub const FORMAT: &str = "neurodistill-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(r: &ChaCha8Rng) -> Self {
        Self {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Data(format!("invalid RNG word position `{}`", self.word_pos)))?;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Vec<TensorEntry>,
    pub first_moments: Vec<TensorEntry>,
    pub second_moments: Vec<TensorEntry>,
    pub optim_step: u64,
    pub epoch: u32,
    pub rng: RngState,
    pub best_val: Option<f64>,
    pub since_best: u32,
    /// SHA-256 of `params.bin`.
    pub blob_sha256: String,
}

/// A loaded checkpoint, kept in `f64` until cast.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f64>,
    pub first: BTreeMap<String, Tensor<f64>>,
    pub second: BTreeMap<String, Tensor<f64>>,
}

fn push_tensors<'a, F: Scalar + 'a>(
    it: impl Iterator<Item = (&'a String, &'a Tensor<F>)>,
    blob: &mut Vec<u8>,
) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    for (name, t) in it {
        out.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() / 8,
        });
        for &v in t.data() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a parameter store's values in name order.
pub fn params_hash<F: Scalar>(p: &ParamStore<F>) -> String {
    let mut blob = Vec::new();
    push_tensors(p.iter(), &mut blob);
    let mut h = Sha256::new();
    for n in p.names() {
        h.update(n.as_bytes());
    }
    h.update(&blob);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `state` into `dir` (created if needed).
pub fn save<F: Scalar>(dir: &Path, state: &TrainState<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let params = push_tensors(state.model.params.iter(), &mut blob);
    let first_moments = push_tensors(state.optim.first.iter(), &mut blob);
    let second_moments = push_tensors(state.optim.second.iter(), &mut blob);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: state.model.config.clone(),
        tokenizer: state.model.tokenizer.clone(),
        params,
        first_moments,
        second_moments,
        optim_step: state.optim.step,
        epoch: state.epoch,
        rng: RngState::capture(&state.rng),
        best_val: state.best_val,
        since_best: state.since_best,
        blob_sha256: sha256_hex(&blob),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(dir.join(MANIFEST), e))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

fn read_tensors(entries: &[TensorEntry], words: &[f64], path: &Path) -> Result<BTreeMap<String, Tensor<f64>>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n).filter(|&end| end <= words.len()).ok_or_else(|| {
            Error::Data(format!("{}: tensor `{}` runs past the end of the blob", path.display(), e.name))
        })?;
        let t = Tensor::new(e.shape.clone(), words[e.offset..end].to_vec())?;
        out.insert(e.name.clone(), t);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!("{}: not a checkpoint manifest", mpath.display())));
        }
        if manifest.version != VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint version {} (expected {VERSION})",
                mpath.display(),
                manifest.version
            )));
        }
        let bpath = dir.join(BLOB);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() % 8 != 0 || sha256_hex(&bytes) != manifest.blob_sha256 {
            return Err(Error::Data(format!("{}: blob is corrupt or truncated", bpath.display())));
        }
        let words: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = ParamStore::new();
        for (n, t) in read_tensors(&manifest.params, &words, &bpath)? {
            params.insert(n, t);
        }
        let first = read_tensors(&manifest.first_moments, &words, &bpath)?;
        let second = read_tensors(&manifest.second_moments, &words, &bpath)?;
        Ok(Self {
            manifest,
            params,
            first,
            second,
        })
    }

    /// The stored model cast to `F`.
    pub fn model<F: Scalar>(&self) -> Model<F> {
        Model {
            config: self.manifest.model.clone(),
            tokenizer: self.manifest.tokenizer.clone(),
            params: self.params.cast(),
        }
    }

    /// Full training state for resuming.
    pub fn state<F: Scalar>(&self) -> Result<TrainState<F>> {
        let cast = |m: &BTreeMap<String, Tensor<f64>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Ok(TrainState {
            model: self.model(),
            optim: OptimState {
                step: self.manifest.optim_step,
                first: cast(&self.first),
                second: cast(&self.second),
            },
            epoch: self.manifest.epoch,
            rng: self.manifest.rng.restore()?,
            best_val: self.manifest.best_val,
            since_best: self.manifest.since_best,
        })
    }

    /// Copies parameters whose names start with `prefix` into `model`;
    /// shapes must match and the model configurations must agree.
    pub fn load_into<F: Scalar>(&self, model: &mut Model<F>, prefix: &str) -> Result<usize> {
        if model.config != self.manifest.model {
            return Err(Error::Config("checkpoint was written for a different model configuration".into()));
        }
        let mut n = 0;
        for (name, t) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            match model.params.get(name) {
                Some(cur) if cur.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                        t.shape(),
                        cur.shape()
                    )))
                }
                None if !name.starts_with("space.") => {
                    return Err(Error::Config(format!("model has no parameter `{name}`")))
                }
                _ => {}
            }
            model.params.insert(name.clone(), t.cast());
            n += 1;
        }
        for (id, entry) in &self.manifest.tokenizer.sessions {
            if model.params.contains(&crate::tokenizer::space_name(id)) {
                model.tokenizer.sessions.entry(id.clone()).or_insert(*entry);
            }
        }
        Ok(n)
    }
}
