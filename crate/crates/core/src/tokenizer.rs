//! Spatial patch tokenization with shared value embeddings and
//! session-specific space embeddings.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Mutex, OnceLock};

use log::warn;
use numkit::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bind::Binder;
use crate::data::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub n_signals: usize,
    pub patch_size: usize,
    pub n_patches: usize,
    pub pad: usize,
}

/// `ceil(n / S)` patches; the last one padded with `n_patches * S - n` dims.
pub fn layout(n_signals: usize, patch_size: usize) -> PatchLayout {
    assert!(n_signals > 0 && patch_size > 0, "layout needs positive sizes");
    let n_patches = n_signals.div_ceil(patch_size);
    PatchLayout {
        n_signals,
        patch_size,
        n_patches,
        pad: n_patches * patch_size - n_signals,
    }
}

impl PatchLayout {
    /// `[n_patches x S]` with 1 on real dims and 0 on padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.n_patches * self.patch_size).map(|i| i < self.n_signals).collect()
    }

    pub fn tokens(&self, t: usize) -> usize {
        t * self.n_patches
    }
}

/// Signal type a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Binned spike counts through the value table.
    Spike,
    /// Continuous LFP.
    Lfp,
    /// z-scored spikes concatenated channel-wise with LFP.
    Multimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueEmbed {
    Table,
    Linear,
    DilatedConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub modality: Modality,
    pub embed: ValueEmbed,
    pub patch_size: usize,
    pub d: usize,
    pub k_max: u8,
    pub conv_kernel: usize,
    pub conv_dilations: Vec<usize>,
    pub space_init_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub layout: PatchLayout,
    /// Leading spike dims of a multimodal input.
    pub spike_dims: usize,
}

/// One sequence of model input, `[T x n_signals]`.
#[derive(Clone, Debug, PartialEq)]
pub enum SeqInput {
    Counts(Matrix<u8>),
    Values(Matrix<f32>),
}

impl SeqInput {
    pub fn rows(&self) -> usize {
        match self {
            SeqInput::Counts(m) => m.rows,
            SeqInput::Values(m) => m.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            SeqInput::Counts(m) => m.cols,
            SeqInput::Values(m) => m.cols,
        }
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        match self {
            SeqInput::Counts(m) => m.get(r, c) as f64,
            SeqInput::Values(m) => m.get(r, c) as f64,
        }
    }
}

/// Embedded tokens of one sequence in time-major order (`index = t * P + j`).
#[derive(Clone, Debug)]
pub struct Tokens {
    pub x: Var,
    pub t: usize,
    pub n_patches: usize,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.t * self.n_patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time_of(&self, i: usize) -> usize {
        i / self.n_patches
    }

    pub fn patch_of(&self, i: usize) -> usize {
        i % self.n_patches
    }
}

pub fn space_name(session: &str) -> String {
    format!("space.{session}")
}

fn clamp_warned() -> &'static Mutex<HashSet<String>> {
    static W: OnceLock<Mutex<HashSet<String>>> = OnceLock::new();
    W.get_or_init(|| Mutex::new(HashSet::new()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub spec: TokenizerSpec,
    pub sessions: BTreeMap<String, SessionEntry>,
}

impl Tokenizer {
    pub fn new(spec: TokenizerSpec) -> Result<Self> {
        if spec.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if spec.embed == ValueEmbed::Table && spec.d % spec.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide d = {} for the value table",
                spec.patch_size, spec.d
            )));
        }
        if (spec.modality == Modality::Spike) != (spec.embed == ValueEmbed::Table) {
            return Err(Error::Config("only spike models use the value table".into()));
        }
        if spec.embed == ValueEmbed::DilatedConv && (spec.conv_kernel == 0 || spec.conv_dilations.is_empty()) {
            return Err(Error::Config("dilated conv needs a kernel and at least one layer".into()));
        }
        Ok(Self {
            spec,
            sessions: BTreeMap::new(),
        })
    }

    /// Creates the shared value-embedding parameters.
    pub fn init_params<F: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamStore<F>, rng: &mut R) {
        let (s, d) = (self.spec.patch_size, self.spec.d);
        match self.spec.embed {
            ValueEmbed::Table => {
                let rows = self.spec.k_max as usize + 1;
                params.insert("tok.value", Tensor::randn([rows, d / s], 1.0, rng));
            }
            ValueEmbed::Linear => {
                params.insert("tok.lin.w", Tensor::randn([s, d], 1.0 / (s as f64).sqrt(), rng));
                params.insert("tok.lin.b", Tensor::zeros([d]));
            }
            ValueEmbed::DilatedConv => {
                let k = self.spec.conv_kernel;
                for l in 0..self.spec.conv_dilations.len() {
                    let fan_in = if l == 0 { s } else { d };
                    let std = 1.0 / ((fan_in * k) as f64).sqrt();
                    for tap in 0..k {
                        params.insert(format!("tok.conv{l}.w{tap}"), Tensor::randn([fan_in, d], std, rng));
                    }
                    params.insert(format!("tok.conv{l}.b"), Tensor::zeros([d]));
                }
            }
        }
    }

    /// Registers a new session and its space embeddings (std `space_init_std`).
    pub fn register_session<F: Scalar, R: Rng + ?Sized>(
        &mut self,
        params: &mut ParamStore<F>,
        session: &str,
        n_signals: usize,
        spike_dims: usize,
        rng: &mut R,
    ) -> Result<PatchLayout> {
        if self.sessions.contains_key(session) {
            return Err(Error::Config(format!(
                "session {session} is already registered for {:?}",
                self.spec.modality
            )));
        }
        if n_signals == 0 {
            return Err(Error::Data(format!("session {session} has no signals")));
        }
        let lay = layout(n_signals, self.spec.patch_size);
        params.insert(
            space_name(session),
            Tensor::randn([lay.n_patches, self.spec.d], self.spec.space_init_std, rng),
        );
        self.sessions.insert(
            session.to_string(),
            SessionEntry {
                layout: lay,
                spike_dims,
            },
        );
        Ok(lay)
    }

    pub fn session(&self, session: &str) -> Result<&SessionEntry> {
        self.sessions
            .get(session)
            .ok_or_else(|| Error::Config(format!("session {session} is not registered")))
    }

    /// Patch values `[T*P x S]` with zeros on padding, plus the pad mask.
    pub fn patch_values<F: Scalar>(&self, lay: &PatchLayout, input: &SeqInput) -> (Tensor<F>, Tensor<F>) {
        let (t, p, s) = (input.rows(), lay.n_patches, lay.patch_size);
        let mut v = vec![F::zero(); t * p * s];
        let mut m = vec![F::zero(); t * p * s];
        for step in 0..t {
            for c in 0..lay.n_signals {
                let i = step * p * s + c;
                v[i] = F::from_f64_lossy(input.value(step, c));
                m[i] = F::one();
            }
        }
        (
            Tensor::new([t * p, s], v).expect("shape"),
            Tensor::new([t * p, s], m).expect("shape"),
        )
    }

    fn table_indices(&self, session: &str, lay: &PatchLayout, counts: &Matrix<u8>) -> Vec<usize> {
        let (p, s) = (lay.n_patches, lay.patch_size);
        let k_max = self.spec.k_max;
        let mut clamped = false;
        let mut idx = vec![0usize; counts.rows * p * s];
        for step in 0..counts.rows {
            for c in 0..lay.n_signals {
                let k = counts.get(step, c);
                if k > k_max {
                    clamped = true;
                }
                idx[step * p * s + c] = k.min(k_max) as usize;
            }
        }
        if clamped {
            let mut w = clamp_warned().lock().expect("warn set");
            if w.insert(session.to_string()) {
                warn!("session {session}: spike counts above {k_max} clamped");
            }
        }
        idx
    }

    /// Value embeddings `[T*P x d]` before the space embedding.
    pub fn value_embed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Binder<F>,
        session: &str,
        input: &SeqInput,
    ) -> Result<Var> {
        let entry = self.session(session)?;
        let lay = entry.layout;
        if input.cols() != lay.n_signals {
            return Err(Error::Data(format!(
                "session {session} expects {} signals, got {}",
                lay.n_signals,
                input.cols()
            )));
        }
        let (t, p, d) = (input.rows(), lay.n_patches, self.spec.d);
        match (self.spec.embed, input) {
            (ValueEmbed::Table, SeqInput::Counts(counts)) => {
                let idx = self.table_indices(session, &lay, counts);
                let table = b.get(tape, "tok.value")?;
                let rows = tape.gather_rows(table, &idx)?;
                Ok(tape.reshape(rows, &[t * p, d])?)
            }
            (ValueEmbed::Linear, SeqInput::Values(_)) => {
                let (vals, _) = self.patch_values::<F>(&lay, input);
                let x = tape.constant(vals);
                let w = b.get(tape, "tok.lin.w")?;
                let bias = b.get(tape, "tok.lin.b")?;
                let y = tape.matmul(x, w)?;
                Ok(tape.add_row(y, bias)?)
            }
            (ValueEmbed::DilatedConv, SeqInput::Values(_)) => {
                let (vals, _) = self.patch_values::<F>(&lay, input);
                let mut h = tape.constant(vals);
                let layers = self.spec.conv_dilations.len();
                for (l, &dil) in self.spec.conv_dilations.iter().enumerate() {
                    let mut acc: Option<Var> = None;
                    for tap in 0..self.spec.conv_kernel {
                        // Tap k reads the patch's own value k*dil steps back.
                        let shifted = tape.shift_rows(h, tap * dil * p);
                        let w = b.get(tape, &format!("tok.conv{l}.w{tap}"))?;
                        let y = tape.matmul(shifted, w)?;
                        acc = Some(match acc {
                            None => y,
                            Some(a) => tape.add(a, y)?,
                        });
                    }
                    let bias = b.get(tape, &format!("tok.conv{l}.b"))?;
                    h = tape.add_row(acc.expect("kernel > 0"), bias)?;
                    if l + 1 < layers {
                        h = tape.gelu(h);
                    }
                }
                Ok(h)
            }
            (embed, _) => Err(Error::Data(format!("{embed:?} embedding got the wrong input kind"))),
        }
    }

    /// Full tokens: value embedding plus the session's space embeddings.
    pub fn tokenize<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Binder<F>,
        session: &str,
        input: &SeqInput,
    ) -> Result<Tokens> {
        let value = self.value_embed(tape, b, session, input)?;
        let lay = self.session(session)?.layout;
        let t = input.rows();
        let space = b.get(tape, &space_name(session))?;
        let which: Vec<usize> = (0..t * lay.n_patches).map(|i| i % lay.n_patches).collect();
        let sp = tape.gather_rows(space, &which)?;
        let x = tape.add(value, sp)?;
        Ok(Tokens {
            x,
            t,
            n_patches: lay.n_patches,
        })
    }
}

/// Channel-wise concatenation of z-scored spikes and LFP for the multimodal
/// model; spike dims come first. `zero_spikes` imputes them at the z-scored
/// mean, 0.
pub fn multimodal_input(
    spikes: &Matrix<u8>,
    spike_stats: &crate::data::ZStats,
    lfp: &Matrix<f32>,
    zero_spikes: bool,
) -> Result<SeqInput> {
    if spikes.rows != lfp.rows {
        return Err(Error::Data("spike and lfp sequences differ in length".into()));
    }
    let (ns, ny) = (spikes.cols, lfp.cols);
    let mut data = Vec::with_capacity(spikes.rows * (ns + ny));
    for r in 0..spikes.rows {
        for c in 0..ns {
            let z = if zero_spikes {
                0.0
            } else {
                (spikes.get(r, c) as f64 - spike_stats.mean[c]) / spike_stats.std[c]
            };
            data.push(z as f32);
        }
        data.extend_from_slice(lfp.row(r));
    }
    Ok(SeqInput::Values(Matrix::new(spikes.rows, ns + ny, data)?))
}
