//! Building blocks shared by the CLI and the end-to-end checks: model
//! construction per baseline, the training stages, and decoding.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use numkit::Tape;

use crate::bind::{Binder, Trainable};
use crate::config::{Objective, RunConfig};
use crate::data::{split_sequences, SessionRecord, SegmentedSession, Split};
use crate::error::{Error, Result};
use crate::metrics::{fit_linear_decoder, r2, LinearDecoder};
use crate::model::{Model, ModelConfig};
use crate::tokenizer::{space_name, Modality, TokenizerSpec, ValueEmbed};
use crate::training::{train, Job, SessionData, Teacher, TrainReport, TrainState};

pub type Model32 = Model<f32>;

/// Model families used by the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Spike model with the count-value table (MS-Spike).
    Spike,
    /// LFP model with the linear value embedding (SS-LFP, MS-LFP).
    LfpLinear,
    /// LFP model with the dilated causal conv embedding (Distilled).
    LfpConv,
    /// Spikes and LFP concatenated channel-wise (SS-MM).
    Multimodal,
}

/// Stable per-stage seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn model_config(cfg: &RunConfig, arch: Arch) -> ModelConfig {
    let t = &cfg.tokenizer;
    let (modality, embed, patch_size) = match arch {
        Arch::Spike => (Modality::Spike, ValueEmbed::Table, t.spike_patch),
        Arch::LfpLinear => (Modality::Lfp, ValueEmbed::Linear, t.lfp_patch),
        Arch::LfpConv => (Modality::Lfp, ValueEmbed::DilatedConv, t.lfp_patch),
        Arch::Multimodal => (Modality::Multimodal, ValueEmbed::Linear, t.spike_patch + t.lfp_patch),
    };
    ModelConfig {
        tokenizer: TokenizerSpec {
            modality,
            embed,
            patch_size,
            d: cfg.encoder.d,
            k_max: t.k_max,
            conv_kernel: t.conv_kernel,
            conv_dilations: t.conv_dilations.clone(),
            space_init_std: t.space_init_std,
        },
        encoder: cfg.encoder.clone(),
    }
}

/// Segments records and assigns each a seeded split.
pub fn prepare_sessions(cfg: &RunConfig, records: Vec<SessionRecord>) -> Result<Vec<SessionData>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let n = rec.n_timesteps() / cfg.gen.seq_len;
            let split = default_split(cfg, n, i);
            Ok(SessionData::new(SegmentedSession::new(rec, cfg.gen.seq_len, split)?))
        })
        .collect()
}

pub fn default_split(cfg: &RunConfig, n_seqs: usize, index: usize) -> Split {
    split_sequences(
        n_seqs,
        cfg.preprocess.test_fraction,
        cfg.train.val_fraction,
        cfg.preprocess.split_seed.wrapping_add(index as u64),
    )
}

/// Fresh model with `sessions` registered.
pub fn new_model(cfg: &RunConfig, arch: Arch, sessions: &[&SessionData], seed: u64) -> Result<Model32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model32::new(model_config(cfg, arch), &mut rng)?;
    for s in sessions {
        register(&mut m, s, &mut rng)?;
    }
    Ok(m)
}

fn register(m: &mut Model32, s: &SessionData, rng: &mut ChaCha8Rng) -> Result<()> {
    let modality = m.modality();
    m.register_session(s.id(), s.n_signals(modality), s.spike_dims(modality), rng)
}

fn n_behavior(s: &SessionData) -> usize {
    s.seg.record.n_behavior()
}

/// Prepares heads required by `objective` and registers a new session.
fn prepare(m: &mut Model32, s: &SessionData, objective: Objective, rng: &mut ChaCha8Rng) -> Result<()> {
    if !m.has_session(s.id()) {
        register(m, s, rng)?;
    }
    match objective {
        Objective::Sup | Objective::Fullsup | Objective::DistillSup => {
            if n_behavior(s) == 0 {
                return Err(Error::Data(format!("session {} has no behavior labels", s.id())));
            }
            m.ensure_behavior_head(n_behavior(s), rng);
        }
        Objective::Distill => m.ensure_recon_head(rng),
        Objective::Mae => {}
    }
    Ok(())
}

fn epochs_for(cfg: &RunConfig, objective: Objective, multi: bool) -> u32 {
    match objective {
        Objective::Mae if multi => cfg.train.pretrain_epochs,
        Objective::Distill | Objective::DistillSup => cfg.train.distill_epochs,
        _ => cfg.train.finetune_epochs,
    }
}

/// Trains `model` in place on `sessions` and returns the report.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    cfg: &RunConfig,
    model: &mut Model32,
    teacher: Option<&mut Teacher<f32>>,
    sessions: &[SessionData],
    objective: Objective,
    epochs: u32,
    trainable: Trainable,
    unfreeze_epoch: Option<u32>,
    seed: u64,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "heads"));
    for s in sessions {
        prepare(model, s, objective, &mut rng)?;
    }
    let multi = sessions.len() > 1;
    let job = Job {
        objective,
        epochs,
        batch: if multi { cfg.train.batch_multi } else { cfg.train.batch_single },
        train: crate::training::split_items(sessions, |d| d.seg.split.train.clone()),
        val: crate::training::split_items(sessions, |d| d.seg.split.val.clone()),
        trainable,
        patience: cfg.train.patience,
        lambda: cfg.train.lambda,
        unfreeze_epoch,
        sessions,
    };
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let mut state = TrainState::new(model.clone(), derive_seed(seed, "train"));
    let report = train(&mut state, teacher, &job, &tcfg)?;
    *model = state.model;
    info!(
        "{:?} on {} session(s): {} epochs, best val {:.5} at epoch {}",
        objective,
        sessions.len(),
        report.history.len(),
        report.best_val,
        report.best_epoch
    );
    Ok(report)
}

/// MAE pretraining of a fresh multi-session model.
pub fn pretrain(cfg: &RunConfig, arch: Arch, sessions: &[SessionData], seed: u64) -> Result<(Model32, TrainReport)> {
    let refs: Vec<&SessionData> = sessions.iter().collect();
    let mut m = new_model(cfg, arch, &refs, derive_seed(seed, "init"))?;
    let epochs = epochs_for(cfg, Objective::Mae, true);
    let r = run_stage(cfg, &mut m, None, sessions, Objective::Mae, epochs, Trainable::All, None, seed)?;
    Ok((m, r))
}

/// Fine-tunes a copy of `base` on one session; every parameter is trained.
pub fn finetune(cfg: &RunConfig, base: &Model32, session: &SessionData, objective: Objective, seed: u64) -> Result<(Model32, TrainReport)> {
    if matches!(objective, Objective::Distill | Objective::DistillSup) {
        return Err(Error::Usage("use distill for distillation objectives".into()));
    }
    let mut m = base.clone();
    let epochs = epochs_for(cfg, objective, false);
    let r = run_stage(
        cfg,
        &mut m,
        None,
        std::slice::from_ref(session),
        objective,
        epochs,
        Trainable::All,
        None,
        seed,
    )?;
    Ok((m, r))
}

/// A fresh single-session model trained from scratch.
pub fn single_session(cfg: &RunConfig, arch: Arch, session: &SessionData, objective: Objective, seed: u64) -> Result<(Model32, TrainReport)> {
    let mut m = new_model(cfg, arch, &[session], derive_seed(seed, "init"))?;
    let epochs = cfg.train.distill_epochs;
    let r = run_stage(
        cfg,
        &mut m,
        None,
        std::slice::from_ref(session),
        objective,
        epochs,
        Trainable::All,
        None,
        seed,
    )?;
    Ok((m, r))
}

/// Cross-modal distillation into an LFP student.
///
/// The student starts from `init` when given (e.g. MS-Distilled weights)
/// and from a fresh dilated-conv LFP model otherwise. Returns the student
/// and the teacher as it was after training.
pub fn distill(
    cfg: &RunConfig,
    teacher: &Model32,
    sessions: &[SessionData],
    objective: Objective,
    init: Option<&Model32>,
    unfreeze_epoch: Option<u32>,
    seed: u64,
) -> Result<(Model32, Model32, TrainReport)> {
    if !matches!(objective, Objective::Distill | Objective::DistillSup) {
        return Err(Error::Usage("distill needs a distillation objective".into()));
    }
    for s in sessions {
        s.seg.record.require_spikes()?;
        s.seg.record.require_lfp()?;
        if !teacher.has_session(s.id()) {
            return Err(Error::Config(format!("teacher has not been trained on session {}", s.id())));
        }
    }
    if teacher.d() != cfg.encoder.d {
        return Err(Error::Config(format!(
            "teacher latent width {} differs from student width {}",
            teacher.d(),
            cfg.encoder.d
        )));
    }
    let refs: Vec<&SessionData> = sessions.iter().collect();
    let mut student = match init {
        Some(m) => m.clone(),
        None => new_model(cfg, Arch::LfpConv, &refs, derive_seed(seed, "init"))?,
    };
    let mut handle = Teacher::new(teacher.clone());
    let epochs = epochs_for(cfg, objective, false);
    let r = run_stage(
        cfg,
        &mut student,
        Some(&mut handle),
        sessions,
        objective,
        epochs,
        Trainable::All,
        unfreeze_epoch,
        seed,
    )?;
    Ok((student, handle.model, r))
}

/// Fits only the space embeddings of `session` for `epochs` epochs with the
/// student's own reconstruction objective; everything else stays frozen.
pub fn adapt_embeddings(cfg: &RunConfig, model: &Model32, session: &SessionData, epochs: u32, seed: u64) -> Result<Model32> {
    let mut m = model.clone();
    let mut rcfg = cfg.clone();
    rcfg.train.lambda = 0.0;
    run_stage(
        &rcfg,
        &mut m,
        None,
        std::slice::from_ref(session),
        Objective::Distill,
        epochs,
        Trainable::Prefixes(vec![space_name(session.id())]),
        None,
        seed,
    )?;
    Ok(m)
}

/// Pooled `[T x d]` representations of the given sequences, in order.
pub fn representations(model: &Model32, session: &SessionData, seqs: &[usize], zero_spikes: bool) -> Result<Vec<Vec<f64>>> {
    seqs.par_iter()
        .map(|&q| {
            let input = session.input(model.modality(), q, false)?;
            let mut tape = Tape::inference();
            let b = Binder::new(&model.params);
            let v = if zero_spikes {
                model.pooled_zero_spikes(&mut tape, &b, session.id(), &input)?
            } else {
                model.pooled(&mut tape, &b, session.id(), &input)?.0
            };
            Ok(tape.value(v).to_f64_vec())
        })
        .collect()
}

/// Per-sequence means of per-timestep representations, `[n x d]`.
pub fn sequence_means(reps: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(reps.len() * d);
    for r in reps {
        out.extend(crate::metrics::pool_sequence(r, r.len() / d, d)?);
    }
    Ok(out)
}

fn behavior_rows(session: &SessionData, seqs: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &q in seqs {
        out.extend(session.seg.behavior(q)?.data.iter().map(|&v| v as f64));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub r2: f64,
    pub decoder: LinearDecoder,
    pub train_seqs: Vec<usize>,
    pub test_seqs: Vec<usize>,
}

/// Ridge decoder on `[rows x d]` features: fit on the train+val
/// sequences, scored on the test sequences.
pub fn decode_features(
    cfg: &RunConfig,
    session: &SessionData,
    features: impl Fn(&[usize]) -> Result<(Vec<f64>, usize)>,
) -> Result<DecodeResult> {
    let split = &session.seg.split;
    let fit = split.fit();
    if split.test.is_empty() || fit.is_empty() {
        return Err(Error::Data(format!("session {} needs non-empty train and test splits", session.id())));
    }
    let n_z = n_behavior(session);
    let (x_fit, d) = features(&fit)?;
    let y_fit = behavior_rows(session, &fit)?;
    let n_fit = y_fit.len() / n_z;
    let dec = fit_linear_decoder(&x_fit, &y_fit, n_fit, d, n_z, cfg.decode.ridge)?;
    let (x_test, _) = features(&split.test)?;
    let y_test = behavior_rows(session, &split.test)?;
    let n_test = y_test.len() / n_z;
    let pred = dec.predict(&x_test, n_test)?;
    Ok(DecodeResult {
        r2: r2(&y_test, &pred, n_test, n_z)?,
        decoder: dec,
        train_seqs: fit,
        test_seqs: split.test.clone(),
    })
}

/// Held-out behavior decoding R² from a model's pooled representations.
pub fn decode_model(cfg: &RunConfig, model: &Model32, session: &SessionData, zero_spikes: bool) -> Result<DecodeResult> {
    decode_features(cfg, session, |seqs| {
        let reps = representations(model, session, seqs, zero_spikes)?;
        Ok((reps.concat(), model.d()))
    })
}

/// Decoding ceiling: the same protocol applied to the true latents.
pub fn oracle_r2(cfg: &RunConfig, session: &SessionData) -> Result<f64> {
    let l = session
        .seg
        .record
        .true_latents
        .as_ref()
        .ok_or_else(|| Error::Data(format!("session {} has no true latents", session.id())))?
        .cols;
    Ok(decode_features(cfg, session, |seqs| {
        let mut x = Vec::new();
        for &q in seqs {
            x.extend(session.seg.latents(q).expect("checked").data.iter().map(|&v| v as f64));
        }
        Ok((x, l))
    })?
    .r2)
}

/// Instantaneous linear decoding straight from raw spikes or LFP.
pub fn raw_r2(cfg: &RunConfig, session: &SessionData, modality: Modality) -> Result<f64> {
    let n = session.n_signals(modality);
    decode_features(cfg, session, |seqs| {
        let mut x = Vec::new();
        for &q in seqs {
            let input = session.input(modality, q, false)?;
            for r in 0..input.rows() {
                for c in 0..input.cols() {
                    x.push(input.value(r, c));
                }
            }
        }
        Ok((x, n))
    })
    .map(|d| d.r2)
}
