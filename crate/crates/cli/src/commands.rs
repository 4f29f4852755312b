use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Deserialize;

use neurodistill::config::{Objective, RunConfig};
use neurodistill::container::{self, DatasetIndex, SCHEMA_VERSION};
use neurodistill::data::{Matrix, SegmentedSession, SessionRecord, Split};
use neurodistill::experiment::{self, Arch, Model32};
use neurodistill::preprocess::{self, BroadbandRecording};
use neurodistill::synthgen::generate_dataset;
use neurodistill::training::checkpoint::{self, Checkpoint};
use neurodistill::training::{SessionData, TrainReport, TrainState};
use neurodistill::Error;

use crate::{ArchArg, Command, Common, Regime};

pub const THREADS_ENV: &str = "NEURODISTILL_THREADS";

/// Sizes the global worker pool from `NEURODISTILL_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Exit code of the first library error in the chain, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn prepare_out(common: &Common) -> Result<()> {
    if container::is_non_empty_dir(&common.out) && !common.force {
        return Err(usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            common.out.display()
        )));
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common } => gen(&common),
        Command::Preprocess { common, input } => preprocess_cmd(&common, &input),
        Command::Pretrain {
            common,
            data,
            arch,
            sessions,
        } => pretrain(&common, &data, arch, &sessions),
        Command::Finetune {
            common,
            data,
            checkpoint,
            arch,
            session,
            regime,
        } => finetune(&common, &data, checkpoint.as_deref(), arch, &session, regime),
        Command::Distill {
            common,
            data,
            teacher,
            session,
            regime,
            unfreeze_epoch,
            init,
        } => distill(&common, &data, teacher.as_deref(), &session, regime, unfreeze_epoch, init.as_deref()),
        Command::Msdistill {
            common,
            data,
            teacher,
            sessions,
        } => msdistill(&common, &data, teacher.as_deref(), &sessions),
        Command::Eval {
            common,
            data,
            models,
            sessions,
            reference,
            zero_spikes,
        } => crate::eval::eval(&common, &data, &models, &sessions, reference.as_deref(), zero_spikes),
    }
}

fn gen(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.gen.seed = s;
    }
    prepare_out(common)?;
    let (records, manifest) = generate_dataset(&cfg.gen)?;
    let mut sessions = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let split = experiment::default_split(&cfg, rec.n_timesteps() / cfg.gen.seq_len, i);
        sessions.push((rec, split));
    }
    let index = DatasetIndex {
        schema_version: SCHEMA_VERSION,
        seq_len: cfg.gen.seq_len,
        seed: Some(cfg.gen.seed),
        sessions: sessions.iter().map(|(r, _)| r.session_id.clone()).collect(),
    };
    container::write_dataset(&common.out, &index, &sessions)?;
    container::write_json(&common.out.join("dataset_manifest.json"), &manifest)?;
    cfg.write_resolved(&common.out)?;
    info!("wrote {} sessions to {}", sessions.len(), common.out.display());
    Ok(())
}

/// Raw recording description read by `preprocess`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    session_id: String,
    #[serde(default = "default_subject")]
    subject_id: String,
    sample_rate: f64,
    n_channels: usize,
    /// Little-endian f32 `[samples x channels]`.
    broadband: String,
    /// JSON list of per-unit spike-time lists in seconds.
    spike_times: Option<String>,
    /// Little-endian f32 `[bins x n_behavior]` at the bin rate.
    behavior: Option<String>,
    #[serde(default)]
    n_behavior: usize,
}

fn default_subject() -> String {
    "unknown".into()
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{}: length is not a multiple of 4 bytes", path.display())).into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn to_f32_matrix(x: &[f64], rows: usize, cols: usize) -> Matrix<f32> {
    Matrix {
        rows,
        cols,
        data: x.iter().map(|&v| v as f32).collect(),
    }
}

fn preprocess_cmd(common: &Common, input: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = &cfg.preprocess.filter;
    let bin_rate = 1000.0 / cfg.preprocess.bin_ms;
    if (bin_rate - spec.target_rate).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "LFP target rate {} Hz must equal the spike bin rate {bin_rate} Hz",
            spec.target_rate
        ))
        .into());
    }
    let raw: RawManifest = container::read_json(&input.join("raw.json"))?;
    if !(raw.sample_rate.is_finite() && raw.sample_rate >= spec.target_rate) {
        return Err(Error::Data(format!(
            "unsupported sample rate {} Hz (must be at least {} Hz)",
            raw.sample_rate, spec.target_rate
        ))
        .into());
    }
    prepare_out(common)?;
    let samples: Vec<f64> = read_f32(&input.join(&raw.broadband))?.into_iter().map(f64::from).collect();
    let rec = BroadbandRecording {
        samples,
        channels: raw.n_channels,
        sample_rate: raw.sample_rate,
    };
    let lfp = preprocess::broadband_to_lfp(&rec, spec)?;
    let duration = rec.n_samples() as f64 / raw.sample_rate;
    let mut t = lfp.rows;
    let spikes = match &raw.spike_times {
        Some(f) => {
            let times: Vec<Vec<f64>> = container::read_json(&input.join(f))?;
            let (counts, kept) = preprocess::bin_spikes(&times, cfg.preprocess.bin_ms, duration, cfg.preprocess.min_rate_hz)?;
            info!("kept {} of {} units", counts.cols, kept.len());
            t = t.min(counts.rows);
            Some(counts)
        }
        None => None,
    };
    let behavior = match &raw.behavior {
        Some(f) => {
            let b = read_f32(&input.join(f))?;
            if raw.n_behavior == 0 || b.len() % raw.n_behavior != 0 {
                return Err(Error::Data("behavior length does not match n_behavior".into()).into());
            }
            let m = Matrix::new(b.len() / raw.n_behavior, raw.n_behavior, b)?;
            t = t.min(m.rows);
            Some(m)
        }
        None => None,
    };
    let (n_seqs, _) = preprocess::segment_count(t, cfg.gen.seq_len)?;
    let t = n_seqs * cfg.gen.seq_len;
    let lfp = lfp.rows_slice(0, t);
    let (z, lfp_stats) = preprocess::zscore_checked(&lfp.data, t, lfp.cols)?;
    let (behavior, behavior_stats) = match behavior {
        Some(b) => {
            let b = b.rows_slice(0, t);
            let x: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
            let (z, s) = preprocess::zscore_checked(&x, t, b.cols)?;
            (Some(to_f32_matrix(&z, t, b.cols)), Some(s))
        }
        None => (None, None),
    };
    let spikes = spikes.map(|c| {
        let c = c.rows_slice(0, t);
        Matrix {
            rows: c.rows,
            cols: c.cols,
            data: c.data.iter().map(|&k| k.min(u8::MAX as u32) as u8).collect(),
        }
    });
    let record = SessionRecord {
        session_id: raw.session_id.clone(),
        subject_id: raw.subject_id,
        bin_ms: cfg.preprocess.bin_ms,
        spikes,
        lfp: Some(to_f32_matrix(&z, t, lfp.cols)),
        behavior,
        true_latents: None,
        lfp_stats: Some(lfp_stats),
        behavior_stats,
    };
    let split = neurodistill::data::split_sequences(
        n_seqs,
        cfg.preprocess.test_fraction,
        cfg.train.val_fraction,
        cfg.preprocess.split_seed,
    );
    let index = DatasetIndex {
        schema_version: SCHEMA_VERSION,
        seq_len: cfg.gen.seq_len,
        seed: None,
        sessions: vec![raw.session_id],
    };
    container::write_dataset(&common.out, &index, &[(record, split)])?;
    cfg.write_resolved(&common.out)?;
    Ok(())
}

/// Loads the dataset with its stored splits.
pub fn load_sessions(data: &Path) -> Result<Vec<SessionData>> {
    let (index, sessions) = container::read_dataset(data)?;
    sessions
        .into_iter()
        .map(|(rec, split): (SessionRecord, Split)| {
            Ok(SessionData::new(SegmentedSession::new(rec, index.seq_len, split)?))
        })
        .collect()
}

pub fn select(all: Vec<SessionData>, ids: &[String]) -> Result<Vec<SessionData>> {
    if ids.is_empty() {
        return Ok(all);
    }
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|s| s.id() == id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("session {id} is not in the dataset")).into())
        })
        .collect()
}

fn arch(a: ArchArg) -> Arch {
    match a {
        ArchArg::Spike => Arch::Spike,
        ArchArg::Lfp => Arch::LfpLinear,
        ArchArg::LfpConv => Arch::LfpConv,
        ArchArg::Mm => Arch::Multimodal,
    }
}

fn seed_of(common: &Common, cfg: &mut RunConfig) -> u64 {
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.train.seed
}

pub fn load_model(path: &Path) -> Result<Model32> {
    Ok(Checkpoint::load(path)?.model())
}

/// Writes the checkpoint, training log and resolved configuration.
fn finish(common: &Common, cfg: &RunConfig, model: Model32, report: &TrainReport, seed: u64) -> Result<()> {
    let mut state = TrainState::new(model, seed);
    state.epoch = report.history.len() as u32;
    state.best_val = report.best_val.is_finite().then_some(report.best_val);
    checkpoint::save(&checkpoint_path(&common.out), &state)?;
    let log = common.out.join("train_log.tsv");
    fs::write(&log, report.to_tsv()).map_err(|e| Error::io(&log, e))?;
    cfg.write_resolved(&common.out)?;
    info!(
        "best validation loss {:.6} at epoch {}; checkpoint in {}",
        report.best_val,
        report.best_epoch,
        checkpoint_path(&common.out).display()
    );
    Ok(())
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

fn pretrain(common: &Common, data: &Path, a: ArchArg, ids: &[String]) -> Result<()> {
    let mut cfg = load_config(common)?;
    let seed = seed_of(common, &mut cfg);
    let sessions = select(load_sessions(data)?, ids)?;
    prepare_out(common)?;
    let (model, report) = experiment::pretrain(&cfg, arch(a), &sessions, seed)?;
    finish(common, &cfg, model, &report, seed)
}

fn objective(r: Regime) -> Objective {
    match r {
        Regime::Unsup => Objective::Mae,
        Regime::Sup => Objective::Sup,
        Regime::Fullsup => Objective::Fullsup,
    }
}

fn finetune(common: &Common, data: &Path, ckpt: Option<&Path>, a: ArchArg, id: &str, regime: Regime) -> Result<()> {
    let mut cfg = load_config(common)?;
    let seed = seed_of(common, &mut cfg);
    let session = select(load_sessions(data)?, &[id.to_string()])?.remove(0);
    prepare_out(common)?;
    let (model, report) = match ckpt {
        Some(p) => experiment::finetune(&cfg, &load_model(p)?, &session, objective(regime), seed)?,
        None => experiment::single_session(&cfg, arch(a), &session, objective(regime), seed)?,
    };
    finish(common, &cfg, model, &report, seed)
}

fn require_teacher(teacher: Option<&Path>) -> Result<Model32> {
    let p = teacher.ok_or_else(|| usage("distillation requires --teacher <checkpoint>"))?;
    load_model(p)
}

fn distill(
    common: &Common,
    data: &Path,
    teacher: Option<&Path>,
    id: &str,
    regime: Regime,
    unfreeze_epoch: Option<u32>,
    init: Option<&Path>,
) -> Result<()> {
    let teacher = require_teacher(teacher)?;
    let mut cfg = load_config(common)?;
    let seed = seed_of(common, &mut cfg);
    let unfreeze = unfreeze_epoch.or(cfg.train.unfreeze_epoch);
    cfg.train.unfreeze_epoch = unfreeze;
    let session = select(load_sessions(data)?, &[id.to_string()])?;
    let objective = match regime {
        Regime::Unsup | Regime::Sup => Objective::Distill,
        Regime::Fullsup => Objective::DistillSup,
    };
    let init = init.map(load_model).transpose()?;
    prepare_out(common)?;
    let (student, _, report) = experiment::distill(&cfg, &teacher, &session, objective, init.as_ref(), unfreeze, seed)?;
    finish(common, &cfg, student, &report, seed)
}

fn msdistill(common: &Common, data: &Path, teacher: Option<&Path>, ids: &[String]) -> Result<()> {
    let teacher = require_teacher(teacher)?;
    let mut cfg = load_config(common)?;
    let seed = seed_of(common, &mut cfg);
    let sessions = select(load_sessions(data)?, ids)?;
    if sessions.len() < 2 {
        return Err(usage("msdistill needs at least two sessions"));
    }
    prepare_out(common)?;
    let (student, _, report) = experiment::distill(&cfg, &teacher, &sessions, Objective::Distill, None, None, seed)?;
    finish(common, &cfg, student, &report, seed)
}
