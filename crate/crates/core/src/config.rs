//! Run configuration. Every section rejects unknown keys and falls back to
//! the desk-scale defaults for omitted ones.

use std::path::{Path, PathBuf};

use numkit::{AdamWConfig, Schedule};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_sessions: usize,
    pub latent_dim: usize,
    pub seq_len: usize,
    pub seqs_per_session: usize,
    pub n_neurons_min: usize,
    pub n_neurons_max: usize,
    pub n_lfp_min: usize,
    pub n_lfp_max: usize,
    pub n_behavior: usize,
    pub spectral_radius: f64,
    /// Range of rotation angles (radians per bin) of the latent dynamics.
    pub rotation_min: f64,
    pub rotation_max: f64,
    pub rate_min: f64,
    pub rate_max: f64,
    /// Standard deviation of the latent drive `C_s x` per neuron.
    pub spike_gain: f64,
    pub k_max: u8,
    pub lfp_noise_corr: f64,
    pub lfp_redundancy: f64,
    /// Standard deviation of the shared low-pass LFP noise relative to the signal.
    pub lfp_corr_noise: f64,
    /// AR(1) coefficient of the low-pass LFP noise.
    pub lfp_noise_smoothing: f64,
    pub lfp_white_noise: f64,
    /// Noise added to redundant copies, relative to their source channel.
    pub lfp_copy_noise: f64,
    pub behavior_snr: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_sessions: 10,
            latent_dim: 8,
            seq_len: 100,
            seqs_per_session: 120,
            n_neurons_min: 30,
            n_neurons_max: 80,
            n_lfp_min: 16,
            n_lfp_max: 32,
            n_behavior: 2,
            spectral_radius: 0.97,
            rotation_min: 0.02,
            rotation_max: 0.25,
            rate_min: 0.1,
            rate_max: 0.5,
            spike_gain: 0.8,
            k_max: 5,
            lfp_noise_corr: 0.6,
            lfp_redundancy: 0.5,
            lfp_corr_noise: 2.0,
            lfp_noise_smoothing: 0.97,
            lfp_white_noise: 1.0,
            lfp_copy_noise: 0.2,
            behavior_snr: 20.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_sessions", self.n_sessions),
            ("latent_dim", self.latent_dim),
            ("seq_len", self.seq_len),
            ("seqs_per_session", self.seqs_per_session),
            ("n_neurons_min", self.n_neurons_min),
            ("n_lfp_min", self.n_lfp_min),
            ("n_behavior", self.n_behavior),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("gen.{name} must be positive")));
            }
        }
        if self.n_neurons_max < self.n_neurons_min || self.n_lfp_max < self.n_lfp_min {
            return Err(Error::Config("gen channel ranges must have max >= min".into()));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius < 1.0) {
            return Err(Error::Config(format!(
                "gen.spectral_radius must lie in (0, 1), got {}",
                self.spectral_radius
            )));
        }
        if !(0.0..1.0).contains(&self.lfp_redundancy) {
            return Err(Error::Config(format!(
                "gen.lfp_redundancy must lie in [0, 1), got {}",
                self.lfp_redundancy
            )));
        }
        if !(0.0..=1.0).contains(&self.lfp_noise_corr) {
            return Err(Error::Config("gen.lfp_noise_corr must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.lfp_noise_smoothing) {
            return Err(Error::Config("gen.lfp_noise_smoothing must lie in [0, 1)".into()));
        }
        if !(self.rate_min > 0.0 && self.rate_min <= self.rate_max) {
            return Err(Error::Config("gen rates must satisfy 0 < rate_min <= rate_max".into()));
        }
        if self.rotation_min > self.rotation_max {
            return Err(Error::Config("gen.rotation_min exceeds rotation_max".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("gen.k_max must be positive".into()));
        }
        if !(self.behavior_snr > 0.0) {
            return Err(Error::Config("gen.behavior_snr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub notch_base: f64,
    pub notch_q: f64,
    pub highpass_cut: f64,
    pub lowpass_cut: f64,
    pub target_rate: f64,
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            notch_base: 60.0,
            notch_q: 30.0,
            highpass_cut: 0.05,
            lowpass_cut: 50.0,
            target_rate: 100.0,
            order: 4,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        // 50 Hz against a 100 Hz target sits exactly at the new Nyquist.
        if self.lowpass_cut > self.target_rate / 2.0 {
            return Err(Error::Config(format!(
                "lowpass_cut {} exceeds half the target rate {}",
                self.lowpass_cut, self.target_rate
            )));
        }
        if !(self.highpass_cut > 0.0 && self.highpass_cut < self.lowpass_cut) {
            return Err(Error::Config("highpass_cut must lie in (0, lowpass_cut)".into()));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(Error::Config("filter order must be a positive even number".into()));
        }
        if !(self.notch_q > 0.0 && self.notch_base > 0.0) {
            return Err(Error::Config("notch parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub filter: FilterSpec,
    pub bin_ms: f64,
    pub min_rate_hz: f64,
    pub split_seed: u64,
    pub test_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            filter: FilterSpec::default(),
            bin_ms: 10.0,
            min_rate_hz: 1.0,
            split_seed: 1234,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LfpEmbed {
    Linear,
    DilatedConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub spike_patch: usize,
    pub lfp_patch: usize,
    pub k_max: u8,
    pub conv_kernel: usize,
    pub conv_dilations: Vec<usize>,
    pub space_init_std: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            spike_patch: 16,
            lfp_patch: 8,
            k_max: 5,
            conv_kernel: 3,
            conv_dilations: vec![1, 2, 4],
            space_init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d: usize,
    /// Attention heads; 0 selects `d / 32` (at least one).
    pub heads: usize,
    pub predictor_depth: usize,
    pub predictor_d: usize,
    pub down_proj_d: usize,
    pub mask_prob: f64,
    pub mlp_ratio: usize,
    pub rotary_base: f64,
    pub max_tokens: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d: 64,
            heads: 0,
            predictor_depth: 4,
            predictor_d: 48,
            down_proj_d: 16,
            mask_prob: 0.6,
            mlp_ratio: 4,
            rotary_base: 10000.0,
            max_tokens: 4096,
            init_std: 0.1,
        }
    }
}

pub fn auto_heads(width: usize) -> usize {
    (width / 32).max(1)
}

impl EncoderConfig {
    pub fn heads(&self) -> usize {
        if self.heads == 0 {
            auto_heads(self.d)
        } else {
            self.heads
        }
    }

    pub fn validate(&self, patches: &[usize]) -> Result<()> {
        if self.d == 0 || self.depth == 0 {
            return Err(Error::Config("encoder d and depth must be positive".into()));
        }
        let h = self.heads();
        if self.d % h != 0 || (self.d / h) % 2 != 0 {
            return Err(Error::Config(format!(
                "d = {} must split into {h} heads of even width",
                self.d
            )));
        }
        let ph = auto_heads(self.predictor_d);
        if self.predictor_d % ph != 0 || (self.predictor_d / ph) % 2 != 0 {
            return Err(Error::Config(format!(
                "predictor_d = {} must split into heads of even width",
                self.predictor_d
            )));
        }
        for &s in patches {
            if s == 0 || self.d % s != 0 {
                return Err(Error::Config(format!("patch size {s} must divide d = {}", self.d)));
            }
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config("mask_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mae,
    Sup,
    Fullsup,
    Distill,
    DistillSup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_start_factor: f64,
    pub max_lr: f64,
    pub warmup_epochs: u32,
    pub decay: f64,
    pub wd_start: f64,
    pub wd_max: f64,
    pub wd_ramp_epochs: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Schedule::default().into()
    }
}

impl From<Schedule> for ScheduleConfig {
    fn from(s: Schedule) -> Self {
        Self {
            warmup_start_factor: s.warmup_start_factor,
            max_lr: s.max_lr,
            warmup_epochs: s.warmup_epochs,
            decay: s.decay,
            wd_start: s.wd_start,
            wd_max: s.wd_max,
            wd_ramp_epochs: s.wd_ramp_epochs,
        }
    }
}

impl From<ScheduleConfig> for Schedule {
    fn from(s: ScheduleConfig) -> Self {
        Self {
            warmup_start_factor: s.warmup_start_factor,
            max_lr: s.max_lr,
            warmup_epochs: s.warmup_epochs,
            decay: s.decay,
            wd_start: s.wd_start,
            wd_max: s.wd_max,
            wd_ramp_epochs: s.wd_ramp_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub batch_multi: usize,
    pub batch_single: usize,
    pub patience: u32,
    pub pretrain_epochs: u32,
    pub finetune_epochs: u32,
    pub distill_epochs: u32,
    pub seed: u64,
    pub teacher_checkpoint: Option<PathBuf>,
    pub unfreeze_epoch: Option<u32>,
    pub val_fraction: f64,
    pub schedule: ScheduleConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs of embedding-only adaptation when transferring to a new session.
    pub adapt_epochs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            objective: Objective::Mae,
            lambda: 5.0,
            batch_multi: 64,
            batch_single: 32,
            patience: 25,
            pretrain_epochs: 150,
            finetune_epochs: 100,
            distill_epochs: 100,
            seed: 0,
            teacher_checkpoint: None,
            unfreeze_epoch: None,
            val_fraction: 0.1,
            schedule: ScheduleConfig::default(),
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            adapt_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.into()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.batch_multi == 0 || self.batch_single == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.schedule().validate().map_err(Error::Config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Ridge strength relative to the mean diagonal of the feature Gram matrix.
    pub ridge: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { ridge: 1e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub preprocess: PreprocessConfig,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Toml {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved configuration as `resolved_config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.preprocess.filter.validate()?;
        self.encoder
            .validate(&[self.tokenizer.spike_patch, self.tokenizer.lfp_patch])?;
        self.train.validate()?;
        if self.tokenizer.k_max != self.gen.k_max {
            return Err(Error::Config(format!(
                "tokenizer.k_max {} differs from gen.k_max {}",
                self.tokenizer.k_max, self.gen.k_max
            )));
        }
        if !(self.decode.ridge >= 0.0) {
            return Err(Error::Config("decode.ridge must be non-negative".into()));
        }
        Ok(())
    }
}
