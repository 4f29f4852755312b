//! Paired spike / LFP / behavior sessions driven by one shared latent linear
//! dynamical system.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::GenConfig;
use crate::data::{Matrix, SessionRecord, ZStats};
use crate::error::Result;
use crate::preprocess::zscore;

/// Cap on the Poisson log-rate.
pub const MAX_LOG_RATE: f64 = 5.0;

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std_normal(rng))
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let qr = gaussian_matrix(n, n, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Dynamics `x_{t+1} = A x_t + w_t` with `w_t ~ N(0, noise_std^2 I)`.
#[derive(Clone, Debug)]
pub struct LatentSystem {
    pub a: DMatrix<f64>,
    pub noise_std: f64,
}

impl LatentSystem {
    /// `A = rho * Q blockdiag(R(theta_k)) Q^T`: a normal matrix whose
    /// eigenvalues all have modulus `rho`. The noise variance `1 - rho^2`
    /// then gives unit stationary variance in every direction.
    pub fn random<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Self {
        let l = cfg.latent_dim;
        let rho = cfg.spectral_radius;
        let mut block = DMatrix::zeros(l, l);
        let mut k = 0;
        while k + 1 < l {
            let theta = rng.random_range(cfg.rotation_min..=cfg.rotation_max);
            let (s, c) = theta.sin_cos();
            block[(k, k)] = c;
            block[(k, k + 1)] = -s;
            block[(k + 1, k)] = s;
            block[(k + 1, k + 1)] = c;
            k += 2;
        }
        if k < l {
            block[(k, k)] = 1.0;
        }
        let q = random_orthogonal(l, rng);
        let a = &q * block * q.transpose() * rho;
        Self {
            a,
            noise_std: (1.0 - rho * rho).sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Runs `steps` steps from a stationary draw, returning `[steps x dim]`.
    pub fn simulate<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> Vec<f64> {
        let x0 = DVector::from_fn(self.dim(), |_, _| std_normal(rng));
        self.simulate_from(x0, steps, self.noise_std, rng)
    }

    pub fn simulate_from<R: Rng + ?Sized>(
        &self,
        mut x: DVector<f64>,
        steps: usize,
        noise_std: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let l = self.dim();
        let mut out = Vec::with_capacity(steps * l);
        for _ in 0..steps {
            out.extend(x.iter());
            let w = DVector::from_fn(l, |_, _| noise_std * std_normal(rng));
            x = &self.a * x + w;
        }
        out
    }
}

/// Per-session observation parameters.
#[derive(Clone, Debug)]
pub struct SessionParams {
    pub spike_loading: DMatrix<f64>,
    pub spike_bias: Vec<f64>,
    /// Effective mixing of every LFP channel, copies included.
    pub lfp_mixing: DMatrix<f64>,
    /// For each channel, the source channel it copies (`None` for sources).
    pub lfp_source: Vec<Option<usize>>,
    pub lfp_copy_scale: Vec<f64>,
    pub behavior_loading: DMatrix<f64>,
}

fn row_norm(m: &DMatrix<f64>, r: usize) -> f64 {
    m.row(r).norm()
}

impl SessionParams {
    pub fn random<R: Rng + ?Sized>(
        cfg: &GenConfig,
        shared_behavior: &DMatrix<f64>,
        n_spikes: usize,
        n_lfp: usize,
        rng: &mut R,
    ) -> Self {
        let l = cfg.latent_dim;
        let mut spike_loading = gaussian_matrix(n_spikes, l, rng);
        for r in 0..n_spikes {
            let n = row_norm(&spike_loading, r).max(1e-12);
            spike_loading.row_mut(r).scale_mut(cfg.spike_gain / n);
        }
        // E[exp(c.x + b)] = exp(b + |c|^2 / 2) for x ~ N(0, I).
        let spike_bias = (0..n_spikes)
            .map(|_| {
                let rate: f64 = rng.random_range(cfg.rate_min..=cfg.rate_max);
                rate.ln() - 0.5 * cfg.spike_gain * cfg.spike_gain
            })
            .collect();

        let n_copies = ((n_lfp as f64) * cfg.lfp_redundancy).round() as usize;
        let n_copies = n_copies.min(n_lfp - 1);
        let n_src = n_lfp - n_copies;
        let src_mixing = gaussian_matrix(n_src, l, rng) / (l as f64).sqrt();
        let mut slots: Vec<usize> = (0..n_lfp).collect();
        slots.shuffle(rng);
        let mut lfp_mixing = DMatrix::zeros(n_lfp, l);
        let mut lfp_source = vec![None; n_lfp];
        let mut lfp_copy_scale = vec![1.0; n_lfp];
        for (k, &slot) in slots.iter().enumerate().take(n_src) {
            lfp_mixing.set_row(slot, &src_mixing.row(k));
        }
        for &slot in slots.iter().skip(n_src) {
            let src = slots[rng.random_range(0..n_src)];
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let scale = sign * rng.random_range(0.5..1.5);
            lfp_source[slot] = Some(src);
            lfp_copy_scale[slot] = scale;
            let row = lfp_mixing.row(src) * scale;
            lfp_mixing.set_row(slot, &row);
        }

        let rot = random_orthogonal(cfg.n_behavior, rng);
        Self {
            spike_loading,
            spike_bias,
            lfp_mixing,
            lfp_source,
            lfp_copy_scale,
            behavior_loading: rot * shared_behavior,
        }
    }
}

fn project(latents: &[f64], dim: usize, loading: &DMatrix<f64>) -> Vec<f64> {
    let t = latents.len() / dim;
    let x = DMatrix::from_row_slice(t, dim, latents);
    let y = x * loading.transpose();
    let mut out = Vec::with_capacity(y.len());
    for r in 0..y.nrows() {
        out.extend(y.row(r).iter());
    }
    out
}

/// Poisson counts with log-rate `C x + b`, clamped to `MAX_LOG_RATE` and the
/// counts to `k_max`. Returns `[T x n_spikes]`.
pub fn render_spikes<R: Rng + ?Sized>(
    latents: &[f64],
    dim: usize,
    params: &SessionParams,
    k_max: u8,
    rng: &mut R,
) -> Vec<u8> {
    let n = params.spike_bias.len();
    let drive = project(latents, dim, &params.spike_loading);
    let mut clamped = 0usize;
    let counts = drive
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut eta = d + params.spike_bias[i % n];
            if eta > MAX_LOG_RATE {
                eta = MAX_LOG_RATE;
                clamped += 1;
            }
            let k = Poisson::new(eta.exp()).expect("positive rate").sample(rng);
            k.min(k_max as f64) as u8
        })
        .collect();
    if clamped > 0 {
        warn!("{clamped} spike log-rates exceeded {MAX_LOG_RATE} and were clamped");
    }
    counts
}

/// LFP before z-scoring: `M x` plus shared low-pass noise, white noise and
/// noisy redundant copies. Returns `[T x n_lfp]`.
pub fn render_lfp<R: Rng + ?Sized>(
    latents: &[f64],
    dim: usize,
    params: &SessionParams,
    cfg: &GenConfig,
    rng: &mut R,
) -> Vec<f64> {
    let n = params.lfp_source.len();
    let t = latents.len() / dim;
    let signal = project(latents, dim, &params.lfp_mixing);
    let scale: Vec<f64> = (0..n).map(|r| row_norm(&params.lfp_mixing, r)).collect();
    let mut out = signal.clone();

    let alpha = cfg.lfp_noise_smoothing;
    let drive = (1.0 - alpha * alpha).sqrt();
    let shared_w = cfg.lfp_noise_corr.sqrt();
    let own_w = (1.0 - cfg.lfp_noise_corr).sqrt();
    let mut state: Vec<f64> = (0..n).map(|_| std_normal(rng)).collect();
    for step in 0..t {
        let common = std_normal(rng);
        for c in 0..n {
            let innovation = shared_w * common + own_w * std_normal(rng);
            state[c] = alpha * state[c] + drive * innovation;
            if params.lfp_source[c].is_none() {
                let white = std_normal(rng);
                out[step * n + c] += scale[c] * (cfg.lfp_corr_noise * state[c] + cfg.lfp_white_noise * white);
            }
        }
    }

    for c in 0..n {
        let Some(src) = params.lfp_source[c] else { continue };
        let src_std = {
            let col: Vec<f64> = (0..t).map(|s| out[s * n + src]).collect();
            let m = col.iter().sum::<f64>() / t as f64;
            (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64).sqrt()
        };
        for s in 0..t {
            let noise = cfg.lfp_copy_noise * src_std * std_normal(rng);
            out[s * n + c] = params.lfp_copy_scale[c] * out[s * n + src] + noise;
        }
    }
    out
}

/// Behavior before z-scoring: `C_b x` plus noise at the configured SNR.
pub fn render_behavior<R: Rng + ?Sized>(
    latents: &[f64],
    dim: usize,
    params: &SessionParams,
    snr: f64,
    rng: &mut R,
) -> Vec<f64> {
    let nz = params.behavior_loading.nrows();
    let mut z = project(latents, dim, &params.behavior_loading);
    if snr.is_finite() {
        let noise_std: Vec<f64> = (0..nz)
            .map(|r| row_norm(&params.behavior_loading, r) / snr.sqrt())
            .collect();
        for (i, v) in z.iter_mut().enumerate() {
            *v += noise_std[i % nz] * std_normal(rng);
        }
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub subject_id: String,
    pub n_timesteps: usize,
    pub n_spikes: usize,
    pub n_lfp: usize,
    pub n_behavior: usize,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub seq_len: usize,
    pub sessions: Vec<SessionSummary>,
}

pub fn session_id(i: usize) -> String {
    format!("s{i:02}")
}

fn session_rng(seed: u64, session: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(session as u64 + 1);
    rng
}

fn to_matrix_f32(data: &[f64], rows: usize, cols: usize) -> Matrix<f32> {
    Matrix {
        rows,
        cols,
        data: data.iter().map(|&v| v as f32).collect(),
    }
}

fn zscored(data: Vec<f64>, rows: usize, cols: usize) -> (Matrix<f32>, ZStats) {
    let (z, stats) = zscore(&data, rows, cols);
    (to_matrix_f32(&z, rows, cols), stats)
}

/// Generates one session given the shared dynamics and behavior subspace.
pub fn generate_session(
    cfg: &GenConfig,
    system: &LatentSystem,
    shared_behavior: &DMatrix<f64>,
    index: usize,
) -> (SessionRecord, SessionParams) {
    let mut rng = session_rng(cfg.seed, index);
    let n_spikes = rng.random_range(cfg.n_neurons_min..=cfg.n_neurons_max);
    let n_lfp = rng.random_range(cfg.n_lfp_min..=cfg.n_lfp_max);
    let params = SessionParams::random(cfg, shared_behavior, n_spikes, n_lfp, &mut rng);
    let t = cfg.seq_len * cfg.seqs_per_session;
    let l = cfg.latent_dim;
    let latents = system.simulate(t, &mut rng);
    let spikes = render_spikes(&latents, l, &params, cfg.k_max, &mut rng);
    let lfp = render_lfp(&latents, l, &params, cfg, &mut rng);
    let behavior = render_behavior(&latents, l, &params, cfg.behavior_snr, &mut rng);
    let (lfp, lfp_stats) = zscored(lfp, t, n_lfp);
    let (behavior, behavior_stats) = zscored(behavior, t, cfg.n_behavior);
    let record = SessionRecord {
        session_id: session_id(index),
        subject_id: "synthetic".into(),
        bin_ms: 10.0,
        spikes: Some(Matrix {
            rows: t,
            cols: n_spikes,
            data: spikes,
        }),
        lfp: Some(lfp),
        behavior: Some(behavior),
        true_latents: Some(to_matrix_f32(&latents, t, l)),
        lfp_stats: Some(lfp_stats),
        behavior_stats: Some(behavior_stats),
    };
    (record, params)
}

/// Shared dynamics and behavior subspace, drawn from stream 0 of the seed.
pub fn shared_structure(cfg: &GenConfig) -> (LatentSystem, DMatrix<f64>) {
    let mut rng = session_rng(cfg.seed, 0);
    rng.set_stream(0);
    let system = LatentSystem::random(cfg, &mut rng);
    let mut b = gaussian_matrix(cfg.n_behavior, cfg.latent_dim, &mut rng);
    for r in 0..cfg.n_behavior {
        let n = row_norm(&b, r).max(1e-12);
        b.row_mut(r).scale_mut(1.0 / n);
    }
    (system, b)
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<(Vec<SessionRecord>, DatasetManifest)> {
    cfg.validate()?;
    let (system, shared_behavior) = shared_structure(cfg);
    let sessions: Vec<SessionRecord> = (0..cfg.n_sessions)
        .into_par_iter()
        .map(|i| generate_session(cfg, &system, &shared_behavior, i).0)
        .collect();
    let manifest = DatasetManifest {
        seed: cfg.seed,
        seq_len: cfg.seq_len,
        sessions: sessions
            .iter()
            .map(|s| SessionSummary {
                session_id: s.session_id.clone(),
                subject_id: s.subject_id.clone(),
                n_timesteps: s.n_timesteps(),
                n_spikes: s.n_spikes(),
                n_lfp: s.n_lfp(),
                n_behavior: s.n_behavior(),
                latent_dim: cfg.latent_dim,
            })
            .collect(),
    };
    Ok((sessions, manifest))
}
