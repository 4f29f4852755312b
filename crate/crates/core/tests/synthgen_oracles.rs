use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neurodistill::config::{GenConfig, RunConfig};
use neurodistill::experiment::{oracle_r2, prepare_sessions, raw_r2};
use neurodistill::metrics::{fit_linear_decoder, r2};
use neurodistill::synthgen::*;
use neurodistill::tokenizer::Modality;

/// Exact stationary covariance from `(I - A (x) A) vec S = vec(Q)`.
fn lyapunov(a: &DMatrix<f64>, q: f64) -> DMatrix<f64> {
    let l = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::identity(l * l, l * l) - kron;
    let rhs = DVector::from_fn(l * l, |i, _| if i / l == i % l { q } else { 0.0 });
    let v = lhs.lu().solve(&rhs).expect("stable system");
    DMatrix::from_column_slice(l, l, v.as_slice())
}

fn column_stats(x: &[f64], rows: usize, cols: usize, c: usize) -> (f64, f64) {
    let m = (0..rows).map(|r| x[r * cols + c]).sum::<f64>() / rows as f64;
    let v = (0..rows).map(|r| (x[r * cols + c] - m).powi(2)).sum::<f64>() / rows as f64;
    (m, v)
}

#[test]
fn stationary_variance_matches_lyapunov_solution() {
    let cfg = GenConfig::default();
    let (system, _) = shared_structure(&cfg);
    let exact = lyapunov(&system.a, system.noise_std.powi(2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let steps = 100_000;
    let x = system.simulate(steps, &mut rng);
    for k in 0..system.dim() {
        let (_, v) = column_stats(&x, steps, system.dim(), k);
        assert!((0.5..=2.0).contains(&v), "dim {k}: variance {v}");
        assert!((v - exact[(k, k)]).abs() / exact[(k, k)] < 0.15, "dim {k}: {v} vs {}", exact[(k, k)]);
    }
    assert!((system.spectral_radius() - cfg.spectral_radius).abs() < 1e-6);
}

fn flat_params(n_spikes: usize, bias: f64) -> SessionParams {
    SessionParams {
        spike_loading: DMatrix::zeros(n_spikes, 1),
        spike_bias: vec![bias; n_spikes],
        lfp_mixing: DMatrix::zeros(1, 1),
        lfp_source: vec![None],
        lfp_copy_scale: vec![1.0],
        behavior_loading: DMatrix::zeros(1, 1),
    }
}

#[test]
fn poisson_counts_have_the_configured_mean_and_unit_dispersion() {
    let n = 100_000;
    let latents = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let counts = render_spikes(&latents, 1, &flat_params(1, 0.2f64.ln()), 20, &mut rng);
    let x: Vec<f64> = counts.iter().map(|&k| k as f64).collect();
    let (m, v) = column_stats(&x, n, 1, 0);
    let sigma = (0.2 / n as f64).sqrt();
    assert!((m - 0.2).abs() < 3.0 * sigma, "mean {m}");
    assert!((v / m - 1.0).abs() < 0.05, "variance {v} vs mean {m}");
}

#[test]
fn modulated_neurons_stay_poisson() {
    let cfg = GenConfig::default();
    let (system, b) = shared_structure(&cfg);
    let (rec, params) = generate_session(&cfg, &system, &b, 0);
    let sp = rec.spikes.unwrap();
    let lat = rec.true_latents.unwrap();
    for c in 0..sp.cols.min(10) {
        // conditional on the latents the counts are Poisson with rate exp(eta)
        let (mut resid, mut mean) = (0.0, 0.0);
        for r in 0..sp.rows {
            let mut eta = params.spike_bias[c];
            for k in 0..lat.cols {
                eta += params.spike_loading[(c, k)] * lat.get(r, k) as f64;
            }
            let rate = eta.exp();
            resid += (sp.get(r, c) as f64 - rate).powi(2);
            mean += rate;
        }
        let ratio = resid / mean;
        assert!((ratio - 1.0).abs() < 0.1, "neuron {c}: dispersion {ratio}");
    }
}

fn quiet_cfg() -> GenConfig {
    GenConfig {
        n_sessions: 2,
        seqs_per_session: 40,
        lfp_corr_noise: 0.0,
        lfp_white_noise: 0.0,
        lfp_copy_noise: 0.0,
        ..GenConfig::default()
    }
}

#[test]
fn noiseless_lfp_is_the_exact_mixture() {
    let cfg = quiet_cfg();
    let (system, b) = shared_structure(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, params) = generate_session(&cfg, &system, &b, 0);
    let t = 500;
    let latents = system.simulate(t, &mut rng);
    let y = render_lfp(&latents, cfg.latent_dim, &params, &cfg, &mut rng);
    let n = params.lfp_source.len();
    for s in 0..t {
        for c in 0..n {
            let want: f64 = (0..cfg.latent_dim)
                .map(|k| params.lfp_mixing[(c, k)] * latents[s * cfg.latent_dim + k])
                .sum();
            assert!((y[s * n + c] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn noiseless_lfp_decodes_at_the_oracle_ceiling() {
    let cfg = quiet_cfg();
    let (system, b) = shared_structure(&cfg);
    let (rec, _) = generate_session(&cfg, &system, &b, 1);
    let lfp = rec.lfp.as_ref().unwrap();
    let lat = rec.true_latents.as_ref().unwrap();
    let beh = rec.behavior.as_ref().unwrap();
    let f = |m: &neurodistill::data::Matrix<f32>| m.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let (t, nz) = (beh.rows, beh.cols);
    let y = f(beh);
    let score = |x: &[f64], d: usize| {
        let dec = fit_linear_decoder(x, &y, t, d, nz, 1e-9).unwrap();
        r2(&y, &dec.predict(x, t).unwrap(), t, nz).unwrap()
    };
    let from_lfp = score(&f(lfp), lfp.cols);
    let oracle = score(&f(lat), lat.cols);
    assert!((from_lfp - oracle).abs() < 1e-3, "lfp {from_lfp} oracle {oracle}");
}

#[test]
fn redundant_channels_track_their_sources() {
    let cfg = GenConfig {
        lfp_copy_noise: 0.1,
        ..quiet_cfg()
    };
    let (system, b) = shared_structure(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, params) = generate_session(&cfg, &system, &b, 0);
    let t = 2000;
    let latents = system.simulate(t, &mut rng);
    let y = render_lfp(&latents, cfg.latent_dim, &params, &cfg, &mut rng);
    let n = params.lfp_source.len();
    let mut copies = 0;
    for (c, src) in params.lfp_source.iter().enumerate() {
        let Some(s) = *src else { continue };
        copies += 1;
        let (mc, vc) = column_stats(&y, t, n, c);
        let (ms, vs) = column_stats(&y, t, n, s);
        let cov = (0..t).map(|r| (y[r * n + c] - mc) * (y[r * n + s] - ms)).sum::<f64>() / t as f64;
        let corr = cov / (vc * vs).sqrt();
        assert!(corr.abs() > 0.8, "channel {c} vs {s}: r = {corr}");
    }
    assert!(copies > 0);
}

#[test]
fn default_dataset_properties() {
    let cfg = RunConfig::default();
    let (recs, manifest) = generate_dataset(&cfg.gen).unwrap();
    for (rec, summary) in recs.iter().zip(&manifest.sessions) {
        assert_eq!(summary.n_spikes, rec.spikes.as_ref().unwrap().cols);
        assert_eq!(summary.n_lfp, rec.lfp.as_ref().unwrap().cols);
        assert_eq!(summary.n_timesteps, rec.n_timesteps());
        for m in [rec.lfp.as_ref().unwrap(), rec.behavior.as_ref().unwrap()] {
            let x: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
            for c in 0..m.cols {
                let (mean, var) = column_stats(&x, m.rows, m.cols, c);
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
            }
        }
    }
    let mut sizes: Vec<usize> = recs.iter().map(|r| r.n_spikes()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    assert!(sizes.len() > 1);

    let sessions = prepare_sessions(&cfg, recs).unwrap();
    for s in &sessions {
        let oracle = oracle_r2(&cfg, s).unwrap();
        let spikes = raw_r2(&cfg, s, Modality::Spike).unwrap();
        let lfp = raw_r2(&cfg, s, Modality::Lfp).unwrap();
        assert!(oracle >= 0.9, "{}: oracle {oracle}", s.id());
        assert!(spikes > lfp, "{}: spikes {spikes} lfp {lfp}", s.id());
        assert!(spikes <= oracle + 0.02 && lfp <= oracle + 0.02);
    }
}
