//! Broadband-to-LFP filtering, spike binning, z-scoring and segmentation.

pub mod iir;

use log::warn;
use rayon::prelude::*;

use crate::config::FilterSpec;
use crate::data::{Matrix, ZStats};
use crate::error::{Error, Result};
use iir::{Band, Sos};

/// Raw multi-channel recording, `[n_samples x channels]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BroadbandRecording {
    pub samples: Vec<f64>,
    pub channels: usize,
    pub sample_rate: f64,
}

impl BroadbandRecording {
    pub fn n_samples(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.samples.len() / self.channels
        }
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.n_samples()).map(|i| self.samples[i * self.channels + c]).collect()
    }
}

/// Notch harmonics below Nyquist followed by the high- and low-pass stages.
pub fn filter_cascade(spec: &FilterSpec, fs: f64) -> Vec<Sos> {
    let mut stages = Vec::new();
    let mut notches = Sos::default();
    let mut f = spec.notch_base;
    while f < fs / 2.0 {
        notches = notches.chain(Sos::notch(f, spec.notch_q, fs));
        f += spec.notch_base;
    }
    if !notches.sections.is_empty() {
        stages.push(notches);
    }
    stages.push(Sos::butterworth(spec.order, spec.highpass_cut, fs, Band::Highpass));
    if spec.lowpass_cut < fs / 2.0 {
        stages.push(Sos::butterworth(spec.order, spec.lowpass_cut, fs, Band::Lowpass));
    }
    stages
}

/// Zero-phase application of every stage to one channel.
pub fn filter_channel(x: &[f64], stages: &[Sos]) -> Vec<f64> {
    stages.iter().fold(x.to_vec(), |acc, s| s.filtfilt(&acc, s.default_padlen()))
}

/// Subtracts the across-channel mean from every sample.
pub fn common_average_reference(data: &mut [f64], channels: usize) {
    for row in data.chunks_mut(channels) {
        // Offsetting by the first channel keeps identical channels exactly zero.
        let r0 = row[0];
        let m = r0 + row.iter().map(|v| v - r0).sum::<f64>() / channels as f64;
        row.iter_mut().for_each(|v| *v -= m);
    }
}

/// Resamples one channel to `target` Hz: every k-th sample when the ratio is
/// an integer, linear interpolation otherwise.
pub fn decimate(x: &[f64], fs: f64, target: f64) -> Vec<f64> {
    let ratio = fs / target;
    let k = ratio.round();
    if (ratio - k).abs() < 1e-9 && k >= 1.0 {
        return x.iter().step_by(k as usize).copied().collect();
    }
    let duration = x.len() as f64 / fs;
    let n_out = (duration * target).floor() as usize;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            let frac = pos - lo as f64;
            x[lo] * (1.0 - frac) + x[hi] * frac
        })
        .collect()
}

/// Notch, high-pass, low-pass, common average reference and decimation to
/// the target rate. Returns `[T x channels]`.
pub fn broadband_to_lfp(rec: &BroadbandRecording, spec: &FilterSpec) -> Result<Matrix<f64>> {
    spec.validate()?;
    if rec.channels < 2 {
        return Err(Error::Data("common average referencing needs at least 2 channels".into()));
    }
    if rec.samples.len() % rec.channels != 0 || rec.n_samples() < 2 {
        return Err(Error::Data("broadband sample count is not a multiple of the channel count".into()));
    }
    if !(rec.sample_rate >= spec.target_rate) {
        return Err(Error::Data(format!(
            "sample rate {} Hz is below the {} Hz target",
            rec.sample_rate, spec.target_rate
        )));
    }
    let ratio = rec.sample_rate / spec.target_rate;
    if (ratio - ratio.round()).abs() > 1e-9 {
        warn!(
            "sample rate {} Hz is not a multiple of {} Hz; resampling by linear interpolation",
            rec.sample_rate, spec.target_rate
        );
    }
    let stages = filter_cascade(spec, rec.sample_rate);
    let filtered: Vec<Vec<f64>> = (0..rec.channels)
        .into_par_iter()
        .map(|c| filter_channel(&rec.channel(c), &stages))
        .collect();
    let n = rec.n_samples();
    let mut interleaved = vec![0.0; n * rec.channels];
    for (c, col) in filtered.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            interleaved[i * rec.channels + c] = v;
        }
    }
    common_average_reference(&mut interleaved, rec.channels);
    let decimated: Vec<Vec<f64>> = (0..rec.channels)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|i| interleaved[i * rec.channels + c]).collect();
            decimate(&col, rec.sample_rate, spec.target_rate)
        })
        .collect();
    let t = decimated[0].len();
    let mut out = vec![0.0; t * rec.channels];
    for (c, col) in decimated.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[i * rec.channels + c] = v;
        }
    }
    Matrix::new(t, rec.channels, out)
}

/// Counts per half-open bin `[k w, (k+1) w)`; units whose mean rate falls
/// below `min_rate_hz` are dropped. Returns counts over kept units and the
/// kept-unit mask.
pub fn bin_spikes(
    spike_times: &[Vec<f64>],
    bin_ms: f64,
    duration: f64,
    min_rate_hz: f64,
) -> Result<(Matrix<u32>, Vec<bool>)> {
    if !(bin_ms > 0.0 && duration > 0.0) {
        return Err(Error::Data("bin width and duration must be positive".into()));
    }
    let width = bin_ms / 1000.0;
    let n_bins = (duration / width).round() as usize;
    let mut kept = Vec::with_capacity(spike_times.len());
    let mut columns = Vec::new();
    for (u, times) in spike_times.iter().enumerate() {
        if let Some(&t) = times.iter().find(|&&t| t < 0.0 || !t.is_finite()) {
            return Err(Error::Data(format!("unit {u} has invalid spike time {t}")));
        }
        let rate = times.len() as f64 / duration;
        let keep = rate >= min_rate_hz;
        kept.push(keep);
        if !keep {
            continue;
        }
        let mut col = vec![0u32; n_bins];
        for &t in times {
            // Integer bin edges avoid float drift at exact boundaries.
            let b = (t / width + 1e-9).floor() as usize;
            if b < n_bins {
                col[b] += 1;
            }
        }
        columns.push(col);
    }
    let units = columns.len();
    let mut data = vec![0u32; n_bins * units];
    for (u, col) in columns.iter().enumerate() {
        for (b, &k) in col.iter().enumerate() {
            data[b * units + u] = k;
        }
    }
    Ok((Matrix::new(n_bins, units, data)?, kept))
}

/// Drops columns of already-binned counts whose rate falls below threshold.
pub fn threshold_binned(counts: &Matrix<u32>, bin_ms: f64, min_rate_hz: f64) -> (Matrix<u32>, Vec<bool>) {
    let duration = counts.rows as f64 * bin_ms / 1000.0;
    let kept: Vec<bool> = (0..counts.cols)
        .map(|c| (0..counts.rows).map(|r| counts.get(r, c) as f64).sum::<f64>() / duration >= min_rate_hz)
        .collect();
    let cols: Vec<usize> = (0..counts.cols).filter(|&c| kept[c]).collect();
    let mut data = Vec::with_capacity(counts.rows * cols.len());
    for r in 0..counts.rows {
        data.extend(cols.iter().map(|&c| counts.get(r, c)));
    }
    (
        Matrix {
            rows: counts.rows,
            cols: cols.len(),
            data,
        },
        kept,
    )
}

/// Per-column standardisation of `[rows x cols]` data. Constant columns are
/// centred and keep a recorded std of 1.
pub fn zscore(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, ZStats) {
    assert_eq!(x.len(), rows * cols);
    let mut mean = vec![0.0; cols];
    let mut std = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x[r * cols + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for r in 0..rows {
        for c in 0..cols {
            std[c] += (x[r * cols + c] - mean[c]).powi(2);
        }
    }
    for (c, s) in std.iter_mut().enumerate() {
        *s = (*s / rows as f64).sqrt();
        if *s <= 1e-12 * (1.0 + mean[c].abs()) {
            warn!("z-score: dimension {c} has zero variance; recording std = 1");
            *s = 1.0;
        }
    }
    let z = x
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % cols]) / std[i % cols])
        .collect();
    (z, ZStats { mean, std })
}

pub fn zscore_checked(x: &[f64], rows: usize, cols: usize) -> Result<(Vec<f64>, ZStats)> {
    if rows < 2 {
        return Err(Error::Data("z-scoring needs at least 2 timesteps".into()));
    }
    Ok(zscore(x, rows, cols))
}

pub fn unzscore(z: &[f64], stats: &ZStats) -> Vec<f64> {
    let cols = stats.mean.len();
    z.iter()
        .enumerate()
        .map(|(i, &v)| v * stats.std[i % cols] + stats.mean[i % cols])
        .collect()
}

/// Number of complete windows and the count of trailing bins dropped.
pub fn segment_count(t: usize, seq_len: usize) -> Result<(usize, usize)> {
    if seq_len == 0 || t < seq_len {
        return Err(Error::Data(format!(
            "{t} timesteps cannot hold a sequence of {seq_len} bins"
        )));
    }
    Ok((t / seq_len, t % seq_len))
}

/// Cuts every aligned array into identical non-overlapping windows.
pub fn segment<T: Copy>(arrays: &[&Matrix<T>], seq_len: usize) -> Result<Vec<Vec<Matrix<T>>>> {
    let t = arrays.first().map_or(0, |m| m.rows);
    if arrays.iter().any(|m| m.rows != t) {
        return Err(Error::Data("arrays to segment have different lengths".into()));
    }
    let (n, _) = segment_count(t, seq_len)?;
    Ok((0..n)
        .map(|i| arrays.iter().map(|m| m.rows_slice(i * seq_len, seq_len)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_examples() {
        let (c, kept) = bin_spikes(&[vec![0.005, 0.012]], 10.0, 0.02, 0.0).unwrap();
        assert_eq!(c.data, vec![1, 1]);
        assert_eq!(kept, vec![true]);
        let slow: Vec<f64> = (0..5).map(|i| i as f64 * 2.0).collect();
        let (c, kept) = bin_spikes(&[slow], 10.0, 10.0, 1.0).unwrap();
        assert_eq!(c.cols, 0);
        assert_eq!(kept, vec![false]);
        assert!(bin_spikes(&[vec![-0.1]], 10.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zscore_examples() {
        let x = vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0];
        let (z, st) = zscore(&x, 4, 2);
        assert_eq!(st.std[1], 1.0);
        for r in 0..4 {
            assert_eq!(z[r * 2 + 1], 0.0);
        }
        let back = unzscore(&z, &st);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_count(1050, 500).unwrap(), (2, 50));
        assert_eq!(segment_count(500, 500).unwrap(), (1, 0));
        assert!(segment_count(499, 500).is_err());
        let m = Matrix::new(1050, 1, (0..1050).collect::<Vec<u32>>()).unwrap();
        let segs = segment(&[&m, &m], 500).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1][0].data[0], 500);
        assert_eq!(segs[1][1], segs[1][0]);
    }

    #[test]
    fn car_of_identical_channels_is_zero() {
        let mut x: Vec<f64> = (0..40).map(|i| ((i / 4) as f64).sin()).collect();
        common_average_reference(&mut x, 4);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decimation_by_integer_ratio() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(decimate(&x, 1000.0, 100.0), (0..10).map(|i| (i * 10) as f64).collect::<Vec<_>>());
        assert_eq!(decimate(&x, 100.0, 100.0), x);
    }
}
