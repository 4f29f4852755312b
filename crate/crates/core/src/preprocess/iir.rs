//! Second-order-section IIR design and zero-phase filtering.

use num_complex::Complex64;
use std::f64::consts::PI;

/// One biquad `b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }

    /// Direct-form-II-transposed state reached after a long constant input of 1.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }
}

/// Cascade of biquads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Lowpass,
    Highpass,
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

impl Sos {
    /// Butterworth filter of even `order` via the bilinear transform with
    /// prewarped cutoff.
    pub fn butterworth(order: usize, cutoff: f64, fs: f64, band: Band) -> Self {
        assert!(order >= 2 && order % 2 == 0, "order must be even");
        assert!(cutoff > 0.0 && cutoff < fs / 2.0, "cutoff must lie below Nyquist");
        let wc = 2.0 * fs * (PI * cutoff / fs).tan();
        let n = order as f64;
        let mut sections = Vec::with_capacity(order / 2);
        for k in 0..order / 2 {
            let theta = PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
            let proto = Complex64::from_polar(1.0, theta);
            let s = match band {
                Band::Lowpass => proto * wc,
                Band::Highpass => wc / proto,
            };
            let p = bilinear(s, fs);
            let a = [-2.0 * p.re, p.norm_sqr()];
            let (b, reference) = match band {
                Band::Lowpass => ([1.0, 2.0, 1.0], Complex64::new(1.0, 0.0)),
                Band::Highpass => ([1.0, -2.0, 1.0], Complex64::new(-1.0, 0.0)),
            };
            let num = b[0] + b[1] * reference + b[2] * reference * reference;
            let den = 1.0 + a[0] * reference + a[1] * reference * reference;
            let g = (den / num).norm();
            sections.push(Biquad {
                b: [b[0] * g, b[1] * g, b[2] * g],
                a,
            });
        }
        Self { sections }
    }

    /// Second-order notch at `f0` with quality factor `q`.
    pub fn notch(f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        let c = -2.0 * w0.cos();
        Self {
            sections: vec![Biquad {
                b: [1.0 / a0, c / a0, 1.0 / a0],
                a: [c / a0, (1.0 - alpha) / a0],
            }],
        }
    }

    pub fn chain(mut self, other: Sos) -> Self {
        self.sections.extend(other.sections);
        self
    }

    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(freq, fs))
    }

    /// Causal filtering with the given per-section initial states.
    pub fn filter_with(&self, x: &[f64], init: &[[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (sec, z0) in self.sections.iter().zip(init) {
            let [b0, b1, b2] = sec.b;
            let [a1, a2] = sec.a;
            let (mut z1, mut z2) = (z0[0], z0[1]);
            for v in y.iter_mut() {
                let xin = *v;
                let out = b0 * xin + z1;
                z1 = b1 * xin - a1 * out + z2;
                z2 = b2 * xin - a2 * out;
                *v = out;
            }
        }
        y
    }

    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        self.filter_with(x, &vec![[0.0; 2]; self.sections.len()])
    }

    /// Initial states for a signal that has been constant at `level` forever.
    pub fn steady_state(&self, level: f64) -> Vec<[f64; 2]> {
        let mut gain = level;
        self.sections
            .iter()
            .map(|s| {
                let z = s.step_state();
                let out = [z[0] * gain, z[1] * gain];
                gain *= s.dc_gain();
                out
            })
            .collect()
    }

    fn start_level(&self, x: &[f64]) -> f64 {
        let dc = self.sections.iter().map(Biquad::dc_gain).product::<f64>();
        if dc.abs() < 1e-6 {
            x.iter().sum::<f64>() / x.len() as f64
        } else {
            x[0]
        }
    }

    pub fn default_padlen(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Forward-backward filtering with odd-reflection padding and
    /// steady-state initial conditions, giving zero phase and squared
    /// magnitude response. DC-blocking cascades start from the signal mean
    /// rather than the edge value, so a slow high-pass does not ring for
    /// seconds after the edges.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let fwd = self.filter_with(&ext, &self.steady_state(self.start_level(&ext)));
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        let init = self.steady_state(self.start_level(&rev));
        rev = self.filter_with(&rev, &init);
        rev.reverse();
        rev[pad..pad + n].to_vec()
    }
}
