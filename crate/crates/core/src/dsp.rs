//! FFT, window and framing helpers shared by the hearing-loss simulator and
//! the feature extractors.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Log floor used by every log-compressed feature.
pub const LOG_EPS: f64 = 1e-9;

/// Periodic Hann window (sums to a constant under 50% and 75% overlap).
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn sqrt_hann(n: usize) -> Vec<f64> {
    hann(n).into_iter().map(f64::sqrt).collect()
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Number of frames covering `len` samples at the given hop: `ceil(len/hop)`,
/// at least one.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop).max(1)
}

/// Copies `window` samples starting at `start`, zero-padding past the end.
pub fn frame_at(signal: &[f64], start: usize, window: usize) -> Vec<f64> {
    let mut out = vec![0.0; window];
    if start < signal.len() {
        let end = (start + window).min(signal.len());
        out[..end - start].copy_from_slice(&signal[start..end]);
    }
    out
}

/// Complex FFT of a fixed size with a reusable plan.
#[derive(Clone)]
pub struct FftPlan {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("size", &self.size).finish()
    }
}

impl FftPlan {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bins(&self) -> usize {
        self.size / 2 + 1
    }

    /// Full complex spectrum of a real input zero-padded to the plan size.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        assert!(x.len() <= self.size, "input longer than FFT size");
        let mut buf = vec![Complex64::new(0.0, 0.0); self.size];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// In-place forward transform.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    /// In-place unnormalized inverse transform.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }

    /// Power spectrum `|X(f)|²` for bins `0..=size/2`.
    pub fn power(&self, x: &[f64]) -> Vec<f64> {
        let spec = self.forward_real(x);
        spec[..self.bins()].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Hz → mel (HTK formula).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Energy of `x` between `lo_hz` and `hi_hz`, measured with a single DFT over
/// the whole signal.
pub fn band_energy(x: &[f64], sample_rate: f64, lo_hz: f64, hi_hz: f64) -> f64 {
    let plan = FftPlan::new(x.len());
    let spec = plan.forward_real(x);
    let df = sample_rate / x.len() as f64;
    spec[..plan.bins()]
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= lo_hz && f <= hi_hz
        })
        .map(|(_, c)| c.norm_sqr())
        .sum()
}

pub fn energy_db(x: f64) -> f64 {
    10.0 * x.max(1e-300).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_rounds_up() {
        assert_eq!(frame_count(16000, 320), 50);
        assert_eq!(frame_count(16001, 320), 51);
        assert_eq!(frame_count(1, 256), 1);
    }

    #[test]
    fn hann_overlap_adds_to_constant() {
        let w = hann(512);
        for n in 0..128 {
            let s: f64 = (0..4).map(|k| w[n + k * 128]).sum();
            assert!((s - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_of_bin_centred_tone() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * 5.0 * i as f64 / n as f64).cos()).collect();
        let p = FftPlan::new(n).power(&x);
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 5);
    }
}
