//! Audiogram-driven hearing-loss simulation.
//!
//! A simplified stand-in for a full auditory-model simulator: an STFT
//! analysis/modification/synthesis loop that attenuates each frequency bin by
//! the listener's interpolated threshold and, optionally, smears magnitude
//! spectra along log-frequency to mimic broadened auditory filters.
//!
//! Thresholds in dB HL are applied directly as dB of attenuation; there is no
//! HL→SPL calibration and no loudness recruitment.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::corpus::{Audiogram, MonoSignal, AUDIOGRAM_FREQUENCIES_HZ};
use crate::dsp::{sqrt_hann, FftPlan};
use crate::error::{Error, Result};

/// Width (standard deviation, octaves) of a normal-hearing auditory filter
/// used as the reference for smearing.
const NORMAL_FILTER_WIDTH_OCT: f64 = 1.0 / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    None,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    fn index(self) -> usize {
        self as usize
    }
}

/// Classifies an ear by its mean threshold over the 8 anchors:
/// `<20` none, `[20,35)` mild, `[35,56)` moderate, `≥56` severe.
pub fn severity_class(ag: &Audiogram) -> Severity {
    let mean = ag.mean_threshold();
    if mean < 20.0 {
        Severity::None
    } else if mean < 35.0 {
        Severity::Mild
    } else if mean < 56.0 {
        Severity::Moderate
    } else {
        Severity::Severe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HearingLossConfig {
    pub stft_window_samples: usize,
    pub stft_hop_samples: usize,
    pub smearing_enabled: bool,
    /// Auditory-filter broadening factor per severity class
    /// (none, mild, moderate, severe).
    pub smearing_broadening: [f64; 4],
}

impl HearingLossConfig {
    /// 32 ms square-root Hann frames with an 8 ms hop at `sample_rate_hz`.
    pub fn for_rate(sample_rate_hz: u32) -> Self {
        let sr = sample_rate_hz as f64;
        Self {
            stft_window_samples: (0.032 * sr).round().max(4.0) as usize,
            stft_hop_samples: (0.008 * sr).round().max(1.0) as usize,
            smearing_enabled: false,
            smearing_broadening: [1.0, 1.6, 2.4, 4.0],
        }
    }

    pub fn with_smearing(mut self, enabled: bool) -> Self {
        self.smearing_enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stft_window_samples < 2 || self.stft_hop_samples == 0 {
            return Err(Error::invalid("hearing-loss STFT window/hop must be positive"));
        }
        if self.stft_hop_samples > self.stft_window_samples {
            return Err(Error::invalid("hearing-loss hop exceeds window"));
        }
        if self.smearing_broadening.iter().any(|b| b.is_nan() || *b < 1.0) {
            return Err(Error::invalid("smearing broadening factors must be >= 1"));
        }
        Ok(())
    }
}

/// Threshold at `freq_hz`, linear in log-frequency between anchors and flat
/// outside [250, 8000] Hz.
pub fn interpolate_threshold(ag: &Audiogram, freq_hz: f64) -> f64 {
    let t = ag.thresholds();
    let f = &AUDIOGRAM_FREQUENCIES_HZ;
    if freq_hz <= f[0] {
        return t[0];
    }
    if freq_hz >= f[7] {
        return t[7];
    }
    let i = f.windows(2).position(|w| freq_hz <= w[1]).unwrap_or(6);
    let frac = (freq_hz / f[i]).ln() / (f[i + 1] / f[i]).ln();
    t[i] + (t[i + 1] - t[i]) * frac
}

/// Per-bin linear gains `10^(-T(f)/20)` for bins `0..=window/2`.
pub fn bin_gains(ag: &Audiogram, window: usize, sample_rate_hz: u32) -> Vec<f64> {
    let df = sample_rate_hz as f64 / window as f64;
    (0..=window / 2)
        .map(|k| 10f64.powf(-interpolate_threshold(ag, k as f64 * df) / 20.0))
        .collect()
}

/// Column-normalized smearing matrix over bins `0..=window/2`, stored
/// row-major as `out[i] = Σ_k m[i][k] · in[k]`. Each source bin's magnitude
/// is spread over a Gaussian in log-frequency whose width grows with the
/// broadening factor; columns sum to 1, so total magnitude is conserved.
pub fn smearing_matrix(window: usize, sample_rate_hz: u32, broadening: f64) -> Vec<Vec<f64>> {
    let bins = window / 2 + 1;
    let mut m = vec![vec![0.0; bins]; bins];
    let sigma = NORMAL_FILTER_WIDTH_OCT * (broadening * broadening - 1.0).max(0.0).sqrt();
    if sigma == 0.0 {
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        return m;
    }
    let df = sample_rate_hz as f64 / window as f64;
    m[0][0] = 1.0;
    for k in 1..bins {
        let fk = k as f64 * df;
        let mut col: Vec<f64> = (1..bins)
            .map(|i| {
                let d = (i as f64 * df / fk).log2() / sigma;
                (-0.5 * d * d).exp()
            })
            .collect();
        let total: f64 = col.iter().sum();
        col.iter_mut().for_each(|w| *w /= total);
        for (i, w) in col.into_iter().enumerate() {
            m[i + 1][k] = w;
        }
    }
    m
}

/// Simulates the listener's hearing for one ear. Output length equals input
/// length; identical inputs give bitwise-identical outputs.
pub fn apply_hearing_loss(
    sig: &MonoSignal,
    ag: &Audiogram,
    cfg: &HearingLossConfig,
) -> Result<MonoSignal> {
    cfg.validate()?;
    let win_len = cfg.stft_window_samples;
    let hop = cfg.stft_hop_samples;
    if sig.len() < win_len {
        return Err(Error::invalid(format!(
            "signal shorter than one analysis window ({} < {win_len} samples)",
            sig.len()
        )));
    }

    let window = sqrt_hann(win_len);
    let gains = bin_gains(ag, win_len, sig.sample_rate_hz);
    let smear = cfg.smearing_enabled.then(|| {
        let b = cfg.smearing_broadening[severity_class(ag).index()];
        smearing_matrix(win_len, sig.sample_rate_hz, b)
    });
    let plan = FftPlan::new(win_len);
    let bins = win_len / 2 + 1;

    // Pad by a full window on both sides so every sample sees full overlap.
    let n = sig.len();
    let mut padded = vec![0.0; n + 2 * win_len];
    padded[win_len..win_len + n].copy_from_slice(&sig.samples);
    let mut out = vec![0.0; padded.len()];
    let mut norm = vec![0.0; padded.len()];

    let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
    let mut mags = vec![0.0; bins];
    let mut start = 0;
    while start + win_len <= padded.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        plan.forward(&mut buf);

        for (m, c) in mags.iter_mut().zip(&buf[..bins]) {
            *m = c.norm();
        }
        let target: Vec<f64> = match &smear {
            Some(matrix) => matrix
                .iter()
                .map(|row| row.iter().zip(&mags).map(|(w, m)| w * m).sum())
                .collect(),
            None => mags.clone(),
        };
        for k in 0..bins {
            let c = buf[k];
            let scaled = if smear.is_some() {
                let phase = if mags[k] > 0.0 {
                    c / mags[k]
                } else {
                    Complex64::new(1.0, 0.0)
                };
                phase * target[k]
            } else {
                c
            };
            buf[k] = scaled * gains[k];
        }
        for k in 1..win_len - bins + 1 {
            buf[win_len - k] = buf[k].conj();
        }
        if win_len.is_multiple_of(2) {
            buf[win_len / 2].im = 0.0;
        }
        buf[0].im = 0.0;
        plan.inverse(&mut buf);

        for i in 0..win_len {
            out[start + i] += buf[i].re / win_len as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
        start += hop;
    }

    let samples = (0..n)
        .map(|i| {
            let j = i + win_len;
            if norm[j] > 1e-12 {
                out[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    MonoSignal::new(sig.sample_rate_hz, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{band_energy, energy_db};
    use std::f64::consts::PI;

    fn tone(freq: f64, sr: u32, secs: f64, amp: f64) -> MonoSignal {
        let n = (sr as f64 * secs) as usize;
        MonoSignal::new(
            sr,
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn severity_bands() {
        assert_eq!(severity_class(&Audiogram::flat(0.0).unwrap()), Severity::None);
        assert_eq!(severity_class(&Audiogram::flat(40.0).unwrap()), Severity::Moderate);
        let mixed = Audiogram::new(&[10.0, 10.0, 10.0, 10.0, 80.0, 80.0, 80.0, 80.0]).unwrap();
        assert_eq!(severity_class(&mixed), Severity::Moderate);
        assert_eq!(severity_class(&Audiogram::flat(20.0).unwrap()), Severity::Mild);
        assert_eq!(severity_class(&Audiogram::flat(35.0).unwrap()), Severity::Moderate);
        assert_eq!(severity_class(&Audiogram::flat(56.0).unwrap()), Severity::Severe);
    }

    #[test]
    fn interpolation_hits_anchors_and_extrapolates_flat() {
        let ag = Audiogram::new(&[5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0]).unwrap();
        for (f, t) in AUDIOGRAM_FREQUENCIES_HZ.iter().zip(ag.thresholds()) {
            assert!((interpolate_threshold(&ag, *f) - t).abs() < 1e-12);
        }
        assert_eq!(interpolate_threshold(&ag, 0.0), 5.0);
        assert_eq!(interpolate_threshold(&ag, 20000.0), 70.0);
        // geometric midpoint of 500 and 1000 Hz
        let mid = (500.0f64 * 1000.0).sqrt();
        assert!((interpolate_threshold(&ag, mid) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let sig = MonoSignal::new(16000, vec![0.0; 100]).unwrap();
        let cfg = HearingLossConfig::for_rate(16000);
        assert!(apply_hearing_loss(&sig, &Audiogram::flat(0.0).unwrap(), &cfg).is_err());
    }

    #[test]
    fn flat_zero_audiogram_is_near_passthrough() {
        let sig = tone(1000.0, 16000, 0.5, 0.5);
        let cfg = HearingLossConfig::for_rate(16000);
        let out = apply_hearing_loss(&sig, &Audiogram::flat(0.0).unwrap(), &cfg).unwrap();
        assert_eq!(out.len(), sig.len());
        let max_err = out
            .samples
            .iter()
            .zip(&sig.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "{max_err}");
    }

    #[test]
    fn flat_loss_attenuates_uniformly() {
        let sig = tone(700.0, 16000, 0.5, 0.5);
        let cfg = HearingLossConfig::for_rate(16000);
        let out = apply_hearing_loss(&sig, &Audiogram::flat(20.0).unwrap(), &cfg).unwrap();
        let e_in: f64 = sig.samples.iter().map(|x| x * x).sum();
        let e_out: f64 = out.samples.iter().map(|x| x * x).sum();
        assert!((energy_db(e_in) - energy_db(e_out) - 20.0).abs() < 1e-6);
    }

    #[test]
    fn smearing_matrix_columns_sum_to_one() {
        let m = smearing_matrix(512, 16000, 2.4);
        for k in 0..m.len() {
            let s: f64 = m.iter().map(|row| row[k]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let id = smearing_matrix(64, 16000, 1.0);
        assert_eq!(id[3][3], 1.0);
        assert_eq!(id[3][4], 0.0);
    }

    #[test]
    fn smearing_spreads_a_tone() {
        let sig = tone(2000.0, 16000, 0.5, 0.5);
        let ag = Audiogram::flat(60.0).unwrap();
        let cfg = HearingLossConfig::for_rate(16000).with_smearing(true);
        let out = apply_hearing_loss(&sig, &ag, &cfg).unwrap();
        let plain = apply_hearing_loss(&sig, &ag, &cfg.clone().with_smearing(false)).unwrap();
        let off_band = |x: &[f64]| band_energy(x, 16000.0, 2500.0, 4000.0);
        assert!(off_band(&out.samples) > 10.0 * off_band(&plain.samples));
    }
}
