//! Cross-domain feature streams for one branch: STFT log-magnitudes,
//! learnable filter-bank energies and external frame embeddings, aligned to
//! a common frame grid.

pub mod container;
pub mod lfb;
pub mod provider;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::MonoSignal;
use crate::dsp::{frame_at, frame_count, hann, FftPlan, LOG_EPS};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use lfb::{lfb_features, lfb_gradient, LfbParams};
pub use provider::{provider_from_name, EmbeddingKey, EmbeddingProvider, MelProxy, Precomputed};

use container::{read_tensors, write_tensors, TensorHeader};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    /// `F × (window/2 + 1)` log-magnitudes.
    pub frames: Matrix,
    pub frame_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfbFeatures {
    /// `F × num_filters` log filter energies.
    pub frames: Matrix,
    pub frame_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslFeatures {
    pub frames: Matrix,
    pub frame_rate_hz: f64,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub spectral: SpectralFeatures,
    pub lfb: LfbFeatures,
    pub ssl: SslFeatures,
    pub num_frames: usize,
}

/// Log-magnitude STFT with a periodic Hann window. Frames start every `hop`
/// samples; there are `ceil(len/hop)` of them, zero-padded past the end.
pub fn stft_features(sig: &MonoSignal, window: usize, hop: usize) -> Result<SpectralFeatures> {
    if window < 64 || !window.is_power_of_two() {
        return Err(Error::invalid(format!(
            "STFT window must be a power of two >= 64, got {window}"
        )));
    }
    if hop == 0 || hop > window {
        return Err(Error::invalid(format!("STFT hop must be in 1..={window}, got {hop}")));
    }
    let plan = FftPlan::new(window);
    let win = hann(window);
    let frames = frame_count(sig.len(), hop);
    let mut out = Matrix::zeros(frames, plan.bins());
    for t in 0..frames {
        let mut x = frame_at(&sig.samples, t * hop, window);
        x.iter_mut().zip(&win).for_each(|(v, w)| *v *= w);
        for (o, p) in out.row_mut(t).iter_mut().zip(plan.power(&x)) {
            *o = (p.sqrt() + LOG_EPS).ln();
        }
    }
    Ok(SpectralFeatures {
        frames: out,
        frame_rate_hz: sig.sample_rate_hz as f64 / hop as f64,
    })
}

/// Repeats rows of `source` onto a grid of `target_frames` frames: target
/// frame `t` takes the source row whose centre, in time normalized to the
/// utterance length, is nearest to the target frame's centre.
pub fn align_rows(source: &Matrix, target_frames: usize) -> Matrix {
    let src = source.rows();
    let mut out = Matrix::zeros(target_frames, source.cols());
    for t in 0..target_frames {
        let j = (((t as f64 + 0.5) * src as f64 / target_frames as f64).floor() as usize).min(src - 1);
        out.row_mut(t).copy_from_slice(source.row(j));
    }
    out
}

/// Aligns the three streams to the spectral frame grid. The filter-bank
/// stream must already share it.
pub fn align_features(
    spectral: SpectralFeatures,
    lfb: LfbFeatures,
    ssl: SslFeatures,
) -> Result<FeatureBundle> {
    let f = spectral.frames.rows();
    if f == 0 || ssl.frames.rows() == 0 || lfb.frames.rows() == 0 {
        return Err(Error::invalid("cannot align empty feature streams"));
    }
    if lfb.frames.rows() != f {
        return Err(Error::invalid(format!(
            "filter-bank stream has {} frames, spectral stream {f}",
            lfb.frames.rows()
        )));
    }
    let frames = align_rows(&ssl.frames, f);
    Ok(FeatureBundle {
        num_frames: f,
        ssl: SslFeatures {
            frames,
            frame_rate_hz: spectral.frame_rate_hz,
            provider_id: ssl.provider_id,
        },
        spectral,
        lfb,
    })
}

/// Frame geometry of the model-facing feature streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window: usize,
    pub hop: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window: 512,
            hop: 256,
        }
    }
}

/// Model-facing form of a branch's features, as cached on disk.
///
/// The filter-bank stream is kept as framed waveform segments because its
/// filters are trained with the model; all values are stored at `f32`
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInput {
    pub spectral: Matrix,
    pub lfb_frames: Matrix,
    pub ssl: Matrix,
    pub provider_id: String,
}

impl BranchInput {
    pub fn num_frames(&self) -> usize {
        self.spectral.rows()
    }

    pub fn extract(
        sig: &MonoSignal,
        cfg: &FrontendConfig,
        provider: &dyn EmbeddingProvider,
        key: &EmbeddingKey,
    ) -> Result<Self> {
        if sig.sample_rate_hz != cfg.sample_rate_hz {
            return Err(Error::invalid(format!(
                "feature extraction expects {} Hz, got {} Hz",
                cfg.sample_rate_hz, sig.sample_rate_hz
            )));
        }
        let mut spectral = stft_features(sig, cfg.window, cfg.hop)?.frames;
        let mut lfb_frames = lfb::frame_signal(&sig.samples, cfg.window, cfg.hop);
        let ssl = provider.embed(key, sig)?;
        let mut ssl_frames = align_rows(&ssl.frames, spectral.rows());
        spectral.round_to_f32();
        lfb_frames.round_to_f32();
        ssl_frames.round_to_f32();
        Ok(Self {
            spectral,
            lfb_frames,
            ssl: ssl_frames,
            provider_id: ssl.provider_id,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let h = |m: &Matrix, name: &str| TensorHeader::new(m, &self.provider_id, Some(name));
        write_tensors(
            path,
            &[
                (h(&self.spectral, "spectral"), &self.spectral),
                (h(&self.lfb_frames, "lfb_frames"), &self.lfb_frames),
                (h(&self.ssl, "ssl"), &self.ssl),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tensors = read_tensors(path)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(h, _)| h.name.as_deref() == Some(name))
                .map(|(h, m)| (h.provider_id.clone(), m.clone()))
                .ok_or_else(|| Error::invalid(format!("{}: missing tensor `{name}`", path.display())))
        };
        let (provider_id, spectral) = find("spectral")?;
        let (_, lfb_frames) = find("lfb_frames")?;
        let (_, ssl) = find("ssl")?;
        if lfb_frames.rows() != spectral.rows() || ssl.rows() != spectral.rows() {
            return Err(Error::invalid(format!(
                "{}: streams have unequal frame counts",
                path.display()
            )));
        }
        Ok(Self {
            spectral,
            lfb_frames,
            ssl,
            provider_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Ear;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize) -> MonoSignal {
        MonoSignal::new(
            16000,
            (0..n).map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zeros_give_log_floor() {
        let f = stft_features(&MonoSignal::new(16000, vec![0.0; 1000]).unwrap(), 512, 256).unwrap();
        assert_eq!(f.frames.shape(), (4, 257));
        assert!(f.frames.data().iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let f = stft_features(&tone(1000.0, 16000), 512, 256).unwrap();
        // the last frames run into zero padding; check the fully covered ones
        for t in 0..f.frames.rows() - 2 {
            let row = f.frames.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn chirp_peak_is_nondecreasing() {
        // linear chirp from 200 Hz to 6 kHz over one second
        let n = 16000;
        let sig = MonoSignal::new(
            16000,
            (0..n)
                .map(|i| {
                    let t = i as f64 / 16000.0;
                    (2.0 * PI * (200.0 * t + 0.5 * 5800.0 * t * t)).sin()
                })
                .collect(),
        )
        .unwrap();
        let f = stft_features(&sig, 512, 256).unwrap();
        let win = hann(512);
        let full_frames = (n - 512) / 256 + 1;
        let mut last = 0;
        for t in 0..full_frames {
            // oracle: naive DFT of the windowed frame
            let x: Vec<f64> = (0..512).map(|i| sig.samples[t * 256 + i] * win[i]).collect();
            let naive_peak = (0..257)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, v) in x.iter().enumerate() {
                        let a = -2.0 * PI * (k * i) as f64 / 512.0;
                        re += v * a.cos();
                        im += v * a.sin();
                    }
                    (k, re * re + im * im)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            let row = f.frames.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, naive_peak);
            assert!(argmax >= last);
            last = argmax;
        }
    }

    #[test]
    fn invalid_stft_parameters() {
        let sig = tone(100.0, 1000);
        assert!(stft_features(&sig, 48, 16).is_err());
        assert!(stft_features(&sig, 100, 16).is_err());
        assert!(stft_features(&sig, 64, 65).is_err());
        assert!(stft_features(&sig, 64, 0).is_err());
    }

    #[test]
    fn alignment_cases() {
        let ssl = Matrix::from_vec(4, 2, (0..8).map(f64::from).collect());
        assert_eq!(align_rows(&ssl, 4), ssl);

        let half = align_rows(&ssl, 8);
        for t in 0..8 {
            assert_eq!(half.row(t), ssl.row(t / 2));
        }

        let constant = align_rows(&Matrix::filled(3, 5, 1.5), 11);
        assert_eq!(constant, Matrix::filled(11, 5, 1.5));
    }

    #[test]
    fn frame_counts_agree_across_streams() {
        for n in [1usize, 255, 256, 257, 4000] {
            let sig = tone(440.0, n);
            let s = stft_features(&sig, 512, 256).unwrap();
            let l = lfb_features(&sig, &LfbParams::mel_init(2, 11, 16000), 256, 512).unwrap();
            assert_eq!(s.frames.rows(), l.frames.rows());
            let key = EmbeddingKey::new("u", Ear::Left);
            let e = MelProxy::default().embed(&key, &sig).unwrap();
            let b = align_features(s, l, e).unwrap();
            assert_eq!(b.ssl.frames.rows(), b.num_frames);
            assert_eq!(b.lfb.frames.rows(), b.num_frames);
        }
    }

    #[test]
    fn branch_input_round_trips_through_container() {
        let sig = tone(700.0, 3000);
        let key = EmbeddingKey::new("u", Ear::Right);
        let input =
            BranchInput::extract(&sig, &FrontendConfig::default(), &MelProxy::default(), &key).unwrap();
        assert_eq!(input.num_frames(), 12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.right.feat");
        input.save(&p).unwrap();
        assert_eq!(BranchInput::load(&p).unwrap(), input);
    }
}
