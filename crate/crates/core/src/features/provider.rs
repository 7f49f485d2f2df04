//! Frame-level speech representations from external encoders.
//!
//! Pretrained self-supervised encoders are not embedded in this crate; their
//! outputs enter through an [`EmbeddingProvider`]. Two providers ship:
//! `precomputed` reads an archive of stored matrices, and `mel-proxy`
//! computes log-mel filterbank features as a self-contained stand-in.

use std::path::{Path, PathBuf};

use crate::corpus::{Ear, MonoSignal};
use crate::dsp::{frame_at, frame_count, hann, hz_to_mel, mel_to_hz, FftPlan, LOG_EPS};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::container::read_tensors;
use super::SslFeatures;

/// Rate every provider expects its input at.
pub const EMBEDDING_RATE_HZ: u32 = 16_000;

pub const REGISTERED_PROVIDERS: [&str; 2] = [MelProxy::ID, Precomputed::ID];

/// Identifies which stored matrix a lookup refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingKey {
    pub utterance_id: String,
    pub branch: Ear,
}

impl EmbeddingKey {
    pub fn new(utterance_id: impl Into<String>, branch: Ear) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            branch,
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.{}.emb", self.utterance_id, self.branch)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn sample_rate_hz(&self) -> u32 {
        EMBEDDING_RATE_HZ
    }

    /// Embedding dimension when known without looking at data.
    fn dim(&self) -> Option<usize>;

    fn embed(&self, key: &EmbeddingKey, sig: &MonoSignal) -> Result<SslFeatures>;

    /// Keys this provider cannot serve; empty for computed providers.
    fn missing(&self, _keys: &[EmbeddingKey]) -> Vec<String> {
        Vec::new()
    }
}

/// Builds a registered provider by name. `precomputed` needs an archive
/// directory.
pub fn provider_from_name(name: &str, archive: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>> {
    match name {
        MelProxy::ID => Ok(Box::new(MelProxy::default())),
        Precomputed::ID => {
            let dir = archive.ok_or_else(|| {
                Error::invalid("provider `precomputed` requires an embedding archive directory")
            })?;
            Ok(Box::new(Precomputed::open(dir)?))
        }
        other => Err(Error::UnknownProvider {
            name: other.to_string(),
            registered: REGISTERED_PROVIDERS.join(", "),
        }),
    }
}

fn check_rate(provider: &dyn EmbeddingProvider, sig: &MonoSignal) -> Result<()> {
    if sig.sample_rate_hz != provider.sample_rate_hz() {
        return Err(Error::invalid(format!(
            "provider `{}` expects {} Hz input, got {} Hz",
            provider.id(),
            provider.sample_rate_hz(),
            sig.sample_rate_hz
        )));
    }
    Ok(())
}

/// Log-mel filterbank energies: 25 ms Hann frames every 20 ms, 40 triangular
/// HTK-mel bands over 0–8 kHz.
#[derive(Debug, Clone)]
pub struct MelProxy {
    window: usize,
    hop: usize,
    plan: FftPlan,
    /// `num_mels × bins`
    filters: Matrix,
}

impl MelProxy {
    pub const ID: &'static str = "mel-proxy";
    pub const NUM_MELS: usize = 40;

    pub fn new(window: usize, hop: usize, num_mels: usize) -> Self {
        let plan = FftPlan::new(window.next_power_of_two());
        let filters = mel_filterbank(num_mels, plan.size(), EMBEDDING_RATE_HZ as f64);
        Self {
            window,
            hop,
            plan,
            filters,
        }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }
}

impl Default for MelProxy {
    fn default() -> Self {
        Self::new(400, 320, Self::NUM_MELS)
    }
}

fn mel_filterbank(num_mels: usize, fft_size: usize, sample_rate: f64) -> Matrix {
    let bins = fft_size / 2 + 1;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(num_mels, bins);
    for m in 0..num_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / fft_size as f64;
            let w = if f > left && f <= centre {
                (f - left) / (centre - left)
            } else if f > centre && f < right {
                (right - f) / (right - centre)
            } else {
                0.0
            };
            fb.set(m, k, w);
        }
    }
    fb
}

impl EmbeddingProvider for MelProxy {
    fn id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> Option<usize> {
        Some(self.filters.rows())
    }

    fn embed(&self, _key: &EmbeddingKey, sig: &MonoSignal) -> Result<SslFeatures> {
        check_rate(self, sig)?;
        let window = hann(self.window);
        let frames = frame_count(sig.len(), self.hop);
        let mels = self.filters.rows();
        let mut out = Matrix::zeros(frames, mels);
        for t in 0..frames {
            let mut x = frame_at(&sig.samples, t * self.hop, self.window);
            x.iter_mut().zip(&window).for_each(|(v, w)| *v *= w);
            let p = self.plan.power(&x);
            for m in 0..mels {
                let e: f64 = self.filters.row(m).iter().zip(&p).map(|(w, v)| w * v).sum();
                out.set(t, m, (e + LOG_EPS).ln());
            }
        }
        Ok(SslFeatures {
            frames: out,
            frame_rate_hz: sig.sample_rate_hz as f64 / self.hop as f64,
            provider_id: Self::ID.into(),
        })
    }
}

/// Looks up `<utterance_id>.<branch>.emb` files in an archive directory.
#[derive(Debug, Clone)]
pub struct Precomputed {
    dir: PathBuf,
}

impl Precomputed {
    pub const ID: &'static str = "precomputed";

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::invalid(format!(
                "embedding archive `{}` is not a directory",
                dir.display()
            )));
        }
        Ok(Self { dir })
    }

    fn path(&self, key: &EmbeddingKey) -> PathBuf {
        self.dir.join(key.file_name())
    }
}

impl EmbeddingProvider for Precomputed {
    fn id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn embed(&self, key: &EmbeddingKey, sig: &MonoSignal) -> Result<SslFeatures> {
        check_rate(self, sig)?;
        let path = self.path(key);
        if !path.is_file() {
            return Err(Error::MissingEmbeddings(vec![path.display().to_string()]));
        }
        let mut tensors = read_tensors(&path)?;
        if tensors.len() != 1 {
            return Err(Error::invalid(format!(
                "{}: expected exactly one tensor, found {}",
                path.display(),
                tensors.len()
            )));
        }
        let (header, frames) = tensors.remove(0);
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::invalid(format!("{}: empty embedding matrix", path.display())));
        }
        if !frames.is_finite() {
            return Err(Error::invalid(format!("{}: non-finite embedding values", path.display())));
        }
        Ok(SslFeatures {
            frame_rate_hz: frames.rows() as f64 / sig.duration_s(),
            frames,
            provider_id: header.provider_id,
        })
    }

    fn missing(&self, keys: &[EmbeddingKey]) -> Vec<String> {
        keys.iter()
            .map(|k| self.path(k))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect()
    }
}
