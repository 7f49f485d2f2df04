//! Synthetic corpus for smoke tests and training probes.
//!
//! Each utterance is a harmonic complex with a slow amplitude envelope in
//! white noise, mixed at a per-ear signal-to-noise ratio. Labels are a
//! fixed function of the better ear's SNR and hearing level, increasing in
//! SNR and decreasing in threshold.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{
    write_audiograms, write_binaural_wav, write_manifest, Audiogram, BinauralSignal, Ear, ListenerProfile, Split,
    UtteranceRecord,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_train: 8,
            num_dev: 2,
            num_test: 2,
            duration_s: 0.5,
            sample_rate_hz: 16_000,
            seed: 0,
        }
    }
}

/// Paths of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manifest: PathBuf,
    pub audiograms: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

const SIGNAL_RMS: f64 = 0.05;

/// Label on the 0–100 scale for an ear heard at `snr_db` by an ear with
/// mean threshold `mean_hl_db`; the utterance label uses the better ear.
pub fn ear_label(snr_db: f64, mean_hl_db: f64) -> f64 {
    let effective = snr_db - 0.2 * mean_hl_db;
    100.0 / (1.0 + (-(effective - 2.0) / 4.0).exp())
}

pub fn synthetic_listeners() -> Vec<ListenerProfile> {
    let ag = |t: [f64; 8]| Audiogram::new(&t).expect("valid thresholds");
    vec![
        ListenerProfile {
            listener_id: "L01".into(),
            left: ag([10.0; 8]),
            right: ag([10.0; 8]),
        },
        ListenerProfile {
            listener_id: "L02".into(),
            left: ag([15.0, 15.0, 20.0, 25.0, 30.0, 40.0, 45.0, 50.0]),
            right: ag([15.0, 20.0, 20.0, 30.0, 35.0, 45.0, 50.0, 55.0]),
        },
        ListenerProfile {
            listener_id: "L03".into(),
            left: ag([35.0, 35.0, 40.0, 45.0, 50.0, 55.0, 55.0, 60.0]),
            right: ag([30.0, 35.0, 40.0, 40.0, 45.0, 50.0, 55.0, 60.0]),
        },
        ListenerProfile {
            listener_id: "L04".into(),
            left: ag([20.0, 20.0, 25.0, 25.0, 30.0, 35.0, 40.0, 45.0]),
            right: ag([40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 70.0]),
        },
    ]
}

fn harmonic_signal(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = rng.gen_range(100.0..250.0);
    let am_rate = rng.gen_range(3.0..6.0);
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let harmonics = ((4000.0 / f0) as usize).max(1);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut x: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
            let s: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, ph)| {
                    let h = (k + 1) as f64;
                    (std::f64::consts::TAU * f0 * h * t + ph).sin() / h
                })
                .sum();
            env * s
        })
        .collect();
    scale_to_rms(&mut x, SIGNAL_RMS);
    x
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn noise(len: usize, rms: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut n: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    scale_to_rms(&mut n, rms);
    n
}

/// Writes `wavs/`, `manifest.csv` and `audiograms.json` under `dir`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthCorpus> {
    let total = cfg.num_train + cfg.num_dev + cfg.num_test;
    if total == 0 || cfg.num_train == 0 {
        return Err(Error::invalid("synthetic corpus needs at least one training utterance"));
    }
    let len = (cfg.duration_s * cfg.sample_rate_hz as f64).round() as usize;
    if len < 1024 {
        return Err(Error::invalid(format!("utterance duration {} s is too short", cfg.duration_s)));
    }
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(wav_dir.display().to_string(), e))?;

    let listeners = synthetic_listeners();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = cfg.sample_rate_hz as f64;
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < cfg.num_train {
            Split::Train
        } else if i < cfg.num_train + cfg.num_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let listener = &listeners[i % listeners.len()];
        let base_snr = -6.0 + 18.0 * ((i * 5) % total) as f64 / total.max(2) as f64 + rng.gen_range(-1.0..1.0);
        let ild = rng.gen_range(-3.0..3.0);
        let clean = harmonic_signal(len, fs, &mut rng);
        let mut channels = Vec::with_capacity(2);
        let mut label: f64 = 0.0;
        for (ear, snr) in [(Ear::Left, base_snr), (Ear::Right, base_snr + ild)] {
            let n = noise(len, SIGNAL_RMS * 10f64.powf(-snr / 20.0), &mut rng);
            channels.push(clean.iter().zip(&n).map(|(s, v)| s + v).collect::<Vec<f64>>());
            label = label.max(ear_label(snr, listener.audiogram(ear).mean_threshold()));
        }
        let right = channels.pop().expect("two channels");
        let left = channels.pop().expect("two channels");
        let id = format!("syn{i:03}");
        let rel = PathBuf::from("wavs").join(format!("{id}.wav"));
        write_binaural_wav(dir.join(&rel), &BinauralSignal::new(cfg.sample_rate_hz, left, right)?, 16)?;
        let label = (label * 100.0).round() / 100.0;
        records.push(UtteranceRecord {
            utterance_id: id,
            wav_path: rel,
            listener_id: listener.listener_id.clone(),
            correctness: (split != Split::Test).then_some(label),
            split,
        });
    }
    let manifest = dir.join("manifest.csv");
    let audiograms = dir.join("audiograms.json");
    write_manifest(&manifest, &records)?;
    write_audiograms(&audiograms, &listeners)?;
    Ok(SynthCorpus {
        manifest,
        audiograms,
        records,
    })
}
