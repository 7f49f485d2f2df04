//! Typed records for the pipeline: audiograms, listener profiles, binaural
//! and monaural signals, and the utterance manifest.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pure-tone audiometry frequencies at which thresholds are measured.
pub const AUDIOGRAM_FREQUENCIES_HZ: [f64; 8] =
    [250.0, 500.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0, 8000.0];

pub const MIN_THRESHOLD_DB_HL: f64 = -10.0;
pub const MAX_THRESHOLD_DB_HL: f64 = 120.0;

pub const MANIFEST_HEADER: [&str; 5] = ["utterance_id", "wav_path", "listener_id", "correctness", "split"];

/// Hearing thresholds of one ear in dB HL, one per entry of
/// [`AUDIOGRAM_FREQUENCIES_HZ`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Audiogram {
    thresholds_db_hl: [f64; 8],
}

impl Audiogram {
    pub fn new(thresholds: &[f64]) -> Result<Self> {
        if thresholds.len() != AUDIOGRAM_FREQUENCIES_HZ.len() {
            return Err(Error::invalid(format!(
                "expected 8 thresholds, got {}",
                thresholds.len()
            )));
        }
        for (&t, f) in thresholds.iter().zip(AUDIOGRAM_FREQUENCIES_HZ) {
            if !t.is_finite() {
                return Err(Error::invalid(format!("non-finite threshold at {f} Hz")));
            }
            if t < MIN_THRESHOLD_DB_HL {
                return Err(Error::invalid(format!(
                    "threshold below -10 dB HL at {f} Hz: {t}"
                )));
            }
            if t > MAX_THRESHOLD_DB_HL {
                return Err(Error::invalid(format!(
                    "threshold above 120 dB HL at {f} Hz: {t}"
                )));
            }
        }
        let mut thresholds_db_hl = [0.0; 8];
        thresholds_db_hl.copy_from_slice(thresholds);
        Ok(Self { thresholds_db_hl })
    }

    pub fn flat(level_db_hl: f64) -> Result<Self> {
        Self::new(&[level_db_hl; 8])
    }

    pub fn thresholds(&self) -> &[f64; 8] {
        &self.thresholds_db_hl
    }

    pub fn frequencies(&self) -> &'static [f64; 8] {
        &AUDIOGRAM_FREQUENCIES_HZ
    }

    pub fn mean_threshold(&self) -> f64 {
        self.thresholds_db_hl.iter().sum::<f64>() / 8.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ear {
    Left,
    Right,
}

impl Ear {
    pub fn as_str(self) -> &'static str {
        match self {
            Ear::Left => "left",
            Ear::Right => "right",
        }
    }
}

impl fmt::Display for Ear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ear {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Ear::Left),
            "right" => Ok(Ear::Right),
            other => Err(Error::invalid(format!("unknown ear `{other}` (left|right)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListenerProfile {
    pub listener_id: String,
    pub left: Audiogram,
    pub right: Audiogram,
}

impl ListenerProfile {
    pub fn audiogram(&self, ear: Ear) -> &Audiogram {
        match ear {
            Ear::Left => &self.left,
            Ear::Right => &self.right,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AudiogramFile {
    listeners: Vec<AudiogramEntry>,
}

#[derive(Serialize, Deserialize)]
struct AudiogramEntry {
    listener_id: String,
    left: Vec<f64>,
    right: Vec<f64>,
}

pub fn load_audiograms(path: impl AsRef<Path>) -> Result<HashMap<String, ListenerProfile>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parsed: AudiogramFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
    let mut out = HashMap::with_capacity(parsed.listeners.len());
    for entry in parsed.listeners {
        if entry.listener_id.is_empty() {
            return Err(Error::invalid(format!("{}: empty listener_id", path.display())));
        }
        let ctx = |ear: &str, e: Error| {
            Error::invalid(format!(
                "{}: listener {} ({ear}): {e}",
                path.display(),
                entry.listener_id
            ))
        };
        let left = Audiogram::new(&entry.left).map_err(|e| ctx("left", e))?;
        let right = Audiogram::new(&entry.right).map_err(|e| ctx("right", e))?;
        if out.contains_key(&entry.listener_id) {
            return Err(Error::invalid(format!(
                "{}: duplicate listener id `{}`",
                path.display(),
                entry.listener_id
            )));
        }
        out.insert(
            entry.listener_id.clone(),
            ListenerProfile {
                listener_id: entry.listener_id,
                left,
                right,
            },
        );
    }
    Ok(out)
}

/// Writes profiles sorted by listener id.
pub fn write_audiograms<'a>(
    path: impl AsRef<Path>,
    profiles: impl IntoIterator<Item = &'a ListenerProfile>,
) -> Result<()> {
    let path = path.as_ref();
    let mut listeners: Vec<AudiogramEntry> = profiles
        .into_iter()
        .map(|p| AudiogramEntry {
            listener_id: p.listener_id.clone(),
            left: p.left.thresholds().to_vec(),
            right: p.right.thresholds().to_vec(),
        })
        .collect();
    listeners.sort_by(|a, b| a.listener_id.cmp(&b.listener_id));
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &AudiogramFile { listeners }).map_err(
        |source| Error::Json {
            context: path.display().to_string(),
            source,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (train|dev|test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub wav_path: PathBuf,
    pub listener_id: String,
    /// Listening-test score in [0, 100]; absent only for test rows.
    pub correctness: Option<f64>,
    pub split: Split,
}

impl UtteranceRecord {
    /// Resolves a relative `wav_path` against the manifest's directory.
    pub fn resolve_wav(&self, manifest_dir: &Path) -> PathBuf {
        if self.wav_path.is_absolute() {
            self.wav_path.clone()
        } else {
            manifest_dir.join(&self.wav_path)
        }
    }
}

fn check_score(score: f64) -> std::result::Result<(), String> {
    if !score.is_finite() || !(0.0..=100.0).contains(&score) {
        return Err(format!("score out of range [0,100]: {score}"));
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|source| Error::Csv {
        context: path.display().to_string(),
        source,
    })?;
    if headers.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Row {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        });
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row_err = |msg: String| Error::Row {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let row = row.map_err(|e| row_err(e.to_string()))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(row_err(format!("expected 5 fields, got {}", row.len())));
        }
        let utterance_id = row[0].to_string();
        if utterance_id.is_empty() {
            return Err(row_err("empty utterance_id".into()));
        }
        if row[1].is_empty() {
            return Err(row_err("empty wav_path".into()));
        }
        if row[2].is_empty() {
            return Err(row_err("empty listener_id".into()));
        }
        let split: Split = row[4].parse().map_err(|e: Error| row_err(e.to_string()))?;
        let correctness = if row[3].is_empty() {
            if split != Split::Test {
                return Err(row_err(format!(
                    "missing correctness in a {} row",
                    split.as_str()
                )));
            }
            None
        } else {
            let v: f64 = row[3]
                .parse()
                .map_err(|_| row_err(format!("bad correctness `{}`", &row[3])))?;
            check_score(v).map_err(row_err)?;
            Some(v)
        };
        if !seen.insert(utterance_id.clone()) {
            return Err(row_err(format!("duplicate utterance_id `{utterance_id}`")));
        }
        out.push(UtteranceRecord {
            utterance_id,
            wav_path: PathBuf::from(&row[1]),
            listener_id: row[2].to_string(),
            correctness,
            split,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        let score = r.correctness.map(|c| c.to_string()).unwrap_or_default();
        w.write_record([
            r.utterance_id.as_str(),
            &r.wav_path.to_string_lossy(),
            r.listener_id.as_str(),
            score.as_str(),
            r.split.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Fails with the first listener id that has no profile.
pub fn check_listeners(
    records: &[UtteranceRecord],
    profiles: &HashMap<String, ListenerProfile>,
) -> Result<()> {
    match records.iter().find(|r| !profiles.contains_key(&r.listener_id)) {
        Some(r) => Err(Error::UnknownListener(r.listener_id.clone())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoSignal {
    pub sample_rate_hz: u32,
    pub samples: Vec<f64>,
}

impl MonoSignal {
    pub fn new(sample_rate_hz: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("zero-length audio"));
        }
        Ok(Self {
            sample_rate_hz,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinauralSignal {
    pub sample_rate_hz: u32,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl BinauralSignal {
    pub fn new(sample_rate_hz: u32, left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if left.is_empty() {
            return Err(Error::invalid("zero-length audio"));
        }
        if left.len() != right.len() {
            return Err(Error::invalid(format!(
                "channel length mismatch: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        Ok(Self {
            sample_rate_hz,
            left,
            right,
        })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn channel(&self, ear: Ear) -> MonoSignal {
        let samples = match ear {
            Ear::Left => self.left.clone(),
            Ear::Right => self.right.clone(),
        };
        MonoSignal {
            sample_rate_hz: self.sample_rate_hz,
            samples,
        }
    }
}

/// Splits a dual-channel signal into (left, right); the first WAV channel is
/// the left ear.
pub fn split_channels(sig: &BinauralSignal) -> (MonoSignal, MonoSignal) {
    (sig.channel(Ear::Left), sig.channel(Ear::Right))
}

pub fn merge_channels(left: &MonoSignal, right: &MonoSignal) -> Result<BinauralSignal> {
    if left.sample_rate_hz != right.sample_rate_hz {
        return Err(Error::invalid(format!(
            "sample rate mismatch: {} vs {}",
            left.sample_rate_hz, right.sample_rate_hz
        )));
    }
    BinauralSignal::new(left.sample_rate_hz, left.samples.clone(), right.samples.clone())
}

fn read_wav(path: &Path) -> Result<(hound::WavSpec, Vec<f64>)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || !matches!(spec.bits_per_sample, 16 | 24) {
        return Err(Error::invalid(format!(
            "{}: unsupported encoding ({:?}, {} bit); expected 16- or 24-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let scale = (1u32 << (spec.bits_per_sample - 1)) as f64;
    let samples = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| v as f64 / scale))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{}: zero-length audio", path.display())));
    }
    Ok((spec, samples))
}

/// Loads a 2-channel PCM WAV, scaling integer samples by `2^(bits-1)`.
pub fn load_binaural_wav(path: impl AsRef<Path>) -> Result<BinauralSignal> {
    let path = path.as_ref();
    let (spec, samples) = read_wav(path)?;
    if spec.channels != 2 {
        return Err(Error::invalid(format!(
            "{}: expected 2 channels, got {}",
            path.display(),
            spec.channels
        )));
    }
    let left = samples.iter().step_by(2).copied().collect();
    let right = samples.iter().skip(1).step_by(2).copied().collect();
    BinauralSignal::new(spec.sample_rate, left, right)
}

pub fn load_mono_wav(path: impl AsRef<Path>) -> Result<MonoSignal> {
    let path = path.as_ref();
    let (spec, samples) = read_wav(path)?;
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: expected 1 channel, got {}",
            path.display(),
            spec.channels
        )));
    }
    MonoSignal::new(spec.sample_rate, samples)
}

fn quantize(x: f64, bits: u16) -> i32 {
    let scale = (1i64 << (bits - 1)) as f64;
    (x * scale).round().clamp(-scale, scale - 1.0) as i32
}

fn write_interleaved(
    path: &Path,
    sample_rate: u32,
    channels: u16,
    bits: u16,
    frames: impl Iterator<Item = f64>,
) -> Result<()> {
    if !matches!(bits, 16 | 24) {
        return Err(Error::invalid(format!("unsupported bit depth {bits}")));
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for x in frames {
        w.write_sample(quantize(x, bits)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn write_mono_wav(path: impl AsRef<Path>, sig: &MonoSignal, bits: u16) -> Result<()> {
    write_interleaved(
        path.as_ref(),
        sig.sample_rate_hz,
        1,
        bits,
        sig.samples.iter().copied(),
    )
}

pub fn write_binaural_wav(path: impl AsRef<Path>, sig: &BinauralSignal, bits: u16) -> Result<()> {
    let frames = sig
        .left
        .iter()
        .zip(&sig.right)
        .flat_map(|(&l, &r)| [l, r]);
    write_interleaved(path.as_ref(), sig.sample_rate_hz, 2, bits, frames)
}

// Kaiser-windowed sinc interpolation.
const RESAMPLE_ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 9.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Band-limited resampling. Output length is `round(len * target / source)`;
/// equal rates return the input unchanged.
pub fn resample(sig: &MonoSignal, target_rate_hz: u32) -> Result<MonoSignal> {
    if target_rate_hz == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_rate_hz == sig.sample_rate_hz {
        return Ok(sig.clone());
    }
    let ratio = target_rate_hz as f64 / sig.sample_rate_hz as f64;
    let out_len = ((sig.len() as f64) * ratio).round().max(1.0) as usize;
    // cutoff relative to the source Nyquist frequency
    let cutoff = ratio.min(1.0);
    let half_width = RESAMPLE_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let x = &sig.samples;

    let samples = (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = ((t - half_width).ceil().max(0.0)) as usize;
            let hi = ((t + half_width).floor() as isize).min(x.len() as isize - 1);
            let mut acc = 0.0;
            if hi < lo as isize {
                return 0.0;
            }
            for (n, &xn) in x.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let d = t - n as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                let r = d / half_width;
                let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += xn * cutoff * sinc * win;
            }
            acc
        })
        .collect();
    MonoSignal::new(target_rate_hz, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_text(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn manifest_row_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(
            dir.path(),
            "m.csv",
            "utterance_id,wav_path,listener_id,correctness,split\nu1,a.wav,L01,85.0,train\n",
        );
        let recs = load_manifest(&p).unwrap();
        assert_eq!(
            recs,
            vec![UtteranceRecord {
                utterance_id: "u1".into(),
                wav_path: "a.wav".into(),
                listener_id: "L01".into(),
                correctness: Some(85.0),
                split: Split::Train,
            }]
        );
    }

    #[test]
    fn manifest_rejects_out_of_range_score() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(
            dir.path(),
            "m.csv",
            "utterance_id,wav_path,listener_id,correctness,split\nu1,a.wav,L01,101,train\n",
        );
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("score out of range [0,100]"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn manifest_header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(
            dir.path(),
            "m.csv",
            "utterance_id,wav_path,listener_id,correctness,split\n",
        );
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let head = "utterance_id,wav_path,listener_id,correctness,split\n";
        let dup = write_text(
            dir.path(),
            "dup.csv",
            &format!("{head}u1,a.wav,L,1,train\nu1,b.wav,L,2,train\n"),
        );
        assert!(load_manifest(&dup).unwrap_err().to_string().contains("duplicate"));

        let short = write_text(dir.path(), "short.csv", &format!("{head}u1,a.wav,L\n"));
        let err = load_manifest(&short).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let missing = write_text(dir.path(), "missing.csv", &format!("{head}u1,a.wav,L,,train\n"));
        assert!(load_manifest(&missing).is_err());
        let test_ok = write_text(dir.path(), "test.csv", &format!("{head}u1,a.wav,L,,test\n"));
        assert_eq!(load_manifest(&test_ok).unwrap()[0].correctness, None);

        let bad_head = write_text(dir.path(), "head.csv", "id,wav,listener,score,split\n");
        assert!(load_manifest(&bad_head).is_err());

        assert!(load_manifest(dir.path().join("nope.csv")).is_err());
    }

    #[test]
    fn audiogram_loading() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write_text(
            dir.path(),
            "a.json",
            r#"{"listeners":[{"listener_id":"L01","left":[45,45,35,45,60,65,70,65],"right":[0,0,0,0,0,0,0,0]}]}"#,
        );
        let profiles = load_audiograms(&ok).unwrap();
        assert_eq!(
            profiles["L01"].left.thresholds(),
            &[45.0, 45.0, 35.0, 45.0, 60.0, 65.0, 70.0, 65.0]
        );

        let seven = write_text(
            dir.path(),
            "b.json",
            r#"{"listeners":[{"listener_id":"L01","left":[1,2,3,4,5,6,7],"right":[0,0,0,0,0,0,0,0]}]}"#,
        );
        let err = load_audiograms(&seven).unwrap_err().to_string();
        assert!(err.contains("expected 8 thresholds"), "{err}");

        let low = write_text(
            dir.path(),
            "c.json",
            r#"{"listeners":[{"listener_id":"L01","left":[-20,0,0,0,0,0,0,0],"right":[0,0,0,0,0,0,0,0]}]}"#,
        );
        let err = load_audiograms(&low).unwrap_err().to_string();
        assert!(err.contains("threshold below -10 dB HL"), "{err}");

        let dup = write_text(
            dir.path(),
            "d.json",
            r#"{"listeners":[{"listener_id":"L01","left":[0,0,0,0,0,0,0,0],"right":[0,0,0,0,0,0,0,0]},{"listener_id":"L01","left":[0,0,0,0,0,0,0,0],"right":[0,0,0,0,0,0,0,0]}]}"#,
        );
        assert!(load_audiograms(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn wav_decoding_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 32000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..32000 {
            w.write_sample(if i == 0 { 32767i16 } else { 0 }).unwrap();
            w.write_sample(-100i16).unwrap();
        }
        w.finalize().unwrap();
        let sig = load_binaural_wav(&p).unwrap();
        assert_eq!(sig.sample_rate_hz, 32000);
        assert_eq!(sig.left.len(), 32000);
        assert_eq!(sig.right.len(), 32000);
        assert_eq!(sig.left[0], 32767.0 / 32768.0);
        assert_eq!(sig.right[5], -100.0 / 32768.0);

        let mono = dir.path().join("m.wav");
        write_mono_wav(&mono, &MonoSignal::new(16000, vec![0.1; 10]).unwrap(), 16).unwrap();
        let err = load_binaural_wav(&mono).unwrap_err().to_string();
        assert!(err.contains("expected 2 channels"), "{err}");
    }

    #[test]
    fn split_channels_routes_left_first() {
        let sig = BinauralSignal::new(8000, vec![0.1, 0.2], vec![0.3, 0.4]).unwrap();
        let (l, r) = split_channels(&sig);
        assert_eq!(l.samples, vec![0.1, 0.2]);
        assert_eq!(r.samples, vec![0.3, 0.4]);
        assert_eq!(l.sample_rate_hz, 8000);

        let swapped = BinauralSignal::new(8000, vec![0.3, 0.4], vec![0.1, 0.2]).unwrap();
        let (l2, r2) = split_channels(&swapped);
        assert_eq!((l2, r2), (r, l));
    }

    #[test]
    fn resample_identity_and_length() {
        let sig = MonoSignal::new(32000, (0..32000).map(|i| (i as f64 * 0.01).sin()).collect())
            .unwrap();
        let same = resample(&sig, 32000).unwrap();
        assert_eq!(same, sig);
        let down = resample(&sig, 16000).unwrap();
        assert_eq!(down.len(), 16000);
        assert_eq!(down.sample_rate_hz, 16000);
        assert!(resample(&sig, 0).is_err());
    }
}
