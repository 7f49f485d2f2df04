//! Composition of the per-utterance stages: channel split, hearing-loss
//! simulation at the recording's own rate, resampling to the feature rate,
//! and feature extraction, with an optional on-disk cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::corpus::{
    check_listeners, load_binaural_wav, resample, BinauralSignal, Ear, ListenerProfile, MonoSignal, UtteranceRecord,
};
use crate::error::{Error, Result};
use crate::features::{BranchInput, EmbeddingKey, EmbeddingProvider, FrontendConfig};
use crate::hearing_loss::{apply_hearing_loss, HearingLossConfig};

pub const FEATURE_EXTENSION: &str = "feat";

/// Everything needed to turn a manifest row into branch inputs.
pub struct FeatureContext<'a> {
    pub manifest_dir: PathBuf,
    pub profiles: &'a HashMap<String, ListenerProfile>,
    pub provider: &'a dyn EmbeddingProvider,
    pub frontend: FrontendConfig,
    pub smearing: bool,
}

/// One ear of a recording as heard by the listener, at the recording's
/// sample rate.
pub fn simulate_ear(sig: &BinauralSignal, ear: Ear, profile: &ListenerProfile, smearing: bool) -> Result<MonoSignal> {
    let mono = sig.channel(ear);
    let cfg = HearingLossConfig::for_rate(mono.sample_rate_hz).with_smearing(smearing);
    apply_hearing_loss(&mono, profile.audiogram(ear), &cfg)
}

impl FeatureContext<'_> {
    pub fn profile(&self, record: &UtteranceRecord) -> Result<&ListenerProfile> {
        self.profiles
            .get(&record.listener_id)
            .ok_or_else(|| Error::UnknownListener(record.listener_id.clone()))
    }

    /// Features for both ears of one utterance, left first.
    pub fn extract(&self, record: &UtteranceRecord) -> Result<[BranchInput; 2]> {
        let profile = self.profile(record)?;
        let wav = record.resolve_wav(&self.manifest_dir);
        let sig = load_binaural_wav(&wav)?;
        let extract_ear = |ear: Ear| -> Result<BranchInput> {
            let processed = simulate_ear(&sig, ear, profile, self.smearing)?;
            let at_rate = resample(&processed, self.frontend.sample_rate_hz)?;
            let key = EmbeddingKey::new(record.utterance_id.clone(), ear);
            BranchInput::extract(&at_rate, &self.frontend, self.provider, &key)
                .map_err(|e| Error::invalid(format!("{}: {e}", record.utterance_id)))
        };
        Ok([extract_ear(Ear::Left)?, extract_ear(Ear::Right)?])
    }

    /// Fails with every missing embedding entry, and with the first unknown
    /// listener, before any work is done.
    pub fn preflight(&self, records: &[UtteranceRecord]) -> Result<()> {
        check_listeners(records, self.profiles)?;
        let keys: Vec<EmbeddingKey> = records
            .iter()
            .flat_map(|r| [Ear::Left, Ear::Right].map(|e| EmbeddingKey::new(r.utterance_id.clone(), e)))
            .collect();
        let missing = self.provider.missing(&keys);
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings(missing));
        }
        Ok(())
    }
}

pub fn feature_path(dir: &Path, utterance_id: &str, ear: Ear) -> PathBuf {
    dir.join(format!("{utterance_id}.{ear}.{FEATURE_EXTENSION}"))
}

fn is_up_to_date(out: &Path, sources: &[&Path]) -> bool {
    let Ok(out_time) = out.metadata().and_then(|m| m.modified()) else {
        return false;
    };
    sources.iter().all(|s| {
        s.metadata()
            .and_then(|m| m.modified())
            .map(|t| t <= out_time)
            .unwrap_or(false)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Writes `<utterance_id>.<ear>.feat` for every record. Files newer than
/// their WAV and the audiogram file are left alone unless `force` is set.
pub fn write_feature_cache(
    ctx: &FeatureContext<'_>,
    records: &[UtteranceRecord],
    audiogram_file: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<CacheSummary> {
    ctx.preflight(records)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut summary = CacheSummary::default();
    for r in records {
        let wav = r.resolve_wav(&ctx.manifest_dir);
        let paths = [Ear::Left, Ear::Right].map(|e| feature_path(out_dir, &r.utterance_id, e));
        let fresh = paths
            .iter()
            .all(|p| is_up_to_date(p, &[wav.as_path(), audiogram_file]));
        if fresh && !force {
            debug!("{}: features up to date", r.utterance_id);
            summary.skipped += 2;
            continue;
        }
        let inputs = ctx.extract(r)?;
        for (p, input) in paths.iter().zip(&inputs) {
            input.save(p)?;
            summary.written += 1;
        }
    }
    info!(
        "features: {} written, {} up to date",
        summary.written, summary.skipped
    );
    Ok(summary)
}

/// Source of branch inputs during training and prediction.
pub enum FeatureSource<'a> {
    /// Extract on demand.
    Compute(FeatureContext<'a>),
    /// Read files written by [`write_feature_cache`].
    Cache(PathBuf),
}

impl FeatureSource<'_> {
    pub fn load(&self, record: &UtteranceRecord) -> Result<[BranchInput; 2]> {
        match self {
            FeatureSource::Compute(ctx) => ctx.extract(record),
            FeatureSource::Cache(dir) => {
                let load = |ear| {
                    let p = feature_path(dir, &record.utterance_id, ear);
                    if !p.is_file() {
                        return Err(Error::invalid(format!(
                            "no cached features for `{}` ({})",
                            record.utterance_id,
                            p.display()
                        )));
                    }
                    BranchInput::load(&p)
                };
                Ok([load(Ear::Left)?, load(Ear::Right)?])
            }
        }
    }

    pub fn preflight(&self, records: &[UtteranceRecord]) -> Result<()> {
        match self {
            FeatureSource::Compute(ctx) => ctx.preflight(records),
            FeatureSource::Cache(_) => Ok(()),
        }
    }

    pub fn load_all(&self, records: &[UtteranceRecord]) -> Result<Vec<[BranchInput; 2]>> {
        self.preflight(records)?;
        records.iter().map(|r| self.load(r)).collect()
    }
}
