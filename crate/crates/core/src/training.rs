//! Training loop, batching and inference over manifests.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Ear, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::evaluation::{rmse, PredictionRecord, PredictionRow};
use crate::features::BranchInput;
use crate::model::checkpoint::LABEL_SCALE;
use crate::model::{
    save_checkpoint, Architecture, FusionMode, FusionWeights, LossWeights, Model, ModelConfig, ModelInput, Topology,
};
use crate::pipeline::FeatureSource;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "adaptive-moment")]
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub fusion_mode: FusionMode,
    pub loss_weights: LossWeights,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Epochs without dev improvement before stopping; 0 disables early
    /// stopping.
    pub early_stop_patience: usize,
    /// Share of training rows held out for model selection when the
    /// manifest has no dev rows.
    pub dev_fraction: f64,
    /// Spectral smearing in the hearing-loss simulation.
    pub smearing_enabled: bool,
    pub model: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fusion_mode: FusionMode::Linear,
            loss_weights: LossWeights::default(),
            batch_size: 4,
            max_epochs: 200,
            learning_rate: 3e-4,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            early_stop_patience: 30,
            dev_fraction: 0.2,
            smearing_enabled: false,
            model: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be a finite non-negative number"));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::invalid("dev_fraction must lie strictly between 0 and 1"));
        }
        self.model.validate()
    }
}

/// One shuffled batch: which examples, padded length and per-item masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub frames: usize,
    pub masks: Vec<Vec<bool>>,
}

/// Shuffles examples deterministically for `(seed, epoch)` and groups them
/// into batches padded to the longest member.
pub fn make_batches(frame_counts: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if frame_counts.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..frame_counts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let frames = idx.iter().map(|&i| frame_counts[i]).max().unwrap_or(0);
            let masks = idx
                .iter()
                .map(|&i| (0..frames).map(|t| t < frame_counts[i]).collect())
                .collect();
            Batch {
                indices: idx.to_vec(),
                frames,
                masks,
            }
        })
        .collect())
}

/// A prepared utterance with its normalized label.
#[derive(Debug, Clone)]
pub struct Example {
    pub utterance_id: String,
    pub input: ModelInput,
    pub label: Option<f64>,
}

impl Example {
    fn label(&self) -> Result<f64> {
        self.label
            .ok_or_else(|| Error::invalid(format!("utterance `{}` has no score", self.utterance_id)))
    }
}

pub fn prepare_examples(
    model: &Model,
    records: &[UtteranceRecord],
    inputs: &[[BranchInput; 2]],
) -> Result<Vec<Example>> {
    records
        .iter()
        .zip(inputs)
        .map(|(r, [l, rt])| {
            let input = model
                .prepare_pair(l, rt)
                .map_err(|e| Error::invalid(format!("{}: {e}", r.utterance_id)))?;
            Ok(Example {
                utterance_id: r.utterance_id.clone(),
                input,
                label: r.correctness.map(|c| c / LABEL_SCALE),
            })
        })
        .collect()
}

/// Mean per-utterance objective over `examples`, evaluated in batches.
pub fn mean_objective(model: &Model, examples: &[Example], batch_size: usize, lw: &LossWeights) -> Result<f64> {
    let counts: Vec<usize> = examples.iter().map(|e| e.input.num_frames()).collect();
    let mut total = 0.0;
    for batch in make_batches(&counts, batch_size, 0, 0)? {
        for (&i, mask) in batch.indices.iter().zip(&batch.masks) {
            let ex = &examples[i];
            total += model.loss(&ex.input.padded(batch.frames), mask, ex.label()?, lw)?;
        }
    }
    Ok(total / examples.len() as f64)
}

/// Interface-scale RMSE of the model's predictions on labelled examples.
pub fn examples_rmse(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut recs = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = model.predict(&ex.input)?;
        recs.push(PredictionRecord::new(
            ex.utterance_id.clone(),
            p.score(),
            ex.label()? * LABEL_SCALE,
        )?);
    }
    rmse(&recs)
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Matrix>,
        v: Vec<Matrix>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::AdaptiveMoment => {
                let zeros: Vec<Matrix> = model
                    .params()
                    .iter()
                    .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                    .collect();
                Optimizer::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    /// Applies one update; parameters are rounded to `f32` precision
    /// afterwards so checkpoints store them exactly.
    pub fn step(&mut self, model: &mut Model, grad: &Model, lr: f64) {
        let grads: Vec<&Matrix> = grad.params().into_iter().map(|(_, g)| g).collect();
        let params = model.params_mut();
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                    p.round_to_f32();
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut());
                    for (((w, &d), mi), vi) in iter {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * d;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + *eps);
                    }
                    p.round_to_f32();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_rmse: f64,
    pub dev_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub topology: Topology,
    pub seed: u64,
    pub num_train: usize,
    pub num_dev: usize,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_rmse: f64,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    /// Learned fusion weights of the best model; absent for single-branch
    /// and averaging models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_weights: Option<FusionWeights>,
}

impl TrainReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Result of a training run: the report and the model after the last
/// epoch (the saved checkpoint holds the best-on-dev model).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Model,
    pub last: Model,
}

/// Splits labelled rows into train and dev. Manifest dev rows are used when
/// present; otherwise a seeded `dev_fraction` of the train rows is held out.
pub fn split_train_dev(records: &[UtteranceRecord], dev_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let train: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    let dev: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Dev).collect();
    if train.is_empty() {
        return Err(Error::invalid("manifest has no training rows"));
    }
    if !dev.is_empty() {
        return Ok((train, dev));
    }
    if train.len() < 2 {
        return Err(Error::invalid("need at least two training rows to hold out a dev split"));
    }
    let mut shuffled = train;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((shuffled.len() as f64 * dev_fraction).ceil() as usize).clamp(1, shuffled.len() - 1);
    let dev = shuffled.split_off(shuffled.len() - n_dev);
    shuffled.sort_unstable();
    let mut dev = dev;
    dev.sort_unstable();
    Ok((shuffled, dev))
}

/// Trains a model of the given topology and saves the best-on-dev
/// checkpoint to `checkpoint`.
pub fn train_model(
    cfg: &TrainConfig,
    topology: Topology,
    records: &[UtteranceRecord],
    source: &FeatureSource<'_>,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, dev_idx) = split_train_dev(records, cfg.dev_fraction, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let (train_recs, dev_recs) = (pick(&train_idx), pick(&dev_idx));
    for r in train_recs.iter().chain(&dev_recs) {
        if r.correctness.is_none() {
            return Err(Error::invalid(format!("utterance `{}` has no score", r.utterance_id)));
        }
    }
    let mut all = train_recs.clone();
    all.extend(dev_recs.iter().cloned());
    let inputs = source.load_all(&all)?;
    let provider_id = inputs[0][0].provider_id.clone();
    let ssl_dim = inputs[0][0].ssl.cols();
    if let Some((r, _)) = all.iter().zip(&inputs).find(|(_, i)| i.iter().any(|b| b.ssl.cols() != ssl_dim)) {
        return Err(Error::invalid(format!(
            "{}: embedding dimension differs from {ssl_dim}",
            r.utterance_id
        )));
    }

    let config = ModelConfig::new(cfg.model.clone(), ssl_dim)?;
    let mut model = Model::new(config, topology, cfg.seed)?;
    let examples = prepare_examples(&model, &all, &inputs)?;
    let (train, dev) = examples.split_at(train_recs.len());
    model.fit_normalization(&train.iter().map(|e| &e.input).collect::<Vec<_>>());
    let labels: Vec<f64> = train.iter().map(Example::label).collect::<Result<_>>()?;
    model.set_output_bias(labels.iter().sum::<f64>() / labels.len() as f64);

    info!(
        "training {:?}: {} train / {} dev utterances, {} parameters",
        topology,
        train.len(),
        dev.len(),
        model.params().iter().map(|(_, m)| m.data().len()).sum::<usize>()
    );
    let counts: Vec<usize> = train.iter().map(|e| e.input.num_frames()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, &model);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for batch in make_batches(&counts, cfg.batch_size, cfg.seed, epoch)? {
            let scale = 1.0 / batch.indices.len() as f64;
            let mut grad = model.zeros_like();
            for (&i, mask) in batch.indices.iter().zip(&batch.masks) {
                let ex = &train[i];
                let padded = ex.input.padded(batch.frames);
                let loss = model.accumulate_gradient(&padded, mask, labels[i], &cfg.loss_weights, scale, &mut grad)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        msg: format!("non-finite loss on `{}`", ex.utterance_id),
                    });
                }
                loss_sum += loss;
            }
            if !grad.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            optimizer.step(&mut model, &grad, cfg.learning_rate);
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: "non-finite parameters after update".into(),
            });
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_rmse: examples_rmse(&model, train)?,
            dev_rmse: examples_rmse(&model, dev)?,
        };
        info!(
            "epoch {epoch}: loss {:.5} train rmse {:.3} dev rmse {:.3}",
            stats.train_loss, stats.train_rmse, stats.dev_rmse
        );
        let improved = best.as_ref().is_none_or(|(_, b, _)| stats.dev_rmse < *b);
        epochs.push(stats);
        if improved {
            best = Some((epoch, epochs[epoch - 1].dev_rmse, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                info!("early stop after {epoch} epochs");
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_dev_rmse, best_model) = best.expect("at least one epoch");
    save_checkpoint(&best_model, &provider_id, checkpoint)?;
    let fusion_weights = matches!(topology, Topology::Binaural { fusion: FusionMode::Linear })
        .then(|| best_model.fusion_weights());
    let report = TrainReport {
        topology,
        seed: cfg.seed,
        num_train: train.len(),
        num_dev: dev.len(),
        epochs,
        best_epoch,
        best_dev_rmse,
        stopped_early,
        checkpoint: checkpoint.to_path_buf(),
        fusion_weights,
    };
    Ok(TrainOutcome {
        report,
        best: best_model,
        last: model,
    })
}

/// Two-branch training with the configured fusion.
pub fn train(
    cfg: &TrainConfig,
    records: &[UtteranceRecord],
    source: &FeatureSource<'_>,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    let topology = Topology::Binaural {
        fusion: cfg.fusion_mode,
    };
    train_model(cfg, topology, records, source, checkpoint)
}

/// Single-ear training: one branch and pooling only.
pub fn train_single_branch(
    cfg: &TrainConfig,
    records: &[UtteranceRecord],
    source: &FeatureSource<'_>,
    ear: Ear,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    train_model(cfg, Topology::Monaural { ear }, records, source, checkpoint)
}

/// Interface-scale predictions for every record, in manifest order.
/// `provider_id` is the embedding provider the model was trained with.
pub fn predict_records(
    model: &Model,
    provider_id: &str,
    records: &[UtteranceRecord],
    source: &FeatureSource<'_>,
) -> Result<Vec<PredictionRow>> {
    source.preflight(records)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let [l, rt] = source.load(r)?;
        if l.provider_id != provider_id {
            return Err(Error::Checkpoint(format!(
                "model was trained on `{provider_id}` embeddings, features come from `{}`",
                l.provider_id
            )));
        }
        if l.ssl.cols() != model.config.ssl_dim {
            return Err(Error::Checkpoint(format!(
                "model expects {}-dimensional embeddings, provider gives {}",
                model.config.ssl_dim,
                l.ssl.cols()
            )));
        }
        let input = model
            .prepare_pair(&l, &rt)
            .map_err(|e| Error::invalid(format!("{}: {e}", r.utterance_id)))?;
        let p = model.predict(&input)?;
        if !p.utterance.value.is_finite() {
            warn!("{}: non-finite prediction", r.utterance_id);
        }
        rows.push(PredictionRow {
            utterance_id: r.utterance_id.clone(),
            predicted: p.score(),
            truth: r.correctness,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn batch_sizes_and_masks() {
        let b = make_batches(&[5, 5, 5, 5, 5], 2, 1, 0).unwrap();
        assert_eq!(b.iter().map(|x| x.indices.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);

        assert_eq!(make_batches(&[3, 4, 5], 2, 9, 3).unwrap(), make_batches(&[3, 4, 5], 2, 9, 3).unwrap());

        let b = make_batches(&[10, 7], 2, 0, 0).unwrap();
        assert_eq!(b[0].frames, 10);
        let pos = b[0].indices.iter().position(|&i| i == 1).unwrap();
        assert_eq!(b[0].masks[pos].iter().filter(|&&m| !m).count(), 3);
        assert!(make_batches(&[], 2, 0, 0).is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_toml_str(
            r#"
            fusion_mode = "average"
            optimizer = "sgd"
            batch_size = 3
            [loss_weights]
            alpha_m = 0.5
            alpha_l = 1.0
            alpha_r = 1.0
            [model]
            d_model = 32
            "#,
        )
        .unwrap();
        assert_eq!(cfg.fusion_mode, FusionMode::Average);
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.lstm_hidden, 128);
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("dev_fraction = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("optimizer = \"adam\"").is_err());
    }

    fn rec(id: &str, split: Split) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: id.into(),
            wav_path: PathBuf::from(format!("{id}.wav")),
            listener_id: "L".into(),
            correctness: Some(50.0),
            split,
        }
    }

    #[test]
    fn dev_split_resolution() {
        let recs: Vec<_> = (0..10).map(|i| rec(&format!("u{i}"), Split::Train)).collect();
        let (tr, dv) = split_train_dev(&recs, 0.2, 3).unwrap();
        assert_eq!((tr.len(), dv.len()), (8, 2));
        assert_eq!(split_train_dev(&recs, 0.2, 3).unwrap(), (tr, dv));

        let mut with_dev = recs.clone();
        with_dev.push(rec("d", Split::Dev));
        with_dev.push(rec("t", Split::Test));
        let (tr, dv) = split_train_dev(&with_dev, 0.2, 3).unwrap();
        assert_eq!((tr.len(), dv), (10, vec![10]));
    }
}
