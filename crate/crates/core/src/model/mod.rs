//! The two-branch intelligibility predictor.
//!
//! Each ear's features pass through an independent branch producing frame
//! scores; the branches are fused per frame and averaged over valid frames.
//! Training minimizes an utterance-level squared error plus weighted
//! frame-level squared errors for the fused and per-ear frame scores.

pub mod branch;
pub mod checkpoint;
pub mod fusion;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Ear;
use crate::error::{Error, Result};
use crate::features::{BranchInput, FrontendConfig};
use crate::tensor::Matrix;

pub use branch::{branch_forward, BranchNet, BranchWeights, InputNorm, PreparedInput};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use fusion::{
    compute_loss, fuse_average, fuse_linear, global_average_pool, BranchTag, FrameScores, FusionMode,
    FusionWeights, LossWeights, UtteranceScore,
};
pub use layers::multiplicative_attention;

use fusion::valid_count;

/// Layer sizes of a branch. Every field has a default, so a partial TOML
/// table is accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub window: usize,
    pub hop: usize,
    pub cnn_channels: Vec<usize>,
    pub freq_stride: usize,
    pub lfb_filters: usize,
    pub lfb_kernel: usize,
    pub d_model: usize,
    pub lstm_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            window: 512,
            hop: 256,
            cnn_channels: vec![16, 32, 64, 128],
            freq_stride: 3,
            lfb_filters: 64,
            lfb_kernel: 251,
            d_model: 256,
            lstm_hidden: 128,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.window < 64 || !self.window.is_power_of_two() {
            return Err(Error::invalid(format!("window must be a power of two >= 64, got {}", self.window)));
        }
        if self.hop == 0 || self.hop > self.window {
            return Err(Error::invalid(format!("hop must be in 1..={}, got {}", self.window, self.hop)));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::invalid("cnn_channels must be a non-empty list of positive sizes"));
        }
        if self.freq_stride == 0 {
            return Err(Error::invalid("freq_stride must be positive"));
        }
        if self.lfb_filters == 0 || self.lfb_kernel.is_multiple_of(2) {
            return Err(Error::invalid("filter bank needs at least one filter and an odd kernel length"));
        }
        if self.d_model == 0 || self.lstm_hidden == 0 {
            return Err(Error::invalid("d_model and lstm_hidden must be positive"));
        }
        Ok(())
    }
}

/// Full shape description of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub sample_rate_hz: u32,
    pub ssl_dim: usize,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, ssl_dim: usize) -> Result<Self> {
        architecture.validate()?;
        if ssl_dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(Self {
            architecture,
            sample_rate_hz: 16_000,
            ssl_dim,
        })
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig {
            sample_rate_hz: self.sample_rate_hz,
            window: self.architecture.window,
            hop: self.architecture.hop,
        }
    }

    pub fn spectral_bins(&self) -> usize {
        self.architecture.window / 2 + 1
    }

    pub fn cnn_output_dim(&self) -> usize {
        let a = &self.architecture;
        let mut bins = self.spectral_bins();
        for _ in &a.cnn_channels {
            bins = layers::conv_out_bins(bins, a.freq_stride);
        }
        bins * a.cnn_channels.last().copied().unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.cnn_output_dim() + self.architecture.lfb_filters + self.ssl_dim
    }
}

/// Which branches exist and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Topology {
    Binaural { fusion: FusionMode },
    Monaural { ear: Ear },
}

impl Topology {
    pub fn has(&self, ear: Ear) -> bool {
        match self {
            Topology::Binaural { .. } => true,
            Topology::Monaural { ear: e } => *e == ear,
        }
    }
}

/// Branch inputs for one utterance. Only the ears used by the topology need
/// to be present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub left: Option<PreparedInput>,
    pub right: Option<PreparedInput>,
}

impl ModelInput {
    pub fn get(&self, ear: Ear) -> Option<&PreparedInput> {
        match ear {
            Ear::Left => self.left.as_ref(),
            Ear::Right => self.right.as_ref(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.left
            .as_ref()
            .or(self.right.as_ref())
            .map_or(0, PreparedInput::num_frames)
    }

    pub fn padded(&self, frames: usize) -> Self {
        Self {
            left: self.left.as_ref().map(|p| p.padded(frames)),
            right: self.right.as_ref().map(|p| p.padded(frames)),
        }
    }
}

/// Utterance-level prediction with the frame scores that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub utterance: UtteranceScore,
    pub left: Option<FrameScores>,
    pub right: Option<FrameScores>,
    pub fused: Option<FrameScores>,
}

impl Prediction {
    /// Interface score on the 0–100 scale.
    pub fn score(&self) -> f64 {
        self.utterance.percent()
    }

    /// The frame scores that are pooled into the utterance score.
    pub fn pooled_frames(&self) -> &FrameScores {
        self.fused
            .as_ref()
            .or(self.left.as_ref())
            .or(self.right.as_ref())
            .expect("prediction has at least one frame sequence")
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: Topology,
    pub seed: u64,
    pub left: Option<BranchWeights>,
    pub right: Option<BranchWeights>,
    /// `1 × 3`: `w_left, w_right, bias`. Trained only under linear fusion.
    pub fusion: Matrix,
    net: BranchNet,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.topology == other.topology
            && self.seed == other.seed
            && self.left == other.left
            && self.right == other.right
            && self.fusion == other.fusion
    }
}

impl Model {
    /// Model with every tensor zero (normalizers at identity), used as a
    /// shape skeleton and gradient accumulator.
    pub fn zeros(config: ModelConfig, topology: Topology, seed: u64) -> Result<Self> {
        config.architecture.validate()?;
        let branch = |ear| topology.has(ear).then(|| BranchWeights::zeros(&config));
        Ok(Self {
            left: branch(Ear::Left),
            right: branch(Ear::Right),
            fusion: Matrix::zeros(1, 3),
            net: BranchNet::new(&config),
            config,
            topology,
            seed,
        })
    }

    pub fn new(config: ModelConfig, topology: Topology, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config, topology, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if m.left.is_some() {
            m.left = Some(BranchWeights::init(&m.config, &mut rng));
        }
        if m.right.is_some() {
            m.right = Some(BranchWeights::init(&m.config, &mut rng));
        }
        let fw = FusionWeights::AVERAGE;
        m.fusion = Matrix::from_vec(1, 3, vec![fw.w_left, fw.w_right, fw.bias]);
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone(), self.topology, self.seed).expect("validated config")
    }

    pub fn branch(&self, ear: Ear) -> Option<&BranchWeights> {
        match ear {
            Ear::Left => self.left.as_ref(),
            Ear::Right => self.right.as_ref(),
        }
    }

    fn branch_mut(&mut self, ear: Ear) -> Option<&mut BranchWeights> {
        match ear {
            Ear::Left => self.left.as_mut(),
            Ear::Right => self.right.as_mut(),
        }
    }

    pub fn ears(&self) -> Vec<Ear> {
        [Ear::Left, Ear::Right]
            .into_iter()
            .filter(|&e| self.topology.has(e))
            .collect()
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        match self.topology {
            Topology::Binaural {
                fusion: FusionMode::Linear,
            } => FusionWeights {
                w_left: self.fusion.get(0, 0),
                w_right: self.fusion.get(0, 1),
                bias: self.fusion.get(0, 2),
            },
            _ => FusionWeights::AVERAGE,
        }
    }

    fn fusion_trainable(&self) -> bool {
        matches!(
            self.topology,
            Topology::Binaural {
                fusion: FusionMode::Linear
            }
        )
    }

    /// Named trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for ear in self.ears() {
            let b = self.branch(ear).expect("branch exists for topology");
            for (name, m) in b.params() {
                out.push((format!("{ear}.{name}"), m));
            }
        }
        if self.fusion_trainable() {
            out.push(("fusion".into(), &self.fusion));
        }
        out
    }

    /// Mutable trainable tensors in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let trainable = self.fusion_trainable();
        let mut out = Vec::new();
        if let Some(b) = self.left.as_mut() {
            out.extend(b.params_mut());
        }
        if let Some(b) = self.right.as_mut() {
            out.extend(b.params_mut());
        }
        if trainable {
            out.push(&mut self.fusion);
        }
        out
    }

    /// Every stored tensor: trainable parameters, fitted normalizers and
    /// the fusion weights.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for ear in self.ears() {
            let b = self.branch(ear).expect("branch exists for topology");
            for (name, m) in b.params().into_iter().chain(b.buffers()) {
                out.push((format!("{ear}.{name}"), m));
            }
        }
        out.push(("fusion".into(), &self.fusion));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for b in [self.left.as_mut(), self.right.as_mut()].into_iter().flatten() {
            let (params, buffers) = b.split_mut();
            out.extend(params);
            out.extend(buffers);
        }
        out.push(&mut self.fusion);
        out
    }

    pub fn prepare(&self, input: &BranchInput) -> Result<PreparedInput> {
        PreparedInput::new(input, &self.config, self.net.frontend())
    }

    /// Prepares the ears this model uses.
    pub fn prepare_pair(&self, left: &BranchInput, right: &BranchInput) -> Result<ModelInput> {
        Ok(ModelInput {
            left: if self.topology.has(Ear::Left) { Some(self.prepare(left)?) } else { None },
            right: if self.topology.has(Ear::Right) { Some(self.prepare(right)?) } else { None },
        })
    }

    /// Fits input standardization from the valid frames of training inputs.
    /// The filter-bank statistics use the current cutoffs.
    pub fn fit_normalization(&mut self, inputs: &[&ModelInput]) {
        for ear in self.ears() {
            let prepared: Vec<&PreparedInput> = inputs.iter().filter_map(|i| i.get(ear)).collect();
            let frontend = self.net.frontend().clone();
            let b = self.branch_mut(ear).expect("branch exists for topology");
            let bins = b.norm_spectral.dim();
            b.norm_spectral = InputNorm::fit(bins, prepared.iter().flat_map(|p| rows(&p.spectral)));
            let ssl = b.norm_ssl.dim();
            b.norm_ssl = InputNorm::fit(ssl, prepared.iter().flat_map(|p| rows(&p.ssl)));
            let logs: Vec<Matrix> = prepared.iter().map(|p| b.lfb_log_energies(p, &frontend)).collect();
            let nf = b.norm_lfb.dim();
            b.norm_lfb = InputNorm::fit(nf, logs.iter().flat_map(rows));
        }
    }

    /// Sets every frame head's bias so that initial predictions sit at
    /// `value` (normalized units).
    pub fn set_output_bias(&mut self, value: f64) {
        let v = value as f32 as f64;
        for b in [self.left.as_mut(), self.right.as_mut()].into_iter().flatten() {
            b.head_b.set(0, 0, v);
        }
    }

    fn check_input(&self, input: &ModelInput, mask: &[bool]) -> Result<usize> {
        for ear in self.ears() {
            let p = input
                .get(ear)
                .ok_or_else(|| Error::invalid(format!("missing {ear} branch input")))?;
            if p.num_frames() != mask.len() {
                return Err(Error::invalid(format!(
                    "{ear} input has {} frames but the mask has {}",
                    p.num_frames(),
                    mask.len()
                )));
            }
        }
        match valid_count(mask) {
            0 => Err(Error::invalid("no valid frames")),
            n => Ok(n),
        }
    }

    fn forward_cached(
        &self,
        input: &ModelInput,
        mask: &[bool],
    ) -> Result<(Prediction, Vec<(Ear, branch::BranchCache)>)> {
        self.check_input(input, mask)?;
        let mut caches = Vec::new();
        let mut pred = Prediction {
            utterance: UtteranceScore { value: 0.0 },
            left: None,
            right: None,
            fused: None,
        };
        for ear in self.ears() {
            let b = self.branch(ear).expect("branch exists for topology");
            let p = input.get(ear).expect("checked");
            let (mut scores, cache) = self.net.forward(p, b, mask)?;
            caches.push((ear, cache));
            match ear {
                Ear::Left => pred.left = Some(scores),
                Ear::Right => {
                    scores.branch = BranchTag::Right;
                    pred.right = Some(scores);
                }
            }
        }
        if let Topology::Binaural { fusion } = self.topology {
            let (l, r) = (pred.left.as_ref().expect("left"), pred.right.as_ref().expect("right"));
            let mut m = match fusion {
                FusionMode::Linear => fuse_linear(l, r, &self.fusion_weights())?,
                FusionMode::Average => fuse_average(l, r)?,
            };
            for (s, &v) in m.scores.iter_mut().zip(mask) {
                if !v {
                    *s = 0.0;
                }
            }
            pred.fused = Some(m);
        }
        pred.utterance = global_average_pool(pred.pooled_frames(), mask)?;
        Ok((pred, caches))
    }

    /// Frame and utterance scores for one utterance. Frames with a false
    /// mask entry are ignored and score 0.
    pub fn forward(&self, input: &ModelInput, mask: &[bool]) -> Result<Prediction> {
        self.forward_cached(input, mask).map(|(p, _)| p)
    }

    /// Prediction for an unpadded utterance.
    pub fn predict(&self, input: &ModelInput) -> Result<Prediction> {
        let mask = vec![true; input.num_frames()];
        self.forward(input, &mask)
    }

    fn frame_sets(pred: &Prediction) -> Vec<&FrameScores> {
        [pred.fused.as_ref(), pred.left.as_ref(), pred.right.as_ref()]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Per-utterance objective for a normalized label.
    pub fn loss(&self, input: &ModelInput, mask: &[bool], label: f64, lw: &LossWeights) -> Result<f64> {
        let pred = self.forward(input, mask)?;
        compute_loss(label, pred.utterance.value, &Self::frame_sets(&pred), lw, mask)
    }

    /// Per-utterance objective; adds `scale · ∂loss/∂θ` into `grad`.
    pub fn accumulate_gradient(
        &self,
        input: &ModelInput,
        mask: &[bool],
        label: f64,
        lw: &LossWeights,
        scale: f64,
        grad: &mut Model,
    ) -> Result<f64> {
        let (pred, caches) = self.forward_cached(input, mask)?;
        let loss = compute_loss(label, pred.utterance.value, &Self::frame_sets(&pred), lw, mask)?;
        let n = valid_count(mask) as f64;
        let d_pooled = -2.0 * (label - pred.utterance.value);

        let frame_grad = |fs: &FrameScores, pooled: bool| -> Vec<f64> {
            let alpha = lw.for_branch(fs.branch);
            fs.scores
                .iter()
                .zip(mask)
                .map(|(&s, &v)| {
                    if !v {
                        return 0.0;
                    }
                    let mut g = -2.0 * alpha * (label - s) / n;
                    if pooled {
                        g += d_pooled / n;
                    }
                    scale * g
                })
                .collect()
        };

        let mut d_left = pred.left.as_ref().map(|l| frame_grad(l, pred.fused.is_none()));
        let mut d_right = pred.right.as_ref().map(|r| frame_grad(r, pred.fused.is_none() && pred.left.is_none()));
        if let Some(m) = &pred.fused {
            let dm = frame_grad(m, true);
            let fw = self.fusion_weights();
            let (l, r) = (pred.left.as_ref().expect("left"), pred.right.as_ref().expect("right"));
            if self.fusion_trainable() {
                let g = grad.fusion.data_mut();
                g[0] += dm.iter().zip(&l.scores).map(|(a, b)| a * b).sum::<f64>();
                g[1] += dm.iter().zip(&r.scores).map(|(a, b)| a * b).sum::<f64>();
                g[2] += dm.iter().sum::<f64>();
            }
            for (dl, d) in d_left.as_mut().expect("left").iter_mut().zip(&dm) {
                *dl += fw.w_left * d;
            }
            for (dr, d) in d_right.as_mut().expect("right").iter_mut().zip(&dm) {
                *dr += fw.w_right * d;
            }
        }

        for (ear, cache) in &caches {
            let d = match ear {
                Ear::Left => d_left.as_ref(),
                Ear::Right => d_right.as_ref(),
            }
            .expect("scores exist for every cached branch");
            let w = self.branch(*ear).expect("branch");
            let g = grad.branch_mut(*ear).expect("gradient has the same topology");
            self.net.backward(input.get(*ear).expect("checked"), w, cache, d, g);
        }
        Ok(loss)
    }

    /// Loss and gradient of one utterance.
    pub fn loss_and_grad(
        &self,
        input: &ModelInput,
        mask: &[bool],
        label: f64,
        lw: &LossWeights,
    ) -> Result<(f64, Model)> {
        let mut grad = self.zeros_like();
        let loss = self.accumulate_gradient(input, mask, label, lw, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, m)| m.is_finite())
    }
}

fn rows(m: &Matrix) -> impl Iterator<Item = &[f64]> {
    (0..m.rows()).map(move |r| m.row(r))
}
