//! Frame-score fusion, pooling and the combined frame/utterance objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchTag {
    Left,
    Right,
    Fused,
}

/// Per-frame predictions in normalized units (targets lie in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub scores: Vec<f64>,
    pub branch: BranchTag,
}

impl FrameScores {
    pub fn new(scores: Vec<f64>, branch: BranchTag) -> Self {
        Self { scores, branch }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceScore {
    pub value: f64,
}

impl UtteranceScore {
    /// Interface value on the 0–100 scale.
    pub fn percent(&self) -> f64 {
        100.0 * self.value.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_left: f64,
    pub w_right: f64,
    pub bias: f64,
}

impl FusionWeights {
    pub const AVERAGE: FusionWeights = FusionWeights {
        w_left: 0.5,
        w_right: 0.5,
        bias: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Linear,
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "average" => Ok(Self::Average),
            other => Err(Error::invalid(format!(
                "unknown fusion mode `{other}` (expected linear or average)"
            ))),
        }
    }
}

/// Weights of the frame-level terms relative to the utterance term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_m: f64,
    pub alpha_l: f64,
    pub alpha_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_m: 1.0,
            alpha_l: 1.0,
            alpha_r: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_m", self.alpha_m), ("alpha_l", self.alpha_l), ("alpha_r", self.alpha_r)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn for_branch(&self, branch: BranchTag) -> f64 {
        match branch {
            BranchTag::Left => self.alpha_l,
            BranchTag::Right => self.alpha_r,
            BranchTag::Fused => self.alpha_m,
        }
    }
}

/// `m_f = w_left·l_f + w_right·r_f + bias` per frame.
pub fn fuse_linear(left: &FrameScores, right: &FrameScores, fw: &FusionWeights) -> Result<FrameScores> {
    if left.is_empty() && right.is_empty() {
        return Err(Error::invalid("cannot fuse two empty frame sequences"));
    }
    if left.len() != right.len() {
        return Err(Error::invalid(format!(
            "branch frame counts differ: {} vs {}",
            left.len(),
            right.len()
        )));
    }
    let scores = left
        .scores
        .iter()
        .zip(&right.scores)
        .map(|(l, r)| fw.w_left * l + fw.w_right * r + fw.bias)
        .collect();
    Ok(FrameScores::new(scores, BranchTag::Fused))
}

/// Elementwise mean of the two branches, evaluated through the same
/// arithmetic as [`fuse_linear`] so the two agree bit for bit.
pub fn fuse_average(left: &FrameScores, right: &FrameScores) -> Result<FrameScores> {
    fuse_linear(left, right, &FusionWeights::AVERAGE)
}

pub(crate) fn valid_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

fn check_mask(frames: &FrameScores, mask: &[bool]) -> Result<usize> {
    if frames.len() != mask.len() {
        return Err(Error::invalid(format!(
            "mask length {} does not match {} frame scores",
            mask.len(),
            frames.len()
        )));
    }
    match valid_count(mask) {
        0 => Err(Error::invalid("no valid frames")),
        n => Ok(n),
    }
}

/// Mean over valid frames.
pub fn global_average_pool(frames: &FrameScores, mask: &[bool]) -> Result<UtteranceScore> {
    let n = check_mask(frames, mask)?;
    let sum: f64 = frames
        .scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| s)
        .sum();
    Ok(UtteranceScore { value: sum / n as f64 })
}

/// Per-utterance objective: `(I − Î)²` plus, for every supplied frame
/// sequence, `α/F · Σ_f (I − s_f)²` over the `F` valid frames, where `α` is
/// chosen by the sequence's branch tag.
pub fn compute_loss(
    truth: f64,
    predicted: f64,
    frames: &[&FrameScores],
    lw: &LossWeights,
    mask: &[bool],
) -> Result<f64> {
    let mut loss = (truth - predicted).powi(2);
    for fs in frames {
        let n = check_mask(fs, mask)?;
        let sq: f64 = fs
            .scores
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| (truth - s).powi(2))
            .sum();
        loss += lw.for_branch(fs.branch) / n as f64 * sq;
    }
    Ok(loss)
}
