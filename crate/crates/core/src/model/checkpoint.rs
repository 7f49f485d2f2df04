//! Single-file model checkpoints.
//!
//! Layout: one JSON metadata line, then one tensor record per stored
//! tensor in the shared container format (JSON header line followed by
//! little-endian `f32` data). Parameters are kept `f32`-representable, so
//! saving and loading is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::container::{read_record, write_record, TensorHeader};

use super::{Model, ModelConfig, Topology};

pub const CHECKPOINT_FORMAT: &str = "binaural-intel-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub topology: Topology,
    pub seed: u64,
    /// Scores inside the model are the 0–100 interface scale divided by this.
    pub label_scale: f64,
    /// Identifier of the embedding provider the model was trained with.
    pub provider_id: String,
    pub tensors: Vec<TensorShape>,
}

pub const LABEL_SCALE: f64 = 100.0;

pub fn save_checkpoint(model: &Model, provider_id: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensors = model.tensors();
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        topology: model.topology,
        seed: model.seed,
        label_scale: LABEL_SCALE,
        provider_id: provider_id.into(),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorShape {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&meta).map_err(|source| Error::Json {
        context: ctx(),
        source,
    })?;
    w.write_all(line.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    for (name, m) in &tensors {
        let header = TensorHeader::new(m, provider_id, Some(name));
        write_record(&mut w, &header, m).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_meta_from(&mut BufReader::new(file), path)
}

fn read_meta_from(r: &mut impl BufRead, path: &Path) -> Result<CheckpointMeta> {
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let meta: CheckpointMeta = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint format {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    Ok(meta)
}

/// Loads a checkpoint, checking every declared and stored tensor against
/// the shapes implied by its configuration. Returns the model and the
/// provider id it was trained with.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, String)> {
    let path = path.as_ref();
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let meta = read_meta_from(&mut r, path)?;
    let mut model = Model::zeros(meta.config.clone(), meta.topology, meta.seed)
        .map_err(|e| bad(format!("invalid configuration: {e}")))?;
    let expected: Vec<TensorShape> = model
        .tensors()
        .iter()
        .map(|(name, m)| TensorShape {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect();
    if meta.tensors != expected {
        return Err(bad("declared tensor shapes do not match the configuration".into()));
    }
    let mut slots = model.tensors_mut();
    for (shape, slot) in expected.iter().zip(slots.iter_mut()) {
        let (header, m) = read_record(&mut r)
            .map_err(|e| bad(e.to_string()))?
            .ok_or_else(|| bad(format!("missing tensor `{}`", shape.name)))?;
        if header.name.as_deref() != Some(shape.name.as_str()) || m.shape() != (shape.rows, shape.cols) {
            return Err(bad(format!(
                "tensor `{}` has shape {}×{}, expected `{}` {}×{}",
                header.name.unwrap_or_default(),
                m.rows(),
                m.cols(),
                shape.name,
                shape.rows,
                shape.cols
            )));
        }
        if !m.is_finite() {
            return Err(bad(format!("tensor `{}` has non-finite values", shape.name)));
        }
        **slot = m;
    }
    drop(slots);
    if read_record(&mut r).map_err(|e| bad(e.to_string()))?.is_some() {
        return Err(bad("trailing data after the last tensor".into()));
    }
    Ok((model, meta.provider_id))
}
