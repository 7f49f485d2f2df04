//! Prediction files and the RMSE / STDERR / LCC metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scored prediction on the 0–100 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    utterance_id: String,
    predicted: f64,
    truth: f64,
}

fn check_score(what: &str, v: f64) -> Result<()> {
    if !v.is_finite() || !(0.0..=100.0).contains(&v) {
        return Err(Error::invalid(format!("{what} score out of range [0,100]: {v}")));
    }
    Ok(())
}

impl PredictionRecord {
    pub fn new(utterance_id: impl Into<String>, predicted: f64, truth: f64) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if utterance_id.is_empty() {
            return Err(Error::invalid("empty utterance id"));
        }
        check_score("predicted", predicted)?;
        check_score("truth", truth)?;
        Ok(Self {
            utterance_id,
            predicted,
            truth,
        })
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }

    pub fn predicted(&self) -> f64 {
        self.predicted
    }

    pub fn truth(&self) -> f64 {
        self.truth
    }
}

/// One row of a predictions file. Test rows may have no truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub utterance_id: String,
    pub predicted: f64,
    pub truth: Option<f64>,
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            context: path.display().to_string(),
            source,
        })?;
    let mut rows = Vec::new();
    for (i, row) in r.deserialize::<PredictionRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Row {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let bad = |msg: String| Error::Row {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if row.utterance_id.is_empty() {
            return Err(bad("empty utterance id".into()));
        }
        check_score("predicted", row.predicted).map_err(|e| bad(e.to_string()))?;
        if let Some(t) = row.truth {
            check_score("truth", t).map_err(|e| bad(e.to_string()))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Rows with a truth value as records, plus the number of rows skipped for
/// lacking one.
pub fn scored_records(rows: &[PredictionRow]) -> Result<(Vec<PredictionRecord>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in rows {
        match r.truth {
            Some(t) => out.push(PredictionRecord::new(r.utterance_id.clone(), r.predicted, t)?),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

fn non_empty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no scored predictions"));
    }
    Ok(())
}

pub fn rmse(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    let mse = records.iter().map(|r| (r.predicted - r.truth).powi(2)).sum::<f64>() / records.len() as f64;
    Ok(mse.sqrt())
}

/// Standard error of the RMSE as `rmse / √n`.
pub fn stderr_from_rmse(rmse: f64, n: usize) -> f64 {
    rmse / (n as f64).sqrt()
}

pub fn stderr_metric(records: &[PredictionRecord]) -> Result<f64> {
    Ok(stderr_from_rmse(rmse(records)?, records.len()))
}

/// Pearson correlation between predictions and truth. Undefined (an error)
/// for fewer than two records or a constant side.
pub fn lcc(records: &[PredictionRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::invalid("correlation needs at least two records"));
    }
    let n = records.len() as f64;
    let mp = records.iter().map(|r| r.predicted).sum::<f64>() / n;
    let mt = records.iter().map(|r| r.truth).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for r in records {
        let (dx, dy) = (r.predicted - mp, r.truth - mt);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for constant scores"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub stderr: f64,
    /// `None` when the correlation is undefined.
    pub lcc: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

pub fn evaluate(records: &[PredictionRecord]) -> Result<MetricReport> {
    let rmse = rmse(records)?;
    Ok(MetricReport {
        rmse,
        stderr: stderr_from_rmse(rmse, records.len()),
        lcc: lcc(records).ok(),
        n: records.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct ScatterRow {
    utterance_id: String,
    truth: f64,
    predicted: f64,
}

/// Writes `utterance_id,truth,predicted` in input order.
pub fn export_scatter(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    non_empty(records)?;
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(ScatterRow {
            utterance_id: r.utterance_id.clone(),
            truth: r.truth,
            predicted: r.predicted,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scatter(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        context: path.display().to_string(),
        source,
    })?;
    r.deserialize::<ScatterRow>()
        .map(|row| {
            let row = row.map_err(|source| Error::Csv {
                context: path.display().to_string(),
                source,
            })?;
            PredictionRecord::new(row.utterance_id, row.predicted, row.truth)
        })
        .collect()
}
