//! Reconstruction error metrics on normalized images and dB profiles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::FieldImage;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("reference has zero norm")]
    ZeroReference,
    #[error("row {row} outside image of height {height}")]
    Row { row: usize, height: usize },
    #[error("floor_db must be negative and finite, got {0}")]
    Floor(f64),
}

fn check(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    check(pred, target)?;
    let ms = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(ms.sqrt())
}

/// `100 * ||target - pred|| / ||target||`.
pub fn rel_error_percent(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    check(pred, target)?;
    let norm = target.iter().map(|t| t * t).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let diff = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>().sqrt();
    Ok(100.0 * diff / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub mae: f64,
    pub rmse: f64,
    pub rel_error_percent: f64,
}

impl SampleMetrics {
    pub fn compute(index: usize, pred: &FieldImage, target: &FieldImage) -> Result<Self, MetricsError> {
        let (p, t) = (pred.values(), target.values());
        Ok(Self {
            index,
            mae: mae(p, t)?,
            rmse: rmse(p, t)?,
            rel_error_percent: rel_error_percent(p, t)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub max: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut sum, mut max, mut n) = (0.0, f64::NEG_INFINITY, 0usize);
        for v in values {
            sum += v;
            max = max.max(v);
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            mean: sum / n as f64,
            max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMetrics {
    pub row: usize,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub mae: Aggregate,
    pub rmse: Aggregate,
    pub rel_error_percent: Aggregate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lines: Vec<(usize, Vec<LineMetrics>)>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "index,mae,rmse,rel_error_percent";

    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        Self {
            mae: Aggregate::of(samples.iter().map(|s| s.mae)),
            rmse: Aggregate::of(samples.iter().map(|s| s.rmse)),
            rel_error_percent: Aggregate::of(samples.iter().map(|s| s.rel_error_percent)),
            samples,
            lines: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for m in &self.samples {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", m.index, m.mae, m.rmse, m.rel_error_percent));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-row RMSE and MAE between two images.
pub fn line_profile_compare(
    pred: &FieldImage,
    target: &FieldImage,
    rows: &[usize],
) -> Result<Vec<LineMetrics>, MetricsError> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(MetricsError::Length(pred.values().len(), target.values().len()));
    }
    rows.iter()
        .map(|&row| {
            if row >= target.height() {
                return Err(MetricsError::Row {
                    row,
                    height: target.height(),
                });
            }
            Ok(LineMetrics {
                row,
                rmse: rmse(pred.row(row), target.row(row))?,
                mae: mae(pred.row(row), target.row(row))?,
            })
        })
        .collect()
}

/// `"<label> RMSE: 0.007238"` style caption for one line comparison.
pub fn format_line_rmse(label: &str, rmse: f64) -> String {
    format!("{label} RMSE: {rmse:.6}")
}

/// Converts a normalized image row back to dB: `(1 - v) * floor_db`.
pub fn power_profile_db(image: &FieldImage, row: usize, floor_db: f64) -> Result<Vec<f64>, MetricsError> {
    if !(floor_db.is_finite() && floor_db < 0.0) {
        return Err(MetricsError::Floor(floor_db));
    }
    if row >= image.height() {
        return Err(MetricsError::Row {
            row,
            height: image.height(),
        });
    }
    Ok(image.row(row).iter().map(|v| (1.0 - v) * floor_db).collect())
}

/// Least-squares constant shift aligning `curve` to `reference`, with the
/// RMSE remaining after the shift.
pub fn offset_align(curve: &[f64], reference: &[f64]) -> Result<(f64, f64), MetricsError> {
    check(curve, reference)?;
    let offset = reference.iter().zip(curve).map(|(r, c)| r - c).sum::<f64>() / curve.len() as f64;
    let shifted: Vec<f64> = curve.iter().map(|c| c + offset).collect();
    Ok((offset, rmse(&shifted, reference)?))
}

/// CSV with columns `range_m,pred_db,target_db`.
pub fn profile_csv(range_m: &[f64], pred_db: &[f64], target_db: &[f64]) -> String {
    let mut s = String::from("range_m,pred_db,target_db\n");
    for ((r, p), t) in range_m.iter().zip(pred_db).zip(target_db) {
        s.push_str(&format!("{r},{p:e},{t:e}\n"));
    }
    s
}
