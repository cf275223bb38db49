//! Feature scalers fitted on pooled training data and applied unchanged to
//! held-out splits.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    /// Per-feature (x - mean) / stddev; zero-variance features map to 0.
    Standard,
    /// Per-feature x / max|x| onto [-1, 1]; no mean shift.
    MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: ScalerKind,
    /// Per-feature offset subtracted before scaling (zero for minmax).
    pub offset: Vec<f64>,
    /// Per-feature multiplier; 0 marks a degenerate feature mapped to 0.
    pub scale: Vec<f64>,
}

/// Fits a scaler on the rows of `data` (samples x features).
pub fn fit_scaler(kind: ScalerKind, data: ArrayView2<f64>) -> Result<Scaler> {
    let (rows, cols) = data.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::contract("fit_scaler requires a non-empty matrix"));
    }
    match kind {
        ScalerKind::Standard => {
            if rows < 2 {
                return Err(Error::contract(
                    "standard scaler requires at least 2 training rows",
                ));
            }
            let n = rows as f64;
            let mut offset = Vec::with_capacity(cols);
            let mut scale = Vec::with_capacity(cols);
            for col in data.columns() {
                let mean = col.sum() / n;
                let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                offset.push(mean);
                scale.push(if std > 0.0 { 1.0 / std } else { 0.0 });
            }
            Ok(Scaler {
                kind,
                offset,
                scale,
            })
        }
        ScalerKind::MinMax => {
            let mut scale = Vec::with_capacity(cols);
            for col in data.columns() {
                let absmax = col.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
                scale.push(if absmax > 0.0 { 1.0 / absmax } else { 0.0 });
            }
            Ok(Scaler {
                kind,
                offset: vec![0.0; cols],
                scale,
            })
        }
    }
}

/// Applies the fitted transform row-wise.
pub fn apply_scaler(scaler: &Scaler, data: ArrayView2<f64>) -> Result<Array2<f64>> {
    if data.ncols() != scaler.scale.len() {
        return Err(Error::contract(format!(
            "scaler fitted on {} features, got {}",
            scaler.scale.len(),
            data.ncols()
        )));
    }
    let mut out = data.to_owned();
    for mut row in out.rows_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - scaler.offset[j]) * scaler.scale[j];
        }
    }
    Ok(out)
}
