//! Ridge regression ensembles over per-cluster feature vectors.
//!
//! Every ensemble member shares one feature standardization fitted on the
//! full training design, so averaging member predictions is exactly the
//! prediction of the model with averaged weights.

mod baseline;
mod ensemble;
mod metrics;
mod ridge;

pub use baseline::{baseline_design, fit_baseline, BaselineFeature};
pub use ensemble::{
    fit_ensemble, inner_select_lambda, LambdaSelection, NoiseEstimate, RidgeEnsemble, ENSEMBLE_FORMAT_VERSION,
};
pub use metrics::{bin_accuracy, coefficient_of_determination, evaluate, pearson_r2, MetricReport, PointRow};
pub use ridge::{ridge_fit, ridge_fit_rows, ridge_path, RidgeModel};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Interval multiplier for a two-sided 95% normal interval.
pub const DEFAULT_Z: f64 = 1.96;

#[derive(Debug, thiserror::Error)]
pub enum RegressError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("lambda = 0 on a rank-deficient design; use lambda > 0")]
    Singular,
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("feature vector has length {got}, model expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("fold plan: {0}")]
    Plan(String),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error(transparent)]
    Geo(#[from] crate::geo::GeoError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Default grid: 17 values log-spaced over `[1e-3, 1e5]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..17).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

/// Feature matrix (rows = clusters or cells), targets and row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub ids: Vec<String>,
}

impl Design {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, ids: Vec<String>) -> Result<Self, RegressError> {
        if x.nrows() != y.len() || ids.len() != y.len() {
            return Err(RegressError::Design(format!(
                "{} feature rows, {} targets, {} ids",
                x.nrows(),
                y.len(),
                ids.len()
            )));
        }
        if y.len() < 2 {
            return Err(RegressError::Design("at least two rows required".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(RegressError::Design("non-finite entry".into()));
        }
        Ok(Self { x, y, ids })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>], y: &[f64]) -> Result<Self, RegressError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(RegressError::Design("rows of unequal length".into()));
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(x, DVector::from_column_slice(y), ids)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Design, RegressError> {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let ids = rows.iter().map(|&i| self.ids[i].clone()).collect();
        Design::new(x, y, ids)
    }
}

/// Per-column affine standardization. Constant columns keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            scale.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>, RegressError> {
        if x.len() != self.dim() {
            return Err(RegressError::Length {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 17);
        assert!((g[0] - 1e-3).abs() < 1e-15);
        assert!((g[16] - 1e5).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn design_validation() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(Design::new(x, DVector::from_vec(vec![1.0, 2.0]), vec!["a".into(), "b".into()]).is_err());
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(Design::new(x, DVector::from_vec(vec![1.0]), vec!["a".into()]).is_err());
    }

    #[test]
    fn standardizer_constant_column() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = Standardizer::fit(&x);
        assert_eq!(s.scale[1], 1.0);
        let z = s.transform(&x);
        assert!((z.column(0).sum()).abs() < 1e-15);
        assert!((z.column(0).norm_squared() / 3.0 - 1.0).abs() < 1e-12);
    }
}
