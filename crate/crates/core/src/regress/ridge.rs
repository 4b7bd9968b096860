use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Design, RegressError, Standardizer};

/// Linear model in standardized feature space. `weights` has one entry per
/// feature followed by the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub standardizer: Standardizer,
}

impl RidgeModel {
    pub fn intercept(&self) -> f64 {
        *self.weights.last().expect("weights include the intercept")
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.weights[..self.weights.len() - 1]
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64, RegressError> {
        let z = self.standardizer.transform_row(x)?;
        Ok(predict_standardized(&self.weights, &z))
    }
}

pub(crate) fn predict_standardized(weights: &[f64], z: &[f64]) -> f64 {
    let d = z.len();
    z.iter().zip(&weights[..d]).map(|(a, b)| a * b).sum::<f64>() + weights[d]
}

/// Fits ridge regression with the design's own standardization.
pub fn ridge_fit(design: &Design, lambda: f64) -> Result<RidgeModel, RegressError> {
    let standardizer = Standardizer::fit(&design.x);
    let rows: Vec<usize> = (0..design.n()).collect();
    ridge_fit_rows(design, &rows, lambda, &standardizer)
}

/// Fits ridge regression on the given rows using a fixed standardization.
pub fn ridge_fit_rows(
    design: &Design,
    rows: &[usize],
    lambda: f64,
    standardizer: &Standardizer,
) -> Result<RidgeModel, RegressError> {
    let z = standardizer.transform(&design.x.select_rows(rows));
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| design.y[i]));
    let mut path = ridge_path(&z, &y, &[lambda])?;
    let weights = path.pop().expect("one lambda")?;
    Ok(RidgeModel {
        weights: weights.iter().copied().collect(),
        lambda,
        standardizer: standardizer.clone(),
    })
}

/// Ridge solutions of `min ‖y − Zw − b‖² + λ‖w‖²` for each λ, sharing one
/// eigendecomposition of the smaller Gram matrix of the row-centred `Z`. The
/// intercept `b` is unpenalized.
///
/// Each entry is `Err(Singular)` only for λ = 0 when the centred design is
/// rank-deficient.
pub fn ridge_path(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    lambdas: &[f64],
) -> Result<Vec<Result<DVector<f64>, RegressError>>, RegressError> {
    if let Some(&bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(RegressError::BadLambda(bad));
    }
    let (n, d) = z.shape();
    if n == 0 || n != y.len() {
        return Err(RegressError::Design(format!("{n} rows for {} targets", y.len())));
    }
    let col_mean = DVector::from_iterator(d, z.column_iter().map(|c| c.sum() / n as f64));
    let y_mean = y.sum() / n as f64;
    let mut zc = z.clone();
    for mut row in zc.row_iter_mut() {
        row -= col_mean.transpose();
    }
    let yc = y.add_scalar(-y_mean);

    // Primal form (ZᵀZ + λI)⁻¹Zᵀy when tall, dual form Zᵀ(ZZᵀ + λI)⁻¹y when wide.
    let primal = n >= d;
    let gram = if primal { zc.transpose() * &zc } else { &zc * zc.transpose() };
    let eig = gram.symmetric_eigen();
    let mu: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let mu_max = mu.iter().copied().fold(0.0, f64::max);
    let tol = mu_max * (n.max(d) as f64) * 1e-12;
    let rank = mu.iter().filter(|&&v| v > tol).count();
    let basis = &eig.eigenvectors;
    let rhs = if primal { zc.transpose() * &yc } else { yc.clone() };
    let proj = basis.transpose() * rhs;

    Ok(lambdas
        .iter()
        .map(|&lambda| {
            if lambda == 0.0 && rank < d {
                return Err(RegressError::Singular);
            }
            let scaled = DVector::from_fn(mu.len(), |i, _| {
                if lambda == 0.0 && mu[i] <= tol {
                    0.0
                } else {
                    proj[i] / (mu[i] + lambda)
                }
            });
            let solved = basis * scaled;
            let w = if primal { solved } else { zc.transpose() * solved };
            let b = y_mean - w.dot(&col_mean);
            let mut out = DVector::zeros(d + 1);
            out.rows_mut(0, d).copy_from(&w);
            out[d] = b;
            Ok(out)
        })
        .collect())
}
