use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::metrics::pearson_r2;
use super::ridge::{predict_standardized, ridge_fit_rows, ridge_path, RidgeModel};
use super::{Design, RegressError, Standardizer};
use crate::labeling::{FoldMode, FoldPlan};

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Mean held-out score per grid entry, in grid order.
    pub mean_scores: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Picks the λ with the best mean squared-Pearson score over the inner
/// folds: for each inner fold, fit on the others and score on it. Degenerate
/// held-out folds (constant targets or predictions) score 0. Exact ties go to
/// the larger λ.
///
/// `inner_folds` holds row indices into `design`.
pub fn inner_select_lambda(
    design: &Design,
    standardizer: &Standardizer,
    inner_folds: &[Vec<usize>],
    grid: &[f64],
) -> Result<LambdaSelection, RegressError> {
    if grid.is_empty() {
        return Err(RegressError::EmptyGrid);
    }
    if inner_folds.len() < 2 || inner_folds.iter().any(Vec::is_empty) {
        return Err(RegressError::Plan(format!(
            "inner cross-validation needs at least two non-empty folds, got {:?}",
            inner_folds.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let z_all = standardizer.transform(&design.x);
    let mut totals = vec![0.0; grid.len()];
    let mut invalid = vec![false; grid.len()];
    let mut warnings = Vec::new();
    for (j, held) in inner_folds.iter().enumerate() {
        let fit_rows: Vec<usize> = inner_folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let z = z_all.select_rows(&fit_rows);
        let y = DVector::from_iterator(fit_rows.len(), fit_rows.iter().map(|&i| design.y[i]));
        let path = ridge_path(&z, &y, grid)?;
        let observed: Vec<f64> = held.iter().map(|&i| design.y[i]).collect();
        for (g, weights) in path.into_iter().enumerate() {
            let weights = match weights {
                Ok(w) => w,
                Err(_) => {
                    if !invalid[g] {
                        warnings.push(format!("lambda {} is singular on inner folds; skipped", grid[g]));
                    }
                    invalid[g] = true;
                    continue;
                }
            };
            let w = weights.as_slice();
            let predicted: Vec<f64> = held
                .iter()
                .map(|&i| {
                    let row: Vec<f64> = z_all.row(i).iter().copied().collect();
                    predict_standardized(w, &row)
                })
                .collect();
            let score = match pearson_r2(&observed, &predicted) {
                Ok(s) => s,
                Err(e) => {
                    warnings.push(format!("inner fold {j}, lambda {}: {e}; scored 0", grid[g]));
                    0.0
                }
            };
            totals[g] += score;
        }
    }
    let k = inner_folds.len() as f64;
    let mean_scores: Vec<f64> = totals
        .iter()
        .zip(&invalid)
        .map(|(t, bad)| if *bad { f64::NEG_INFINITY } else { t / k })
        .collect();
    let mut best: Option<usize> = None;
    for (g, &score) in mean_scores.iter().enumerate() {
        if invalid[g] {
            continue;
        }
        best = match best {
            None => Some(g),
            Some(b) if score > mean_scores[b] || (score == mean_scores[b] && grid[g] > grid[b]) => Some(g),
            keep => keep,
        };
    }
    let best = best.ok_or(RegressError::Singular)?;
    Ok(LambdaSelection {
        lambda: grid[best],
        mean_scores,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Squared residual norm of the averaged-weight model on the training design.
    pub alpha_res: f64,
    pub n: usize,
    pub sigma: f64,
}

impl NoiseEstimate {
    pub fn from_residuals(residuals: impl IntoIterator<Item = f64>) -> Self {
        let mut alpha_res = 0.0;
        let mut n = 0;
        for r in residuals {
            alpha_res += r * r;
            n += 1;
        }
        let sigma = if n > 0 { (alpha_res / n as f64).sqrt() } else { 0.0 };
        Self { alpha_res, n, sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeEnsemble {
    pub format_version: u32,
    pub members: Vec<RidgeModel>,
    /// Element-wise mean of member weights (intercept last).
    pub mean_weights: Vec<f64>,
    pub standardizer: Standardizer,
    pub noise: NoiseEstimate,
    pub fold_mode: FoldMode,
    pub fold_plan_checksum: String,
    pub warnings: Vec<String>,
}

impl RidgeEnsemble {
    /// Assembles an ensemble from members sharing `standardizer` and fills
    /// the noise estimate from `design`.
    pub fn from_members(
        members: Vec<RidgeModel>,
        standardizer: Standardizer,
        design: &Design,
        plan: &FoldPlan,
    ) -> Result<Self, RegressError> {
        if members.is_empty() {
            return Err(RegressError::Plan("ensemble without members".into()));
        }
        let width = members[0].weights.len();
        let mut mean_weights = vec![0.0; width];
        for m in &members {
            for (acc, w) in mean_weights.iter_mut().zip(&m.weights) {
                *acc += w;
            }
        }
        let k = members.len() as f64;
        mean_weights.iter_mut().for_each(|w| *w /= k);
        let mut ensemble = Self {
            format_version: ENSEMBLE_FORMAT_VERSION,
            members,
            mean_weights,
            standardizer,
            noise: NoiseEstimate::from_residuals(std::iter::empty()),
            fold_mode: plan.mode,
            fold_plan_checksum: plan.checksum(),
            warnings: Vec::new(),
        };
        let residuals = (0..design.n())
            .map(|i| Ok(design.y[i] - ensemble.predict_mean_weights(&design.row(i))?))
            .collect::<Result<Vec<f64>, RegressError>>()?;
        ensemble.noise = NoiseEstimate::from_residuals(residuals);
        Ok(ensemble)
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn sigma(&self) -> f64 {
        self.noise.sigma
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.lambda).collect()
    }

    /// Equal-vote prediction: the mean of member predictions.
    pub fn predict(&self, x: &[f64]) -> Result<f64, RegressError> {
        let mut sum = 0.0;
        for m in &self.members {
            sum += m.predict(x)?;
        }
        Ok(sum / self.members.len() as f64)
    }

    /// Prediction of the single model with averaged weights.
    pub fn predict_mean_weights(&self, x: &[f64]) -> Result<f64, RegressError> {
        let z = self.standardizer.transform_row(x)?;
        Ok(predict_standardized(&self.mean_weights, &z))
    }

    /// `(value − zσ, value, value + zσ)`.
    pub fn predict_interval(&self, x: &[f64], z: f64) -> Result<(f64, f64, f64), RegressError> {
        let value = self.predict(x)?;
        let half = z * self.noise.sigma;
        Ok((value - half, value, value + half))
    }

    pub fn save(&self, path: &Path) -> Result<(), RegressError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| RegressError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| RegressError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, RegressError> {
        let err = |message: String| RegressError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let e: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if e.format_version != ENSEMBLE_FORMAT_VERSION {
            return Err(err(format!("unsupported ensemble format {}", e.format_version)));
        }
        Ok(e)
    }
}

/// Nested cross-validated ensemble: for each outer fold, λ is chosen by an
/// inner cross-validation over the remaining folds and a member is fitted on
/// those folds with it.
pub fn fit_ensemble(design: &Design, plan: &FoldPlan, grid: &[f64]) -> Result<RidgeEnsemble, RegressError> {
    let fold_of = plan.fold_of();
    let k = plan.k();
    if k < 3 {
        return Err(RegressError::Plan(format!("need at least 3 folds, got {k}")));
    }
    let mut rows_by_fold = vec![Vec::new(); k];
    for (row, id) in design.ids.iter().enumerate() {
        let f = fold_of
            .get(id.as_str())
            .ok_or_else(|| RegressError::Plan(format!("row {id} is not in the fold plan")))?;
        rows_by_fold[*f].push(row);
    }
    if let Some(empty) = rows_by_fold.iter().position(Vec::is_empty) {
        return Err(RegressError::Plan(format!("fold {empty} has no design rows")));
    }
    let standardizer = Standardizer::fit(&design.x);
    let mut members = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for outer in 0..k {
        let inner: Vec<Vec<usize>> = rows_by_fold
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != outer)
            .map(|(_, rows)| rows.clone())
            .collect();
        let selection = inner_select_lambda(design, &standardizer, &inner, grid)?;
        warnings.extend(selection.warnings.iter().map(|w| format!("outer fold {outer}: {w}")));
        let fit_rows: Vec<usize> = inner.concat();
        members.push(ridge_fit_rows(design, &fit_rows, selection.lambda, &standardizer)?);
    }
    let mut ensemble = RidgeEnsemble::from_members(members, standardizer, design, plan)?;
    ensemble.warnings = warnings;
    Ok(ensemble)
}
