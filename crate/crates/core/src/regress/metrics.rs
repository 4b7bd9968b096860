use std::io::Write;
use std::path::Path;

use super::{Design, RegressError, RidgeEnsemble};
use crate::kv::KvMap;
use crate::labeling::{assign_bin, BinEdges};

/// Squared sample Pearson correlation.
pub fn pearson_r2(observed: &[f64], predicted: &[f64]) -> Result<f64, RegressError> {
    if observed.len() != predicted.len() || observed.len() < 2 {
        return Err(RegressError::UndefinedCorrelation(format!(
            "need two equal-length series of at least 2 values, got {} and {}",
            observed.len(),
            predicted.len()
        )));
    }
    let n = observed.len() as f64;
    let mo = observed.iter().sum::<f64>() / n;
    let mp = predicted.iter().sum::<f64>() / n;
    let (mut sop, mut soo, mut spp) = (0.0, 0.0, 0.0);
    for (o, p) in observed.iter().zip(predicted) {
        let (a, b) = (o - mo, p - mp);
        sop += a * b;
        soo += a * a;
        spp += b * b;
    }
    // relative threshold so rounding noise in a constant series is caught
    let tiny = |ss: f64, m: f64| ss <= (f64::EPSILON * m.abs()).powi(2) * n * 16.0;
    if soo == 0.0 || tiny(soo, mo) {
        return Err(RegressError::UndefinedCorrelation("observed values are constant".into()));
    }
    if spp == 0.0 || tiny(spp, mp) {
        return Err(RegressError::UndefinedCorrelation("predicted values are constant".into()));
    }
    let r2 = sop * sop / (soo * spp);
    Ok(r2.clamp(0.0, 1.0))
}

/// Coefficient of determination `1 − SS_res / SS_tot` (may be negative).
pub fn coefficient_of_determination(observed: &[f64], predicted: &[f64]) -> Result<f64, RegressError> {
    if observed.len() != predicted.len() || observed.is_empty() {
        return Err(RegressError::UndefinedCorrelation("length mismatch".into()));
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(RegressError::UndefinedCorrelation("observed values are constant".into()));
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(o, p)| (o - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fraction of positions where the bins agree.
pub fn bin_accuracy(true_bins: &[usize], predicted_bins: &[usize]) -> Result<f64, RegressError> {
    if true_bins.len() != predicted_bins.len() {
        return Err(RegressError::Length {
            expected: true_bins.len(),
            got: predicted_bins.len(),
        });
    }
    if true_bins.is_empty() {
        return Ok(0.0);
    }
    let hits = true_bins.iter().zip(predicted_bins).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / true_bins.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub id: String,
    pub observed: f64,
    pub predicted: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub pearson_r2: f64,
    pub r2: f64,
    /// Agreement of binned predictions with binned observations.
    pub bin_accuracy: f64,
    pub sigma: f64,
    pub z: f64,
    pub rows: Vec<PointRow>,
}

impl MetricReport {
    /// Fraction of rows whose interval contains the observation.
    pub fn coverage(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let inside = self
            .rows
            .iter()
            .filter(|r| r.observed >= r.lower && r.observed <= r.upper)
            .count();
        inside as f64 / self.rows.len() as f64
    }

    pub fn summary(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("pearson_r2", self.pearson_r2);
        kv.set("r2", self.r2);
        kv.set("bin_accuracy", self.bin_accuracy);
        kv.set("sigma", self.sigma);
        kv.set("z", self.z);
        kv.set("coverage", self.coverage());
        kv.set("n", self.rows.len());
        kv
    }

    /// Writes the per-point table as CSV and the summary as a `key=value`
    /// file next to it.
    pub fn write(&self, csv_path: &Path, summary_path: &Path) -> Result<(), RegressError> {
        let err = |p: &Path, e: String| RegressError::Io {
            path: p.display().to_string(),
            message: e,
        };
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| err(csv_path, e.to_string()))?;
        w.write_record(["id", "observed", "predicted", "lower", "upper"])
            .map_err(|e| err(csv_path, e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.observed.to_string(),
                r.predicted.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
            ])
            .map_err(|e| err(csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| err(csv_path, e.to_string()))?;
        let mut f = std::fs::File::create(summary_path).map_err(|e| err(summary_path, e.to_string()))?;
        f.write_all(self.summary().to_text().as_bytes())
            .map_err(|e| err(summary_path, e.to_string()))
    }
}

/// Scores an ensemble on a design: intervals at `z`, squared Pearson, R² and
/// bin agreement under `edges`.
pub fn evaluate(
    ensemble: &RidgeEnsemble,
    design: &Design,
    edges: &BinEdges,
    z: f64,
) -> Result<MetricReport, RegressError> {
    let mut rows = Vec::with_capacity(design.n());
    for i in 0..design.n() {
        let (lower, predicted, upper) = ensemble.predict_interval(&design.row(i), z)?;
        rows.push(PointRow {
            id: design.ids[i].clone(),
            observed: design.y[i],
            predicted,
            lower,
            upper,
        });
    }
    let observed: Vec<f64> = rows.iter().map(|r| r.observed).collect();
    let predicted: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let true_bins: Vec<usize> = rows.iter().map(|r| assign_bin(&r.id, r.observed, edges).bin).collect();
    let pred_bins: Vec<usize> = rows.iter().map(|r| assign_bin(&r.id, r.predicted, edges).bin).collect();
    Ok(MetricReport {
        pearson_r2: pearson_r2(&observed, &predicted).unwrap_or(0.0),
        r2: coefficient_of_determination(&observed, &predicted)?,
        bin_accuracy: bin_accuracy(&true_bins, &pred_bins)?,
        sigma: ensemble.sigma(),
        z,
        rows,
    })
}
