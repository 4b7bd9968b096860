use serde::{Deserialize, Serialize};

use super::{fit_ensemble, Design, RegressError, RidgeEnsemble};
use crate::geo::{bbox_around, Raster};
use crate::labeling::FoldPlan;
use crate::survey::ClusterRecord;
use crate::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineFeature {
    PopulationDensity,
    Nightlight,
}

impl BaselineFeature {
    pub fn label(self) -> &'static str {
        match self {
            BaselineFeature::PopulationDensity => "population_density",
            BaselineFeature::Nightlight => "nightlight",
        }
    }
}

/// One-column design: the raster mean over each cluster's `box_km` box.
pub fn baseline_design(
    clusters: &[ClusterRecord],
    metric: Metric,
    raster: &Raster,
    box_km: f64,
) -> Result<Design, RegressError> {
    let mut rows = Vec::with_capacity(clusters.len());
    for c in clusters {
        let bbox = bbox_around(c.centroid(), box_km)?;
        rows.push(vec![raster.zonal_mean(&bbox)?]);
    }
    let y: Vec<f64> = clusters.iter().map(|c| metric.value(c)).collect();
    Design::from_rows(clusters.iter().map(|c| c.cluster_id.clone()).collect(), &rows, &y)
}

/// Nested cross-validated ensemble on the single raster feature.
pub fn fit_baseline(
    clusters: &[ClusterRecord],
    metric: Metric,
    raster: &Raster,
    box_km: f64,
    plan: &FoldPlan,
    grid: &[f64],
) -> Result<(RidgeEnsemble, Design), RegressError> {
    let design = baseline_design(clusters, metric, raster, box_km)?;
    let ensemble = fit_ensemble(&design, plan, grid)?;
    Ok((ensemble, design))
}
