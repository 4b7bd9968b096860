use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BBox, GeoError, LatLon, Polygon, Raster, KM_PER_DEGREE, MAX_ABS_LATITUDE};

/// Intersections smaller than this fraction of a cell's area are treated as
/// shared edges rather than overlap.
const MIN_OVERLAP_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    /// `row_col`, counted from the boundary's south-west corner.
    pub cell_id: String,
    pub row: usize,
    pub col: usize,
    pub bbox: BBox,
    pub population: f64,
    pub predictions: BTreeMap<String, Prediction>,
}

impl GridCell {
    /// Closed ring of the cell outline.
    pub fn polygon(&self) -> Vec<LatLon> {
        self.bbox.ring()
    }

    pub fn center(&self) -> LatLon {
        self.bbox.center()
    }
}

/// Tiles the bounding box of `boundary` with `cell_km` squares and keeps the
/// cells that overlap the boundary with positive area.
///
/// Rows advance north from the minimum latitude in steps of
/// `cell_km / 111.32` degrees; within a row, the longitude step uses the
/// cosine of the row's centre latitude.
pub fn grid_country(boundary: &[Polygon], cell_km: f64) -> Result<Vec<GridCell>, GeoError> {
    if boundary.is_empty() {
        return Err(GeoError::Geometry("boundary has no polygons".into()));
    }
    if !(cell_km.is_finite() && cell_km > 0.0) {
        return Err(GeoError::InvalidBox(format!("cell size {cell_km} km must be positive")));
    }
    let bounds: Vec<BBox> = boundary.iter().map(Polygon::bounds).collect();
    let min_lat = bounds.iter().map(|b| b.min_lat).fold(f64::INFINITY, f64::min);
    let max_lat = bounds.iter().map(|b| b.max_lat).fold(f64::NEG_INFINITY, f64::max);
    let min_lon = bounds.iter().map(|b| b.min_lon).fold(f64::INFINITY, f64::min);
    let max_lon = bounds.iter().map(|b| b.max_lon).fold(f64::NEG_INFINITY, f64::max);

    let dlat = cell_km / KM_PER_DEGREE;
    let rows = steps(max_lat - min_lat, dlat);
    let mut cells = Vec::new();
    for row in 0..rows {
        let lat0 = min_lat + row as f64 * dlat;
        let centre = lat0 + 0.5 * dlat;
        if centre.abs() >= MAX_ABS_LATITUDE {
            return Err(GeoError::PolarDomain(centre));
        }
        let dlon = cell_km / (KM_PER_DEGREE * centre.to_radians().cos());
        let cols = steps(max_lon - min_lon, dlon);
        for col in 0..cols {
            let lon0 = min_lon + col as f64 * dlon;
            let bbox = BBox {
                min_lat: lat0,
                max_lat: min_lat + (row + 1) as f64 * dlat,
                min_lon: lon0,
                max_lon: min_lon + (col + 1) as f64 * dlon,
            };
            let threshold = MIN_OVERLAP_FRACTION * dlat * dlon;
            let overlaps = boundary
                .iter()
                .zip(&bounds)
                .any(|(poly, pb)| pb_touches(pb, &bbox) && poly.clipped_area(&bbox) > threshold);
            if overlaps {
                cells.push(GridCell {
                    cell_id: format!("{row}_{col}"),
                    row,
                    col,
                    bbox,
                    population: 0.0,
                    predictions: BTreeMap::new(),
                });
            }
        }
    }
    Ok(cells)
}

fn pb_touches(a: &BBox, b: &BBox) -> bool {
    a.min_lat <= b.max_lat && b.min_lat <= a.max_lat && a.min_lon <= b.max_lon && b.min_lon <= a.max_lon
}

/// Number of `step`-sized intervals needed to cover `extent`, tolerating
/// rounding when the extent is an exact multiple.
fn steps(extent: f64, step: f64) -> usize {
    let n = (extent / step - 1e-9).ceil();
    (n as usize).max(1)
}

/// Fills `population` with the zonal sum over each cell and keeps cells whose
/// population is at least `threshold`. Cells with no valid pixels count as
/// zero population.
pub fn filter_low_population(cells: Vec<GridCell>, pop_raster: &Raster, threshold: f64) -> Vec<GridCell> {
    cells
        .into_iter()
        .filter_map(|mut cell| {
            cell.population = pop_raster.zonal_sum(&cell.bbox).unwrap_or(0.0);
            (cell.population >= threshold).then_some(cell)
        })
        .collect()
}
