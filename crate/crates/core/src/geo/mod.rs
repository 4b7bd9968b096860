//! Geodesic bounding boxes, point sampling, country gridding and zonal
//! raster statistics.
//!
//! Distances are converted to degrees with a local equirectangular
//! approximation: one degree of latitude is [`KM_PER_DEGREE`] kilometres and
//! one degree of longitude shrinks by `cos(lat)`.

mod geojson;
mod grid;
mod polygon;
mod raster;

pub use geojson::{cells_to_geojson, read_boundary, read_boundary_str};
pub use grid::{filter_low_population, grid_country, GridCell, Prediction};
pub use polygon::{point_in_polygon, Polygon};
pub use raster::{read_raster, Raster};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Kilometres per degree of latitude (and of longitude at the equator).
pub const KM_PER_DEGREE: f64 = 111.32;

/// Latitudes at or beyond this magnitude are rejected by [`bbox_around`].
pub const MAX_ABS_LATITUDE: f64 = 89.0;

#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {0} is outside the supported range (|lat| < 89)")]
    PolarDomain(f64),
    #[error("invalid coordinate ({lat}, {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("no valid raster pixels inside the zone")]
    EmptyZone,
    #[error("raster: {0}")]
    Raster(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn validated(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if lat.is_finite()
            && lon.is_finite()
            && (-90.0..=90.0).contains(&lat)
            && (-180.0..=180.0).contains(&lon)
        {
            Ok(Self { lat, lon })
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self, GeoError> {
        let finite = [min_lat, max_lat, min_lon, max_lon].iter().all(|v| v.is_finite());
        if !finite || min_lat >= max_lat || min_lon >= max_lon {
            return Err(GeoError::InvalidBox(format!(
                "lat [{min_lat}, {max_lat}], lon [{min_lon}, {max_lon}]"
            )));
        }
        if min_lat < -90.0 || max_lat > 90.0 {
            return Err(GeoError::InvalidBox(format!(
                "latitude bounds [{min_lat}, {max_lat}] leave [-90, 90]"
            )));
        }
        Ok(Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        })
    }

    /// Parses `min_lat,min_lon,max_lat,max_lon`.
    pub fn parse(text: &str) -> Result<Self, GeoError> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeoError::InvalidBox(format!("{text:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c, d] => Self::new(*a, *c, *b, *d),
            _ => Err(GeoError::InvalidBox(format!(
                "{text:?}: expected min_lat,min_lon,max_lat,max_lon"
            ))),
        }
    }

    pub fn contains(&self, p: LatLon) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }

    pub fn center(&self) -> LatLon {
        LatLon::new(
            0.5 * (self.min_lat + self.max_lat),
            0.5 * (self.min_lon + self.max_lon),
        )
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_lat < other.max_lat
            && other.min_lat < self.max_lat
            && self.min_lon < other.max_lon
            && other.min_lon < self.max_lon
    }

    /// Closed ring (first vertex repeated) in counter-clockwise order.
    pub fn ring(&self) -> Vec<LatLon> {
        vec![
            LatLon::new(self.min_lat, self.min_lon),
            LatLon::new(self.min_lat, self.max_lon),
            LatLon::new(self.max_lat, self.max_lon),
            LatLon::new(self.max_lat, self.min_lon),
            LatLon::new(self.min_lat, self.min_lon),
        ]
    }
}

/// Half-extents in degrees of a `side_km` square centred at latitude `lat`.
pub fn half_extent_degrees(lat: f64, side_km: f64) -> (f64, f64) {
    let half = side_km / 2.0;
    let dlat = half / KM_PER_DEGREE;
    let dlon = half / (KM_PER_DEGREE * lat.to_radians().cos());
    (dlat, dlon)
}

/// Square box of `side_km` kilometres centred on `centroid`.
pub fn bbox_around(centroid: LatLon, side_km: f64) -> Result<BBox, GeoError> {
    if !centroid.lat.is_finite() || !centroid.lon.is_finite() {
        return Err(GeoError::InvalidCoordinate {
            lat: centroid.lat,
            lon: centroid.lon,
        });
    }
    if centroid.lat.abs() >= MAX_ABS_LATITUDE {
        return Err(GeoError::PolarDomain(centroid.lat));
    }
    if !(side_km.is_finite() && side_km > 0.0) {
        return Err(GeoError::InvalidBox(format!("side {side_km} km must be positive")));
    }
    let (dlat, dlon) = half_extent_degrees(centroid.lat, side_km);
    BBox::new(
        centroid.lat - dlat,
        centroid.lat + dlat,
        centroid.lon - dlon,
        centroid.lon + dlon,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub owner_id: String,
    pub index: usize,
    pub lat: f64,
    pub lon: f64,
}

impl SamplePoint {
    pub fn location(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }

    /// `owner_id:index`, the identifier tiles carry for this point.
    pub fn key(&self) -> String {
        format!("{}:{}", self.owner_id, self.index)
    }
}

/// `n` points drawn i.i.d. uniformly (in degree space) over `bbox`.
pub fn sample_points(bbox: &BBox, owner_id: &str, n: usize, seed: u64) -> Vec<SamplePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|index| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            SamplePoint {
                owner_id: owner_id.to_string(),
                index,
                lat: bbox.min_lat + u * (bbox.max_lat - bbox.min_lat),
                lon: bbox.min_lon + v * (bbox.max_lon - bbox.min_lon),
            }
        })
        .collect()
}
