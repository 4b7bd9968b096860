//! Synthetic country generator.
//!
//! A latent development field `D` in [0, 1] is made of Gaussian "city"
//! blobs. The mock provider renders tiles whose brightness follows `D`,
//! survey outcomes are drawn from the mean of `D` over each cluster's
//! surrounding box, nightlight is
//! `D` diluted with an independent smooth field, and population comes from
//! its own blobs so that it carries no information about `D`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use demandmap_core::derive_seed;
use demandmap_core::geo::{bbox_around, BBox, LatLon, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::error::{PipelineError, Result};

const KM_PER_DEG: f64 = 111.32;
/// Raster resolution in degrees.
const PIXEL_DEG: f64 = 0.01;
/// Raster margin around the country, in km.
const MARGIN_KM: f64 = 20.0;
/// Population per pixel outside any population blob.
const BASE_POPULATION: f64 = 20.0;
/// Standard deviation of cluster penetration around `0.1 + 0.8 D`.
const PENETRATION_NOISE: f64 = 0.08;
/// Side of the box over which a cluster's development is averaged; matches
/// the default acquisition box.
const CLUSTER_BOX_KM: f64 = 10.0;
/// Grid points per side when averaging `D` over a cluster box.
const AREA_SAMPLES: usize = 9;
/// Spend per capita at `D = 0`; large enough that household draws are
/// rarely clipped at zero.
const SPEND_OFFSET: f64 = 3.0;
/// Standard deviation of cluster spend per capita around `SPEND_OFFSET + 6 D`.
const SPEND_NOISE: f64 = 1.0;
/// Per-household spread of spend per capita around the cluster level.
const HOUSEHOLD_SPEND_NOISE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub center: LatLon,
    pub side_km: f64,
    pub clusters: usize,
    pub households_per_cluster: usize,
    pub cities: usize,
    /// Fraction of clusters placed around cities rather than uniformly.
    pub urban_fraction: f64,
    /// Weight of the independent field in the nightlight raster, relative
    /// to `D`.
    pub nightlight_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            center: LatLon::new(-13.0, 34.0),
            side_km: 200.0,
            clusters: 200,
            households_per_cluster: 24,
            cities: 6,
            urban_fraction: 0.5,
            nightlight_noise: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    lat: f64,
    lon: f64,
    amplitude: f64,
    sigma_km: f64,
}

fn blob_sum(blobs: &[Blob], lat: f64, lon: f64) -> f64 {
    blobs
        .iter()
        .map(|b| {
            let dy = (lat - b.lat) * KM_PER_DEG;
            let dx = (lon - b.lon) * KM_PER_DEG * b.lat.to_radians().cos();
            b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma_km * b.sigma_km)).exp()
        })
        .sum()
}

/// Files written for a synthetic country.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub boundary: PathBuf,
    pub development: PathBuf,
    pub population: PathBuf,
    pub nightlight: PathBuf,
    /// Box of the unpopulated corner.
    pub empty_corner: BBox,
    /// Centres of the development blobs.
    pub cities: Vec<LatLon>,
    pub country: BBox,
}

struct World {
    country: BBox,
    empty: BBox,
    cities: Vec<Blob>,
    people: Vec<Blob>,
    haze: Vec<Blob>,
}

impl World {
    fn new(spec: &SynthSpec) -> Result<Self> {
        let country = bbox_around(spec.center, spec.side_km).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/world"));
        let inner = |rng: &mut ChaCha8Rng, shrink: f64| {
            let dlat = (country.max_lat - country.min_lat) * shrink;
            let dlon = (country.max_lon - country.min_lon) * shrink;
            (
                rng.random_range(country.min_lat + dlat..country.max_lat - dlat),
                rng.random_range(country.min_lon + dlon..country.max_lon - dlon),
            )
        };
        // The north-east corner stays unpopulated and free of cities.
        let lat_span = country.max_lat - country.min_lat;
        let lon_span = country.max_lon - country.min_lon;
        let empty = BBox {
            min_lat: country.max_lat - 0.25 * lat_span,
            max_lat: country.max_lat,
            min_lon: country.max_lon - 0.25 * lon_span,
            max_lon: country.max_lon,
        };
        let mut cities = Vec::new();
        while cities.len() < spec.cities {
            let (lat, lon) = inner(&mut rng, 0.1);
            let near_empty = lat > empty.min_lat - 0.2 && lon > empty.min_lon - 0.2;
            if near_empty {
                continue;
            }
            cities.push(Blob {
                lat,
                lon,
                amplitude: rng.random_range(0.55..0.95),
                sigma_km: rng.random_range(8.0..22.0),
            });
        }
        let field = |rng: &mut ChaCha8Rng, n: usize, amp: (f64, f64), sigma: (f64, f64)| -> Vec<Blob> {
            (0..n)
                .map(|_| {
                    let (lat, lon) = inner(rng, 0.0);
                    Blob {
                        lat,
                        lon,
                        amplitude: rng.random_range(amp.0..amp.1),
                        sigma_km: rng.random_range(sigma.0..sigma.1),
                    }
                })
                .collect()
        };
        let people = field(&mut rng, 10, (100.0, 400.0), (10.0, 35.0));
        let haze = field(&mut rng, 14, (0.3, 1.0), (8.0, 25.0));
        Ok(Self {
            country,
            empty,
            cities,
            people,
            haze,
        })
    }

    fn development(&self, lat: f64, lon: f64) -> f64 {
        (0.03 + blob_sum(&self.cities, lat, lon)).clamp(0.0, 1.0)
    }

    /// Mean of `D` on a regular grid over `b`.
    fn mean_development(&self, b: &BBox) -> f64 {
        let n = AREA_SAMPLES;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let lat = b.min_lat + (i as f64 + 0.5) / n as f64 * (b.max_lat - b.min_lat);
                let lon = b.min_lon + (j as f64 + 0.5) / n as f64 * (b.max_lon - b.min_lon);
                sum += self.development(lat, lon);
            }
        }
        sum / (n * n) as f64
    }

    fn population(&self, lat: f64, lon: f64) -> f64 {
        if self.empty.contains(LatLon::new(lat, lon)) {
            return 0.0;
        }
        BASE_POPULATION + blob_sum(&self.people, lat, lon)
    }

    fn raster(&self, f: impl Fn(f64, f64) -> f64) -> Raster {
        let margin_lat = MARGIN_KM / KM_PER_DEG;
        let margin_lon = margin_lat / self.country.center().lat.to_radians().cos();
        let origin_lat = self.country.max_lat + margin_lat;
        let origin_lon = self.country.min_lon - margin_lon;
        let height = ((self.country.max_lat - self.country.min_lat + 2.0 * margin_lat) / PIXEL_DEG).ceil() as usize;
        let width = ((self.country.max_lon - self.country.min_lon + 2.0 * margin_lon) / PIXEL_DEG).ceil() as usize;
        let mut values = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let lat = origin_lat - (row as f64 + 0.5) * PIXEL_DEG;
                let lon = origin_lon + (col as f64 + 0.5) * PIXEL_DEG;
                values.push(f(lat, lon));
            }
        }
        Raster::new(origin_lon, origin_lat, PIXEL_DEG, PIXEL_DEG, width, height, values, None).expect("consistent raster")
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::io(path, e)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// Writes the survey, boundary and rasters of a synthetic country into
/// `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<SynthFiles> {
    if spec.clusters == 0 || spec.households_per_cluster == 0 {
        return Err(PipelineError::Config("synthetic country needs clusters and households".into()));
    }
    std::fs::create_dir_all(dir.join("survey")).map_err(|e| io(dir, e))?;
    let world = World::new(spec)?;
    let c = world.country;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/survey"));

    // Cluster centroids keep their 10 km box inside the country.
    let pad_lat = 6.0 / KM_PER_DEG;
    let pad_lon = pad_lat / c.center().lat.to_radians().cos();
    let mut coords = String::from("cluster,lat,lon\n");
    let mut households = String::from("hhid,cluster,phone,spend,hhsize\n");
    let penetration_noise = Normal::new(0.0, PENETRATION_NOISE).expect("valid normal");
    let spend_noise = Normal::new(0.0, SPEND_NOISE).expect("valid normal");
    let household_noise = Normal::new(0.0, HOUSEHOLD_SPEND_NOISE).expect("valid normal");
    let mut hh = 0usize;
    for i in 0..spec.clusters {
        let (lat, lon) = if rng.random::<f64>() < spec.urban_fraction && !world.cities.is_empty() {
            let city = world.cities[rng.random_range(0..world.cities.len())];
            let spread = Normal::new(0.0, 1.2 * city.sigma_km / KM_PER_DEG).expect("valid normal");
            let lat = city.lat + spread.sample(&mut rng);
            let lon = city.lon + spread.sample(&mut rng) / c.center().lat.to_radians().cos();
            (
                lat.clamp(c.min_lat + pad_lat, c.max_lat - pad_lat),
                lon.clamp(c.min_lon + pad_lon, c.max_lon - pad_lon),
            )
        } else {
            (
                rng.random_range(c.min_lat + pad_lat..c.max_lat - pad_lat),
                rng.random_range(c.min_lon + pad_lon..c.max_lon - pad_lon),
            )
        };
        let id = format!("s{i:04}");
        let _ = writeln!(coords, "{id},{lat:.6},{lon:.6}");
        let d = world.mean_development(&bbox_around(LatLon::new(lat, lon), CLUSTER_BOX_KM)?);
        // Cluster outcomes are the box-mean field plus homoscedastic noise;
        // households are then laid out to reproduce them.
        let penetration = (0.1 + 0.8 * d + penetration_noise.sample(&mut rng)).clamp(0.0, 1.0);
        let owners = (penetration * spec.households_per_cluster as f64).round() as usize;
        let spend_level = SPEND_OFFSET + 6.0 * d + spend_noise.sample(&mut rng);
        for k in 0..spec.households_per_cluster {
            let size: u32 = rng.random_range(1..=8);
            let per_capita = (spend_level + household_noise.sample(&mut rng)).max(0.0);
            let spend = f64::from(size) * per_capita;
            let _ = writeln!(
                households,
                "h{hh:06},{id},{},{spend:.2},{size}",
                if k < owners { "yes" } else { "no" }
            );
            hh += 1;
        }
    }
    let coords_path = dir.join("survey/coords.csv");
    write(&coords_path, &coords)?;
    let households_path = dir.join("survey/households.csv");
    write(&households_path, &households)?;
    let manifest = dir.join("survey/manifest.txt");
    write(
        &manifest,
        &format!(
            "country=synthland\nhouseholds_csv=households.csv\ncoords_csv=coords.csv\n\
             col.cluster_id=cluster\ncol.has_phone=phone\ncol.spend=spend\ncol.household_size=hhsize\n\
             col.lat=lat\ncol.lon=lon\nexpected_clusters={}\nbbox={},{},{},{}\ncurrency=SYN\n",
            spec.clusters, c.min_lat, c.min_lon, c.max_lat, c.max_lon
        ),
    )?;

    let boundary = dir.join("boundary.geojson");
    let ring: Vec<_> = c.ring().iter().map(|p| json!([p.lon, p.lat])).collect();
    let doc = json!({"type": "FeatureCollection", "features": [{
        "type": "Feature",
        "properties": {"name": "synthland"},
        "geometry": {"type": "Polygon", "coordinates": [ring]},
    }]});
    write(&boundary, &serde_json::to_string(&doc).map_err(|e| io(&boundary, e))?)?;

    let development = dir.join("development.asc");
    world
        .raster(|lat, lon| world.development(lat, lon))
        .write_ascii(&development)
        .map_err(|e| io(&development, e))?;
    let population = dir.join("population.asc");
    world
        .raster(|lat, lon| world.population(lat, lon))
        .write_ascii(&population)
        .map_err(|e| io(&population, e))?;
    let nightlight = dir.join("nightlight.asc");
    world
        .raster(|lat, lon| world.development(lat, lon) + spec.nightlight_noise * blob_sum(&world.haze, lat, lon))
        .write_ascii(&nightlight)
        .map_err(|e| io(&nightlight, e))?;

    Ok(SynthFiles {
        dir: dir.to_path_buf(),
        manifest,
        boundary,
        development,
        population,
        nightlight,
        empty_corner: world.empty,
        cities: world.cities.iter().map(|b| LatLon::new(b.lat, b.lon)).collect(),
        country: c,
    })
}

impl SynthFiles {
    /// A pipeline config for this country using the mock provider. `extra`
    /// lines are appended verbatim and override the defaults.
    pub fn config_text(&self, seed: u64, extra: &[(&str, String)]) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(&self.dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut s = format!(
            "seed={seed}\noutput_dir=out\ncache_dir=cache\nsurvey.synthland={}\nboundary={}\n\
             raster.population={}\nraster.nightlight={}\nprovider.kind=mock\n\
             provider.mock.brightness_raster={}\n",
            rel(&self.manifest),
            rel(&self.boundary),
            rel(&self.population),
            rel(&self.nightlight),
            rel(&self.development),
        );
        for (k, v) in extra {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write_config(&self, name: &str, seed: u64, extra: &[(&str, String)]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write(&path, &self.config_text(seed, extra))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_expected_cluster_and_household_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            clusters: 12,
            households_per_cluster: 5,
            ..SynthSpec::default()
        };
        let files = generate(&spec, dir.path()).unwrap();
        let coords = std::fs::read_to_string(dir.path().join("survey/coords.csv")).unwrap();
        assert_eq!(coords.lines().count(), 13);
        let hh = std::fs::read_to_string(dir.path().join("survey/households.csv")).unwrap();
        assert_eq!(hh.lines().count(), 61);
        let dev = demandmap_core::geo::read_raster(&files.development).unwrap();
        assert!(dev.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let city = files.cities[0];
        assert!(dev.sample(city.lat, city.lon).unwrap() > 0.5);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            clusters: 15,
            ..SynthSpec::default()
        };
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        for f in ["survey/households.csv", "survey/coords.csv", "nightlight.asc"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
