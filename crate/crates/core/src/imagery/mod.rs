//! Provider-agnostic scene search, tile download and on-disk caching.
//!
//! A [`TileProvider`] answers scene searches and serves point-centred RGB
//! tiles. Acquisition filters scenes by cloud cover and date, takes the most
//! recent admissible scene per sample point and writes every tile through a
//! content-addressed [`TileCache`].

mod cache;
mod http;
mod mock;

pub use cache::{selection_key, tile_key, TileCache};
pub use http::{HttpTileProvider, HttpTileProviderConfig};
pub use mock::{default_scene, render_synthetic_tile, MockProvider};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::{point_in_polygon, BBox, LatLon, SamplePoint};

pub const TILE_SIZE: usize = 256;
pub const TILE_CHANNELS: usize = 3;
pub const DEFAULT_ZOOM: u32 = 14;
pub const DEFAULT_MAX_CLOUD: f64 = 0.05;
pub const DEFAULT_MAX_INFLIGHT: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("credentials rejected: {0}")]
    Credential(String),
    #[error("provider: {0}")]
    Other(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ImageryError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("no admissible scene")]
    NoScene,
    #[error("point ({lat}, {lon}) is outside the scene footprint of {scene_id}")]
    Coverage { scene_id: String, lat: f64, lon: f64 },
    #[error("tile integrity: {0}")]
    Integrity(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QueryArea {
    Point(LatLon),
    Box(BBox),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneQuery {
    pub area: QueryArea,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub max_cloud_fraction: f64,
    pub zoom: u32,
}

impl SceneQuery {
    /// Point query over 2014-01-01..2016-12-31 with a 5% cloud limit at zoom 14.
    pub fn at(p: LatLon) -> Self {
        let (start, end) = default_date_range();
        Self {
            area: QueryArea::Point(p),
            start,
            end,
            max_cloud_fraction: DEFAULT_MAX_CLOUD,
            zoom: DEFAULT_ZOOM,
        }
    }

    pub fn with_area(&self, area: QueryArea) -> Self {
        Self { area, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ImageryError> {
        if self.start > self.end {
            return Err(ImageryError::Query(format!("start {} after end {}", self.start, self.end)));
        }
        if !(0.0..=1.0).contains(&self.max_cloud_fraction) {
            return Err(ImageryError::Query(format!(
                "max cloud fraction {} outside [0, 1]",
                self.max_cloud_fraction
            )));
        }
        Ok(())
    }
}

pub fn default_date_range() -> (DateTime<Utc>, DateTime<Utc>) {
    (
        Utc.with_ymd_and_hms(2014, 1, 1, 0, 0, 0).unwrap(),
        Utc.with_ymd_and_hms(2016, 12, 31, 23, 59, 59).unwrap(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub timestamp: DateTime<Utc>,
    pub cloud_fraction: f64,
    /// Footprint ring; an empty ring means global coverage.
    #[serde(default)]
    pub footprint: Vec<LatLon>,
}

impl SceneMeta {
    pub fn covers(&self, p: LatLon) -> bool {
        self.footprint.is_empty() || point_in_polygon(&self.footprint, p)
    }
}

/// Decoded provider payload prior to shape checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    /// `owner_id:index` of the sample point.
    pub tile_id: String,
    pub owner_id: String,
    pub index: usize,
    pub lat: f64,
    pub lon: f64,
    pub zoom: u32,
    pub scene_id: String,
    pub timestamp: DateTime<Utc>,
    /// 256×256×3 RGB, row-major, interleaved.
    pub pixels: Vec<u8>,
}

impl ImageTile {
    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.pixels[(row * TILE_SIZE + col) * TILE_CHANNELS + channel]
    }
}

pub trait TileProvider: Send + Sync {
    fn id(&self) -> &str;
    fn search(&self, query: &SceneQuery) -> Result<Vec<SceneMeta>, ProviderError>;
    /// A tile centred on `p` from `scene`.
    fn download(&self, scene: &SceneMeta, p: LatLon, zoom: u32) -> Result<RawImage, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    /// Random extra fraction (up to this value) added to each delay.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
            jitter: 0.0,
        }
    }

    /// Runs `op`, retrying transport errors with exponential backoff.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(ProviderError::Transport(msg)) if attempt + 1 < self.attempts.max(1) => {
                    let factor = 2f64.powi(attempt as i32) * (1.0 + self.jitter * rand::rng().random::<f64>());
                    let delay = self.base_delay.mul_f64(factor);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                    let _ = msg;
                }
                other => return other,
            }
        }
    }
}

/// Scenes matching the query's cloud and date limits, oldest first (ties by id).
pub fn query_scenes(
    provider: &dyn TileProvider,
    query: &SceneQuery,
    retry: &RetryPolicy,
) -> Result<Vec<SceneMeta>, ImageryError> {
    query.validate()?;
    let mut scenes: Vec<SceneMeta> = retry
        .run(|| provider.search(query))?
        .into_iter()
        .filter(|s| {
            s.cloud_fraction <= query.max_cloud_fraction && s.timestamp >= query.start && s.timestamp <= query.end
        })
        .collect();
    scenes.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.scene_id.cmp(&b.scene_id)));
    Ok(scenes)
}

/// Most recent scene; equal timestamps resolve to the smallest scene id.
pub fn select_latest(scenes: &[SceneMeta]) -> Result<&SceneMeta, ImageryError> {
    scenes
        .iter()
        .max_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| b.scene_id.cmp(&a.scene_id)))
        .ok_or(ImageryError::NoScene)
}

fn check_shape(raw: &RawImage) -> Result<(), ImageryError> {
    if raw.width != TILE_SIZE || raw.height != TILE_SIZE || raw.channels != TILE_CHANNELS {
        return Err(ImageryError::Integrity(format!(
            "expected {TILE_SIZE}x{TILE_SIZE}x{TILE_CHANNELS}, got {}x{}x{}",
            raw.width, raw.height, raw.channels
        )));
    }
    if raw.data.len() != TILE_SIZE * TILE_SIZE * TILE_CHANNELS {
        return Err(ImageryError::Integrity(format!("payload of {} bytes", raw.data.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchSource {
    Cache,
    Provider,
}

/// Returns the tile for `point` from `scene`, reading through the cache.
pub fn fetch_tile(
    provider: &dyn TileProvider,
    cache: &TileCache,
    scene: &SceneMeta,
    point: &SamplePoint,
    zoom: u32,
    retry: &RetryPolicy,
) -> Result<(ImageTile, FetchSource), ImageryError> {
    let p = point.location();
    if !scene.covers(p) {
        return Err(ImageryError::Coverage {
            scene_id: scene.scene_id.clone(),
            lat: p.lat,
            lon: p.lon,
        });
    }
    let key = tile_key(provider.id(), &scene.scene_id, p, zoom);
    let _guard = cache.lock_key(&key);
    if let Some(tile) = cache.read(&key, point)? {
        return Ok((tile, FetchSource::Cache));
    }
    let raw = retry.run(|| provider.download(scene, p, zoom))?;
    if let Err(e) = check_shape(&raw) {
        cache.purge(&key);
        return Err(e);
    }
    let tile = ImageTile {
        tile_id: point.key(),
        owner_id: point.owner_id.clone(),
        index: point.index,
        lat: p.lat,
        lon: p.lon,
        zoom,
        scene_id: scene.scene_id.clone(),
        timestamp: scene.timestamp,
        pixels: raw.data,
    };
    cache.write(&key, &tile)?;
    Ok((tile, FetchSource::Provider))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcquisitionStatus {
    NoScene,
    Failed,
}

impl AcquisitionStatus {
    pub fn label(self) -> &'static str {
        match self {
            AcquisitionStatus::NoScene => "no_scene",
            AcquisitionStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub owner_id: String,
    pub index: usize,
    pub status: AcquisitionStatus,
    pub scene_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcquisitionReport {
    /// Points that produced no tile.
    pub entries: Vec<ReportEntry>,
    /// Tile ids fetched from the provider during this run.
    pub downloaded: Vec<String>,
    pub cache_hits: usize,
    pub targeted: usize,
}

impl AcquisitionReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), ImageryError> {
        let err = |e: csv::Error| ImageryError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["owner_id", "index", "status", "scene_id", "message"])
            .map_err(err)?;
        for e in &self.entries {
            w.write_record([
                e.owner_id.as_str(),
                &e.index.to_string(),
                e.status.label(),
                &e.scene_id,
                &e.message,
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| ImageryError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AcquireOptions {
    pub max_inflight: usize,
    pub retry: RetryPolicy,
    /// When unset, returned tiles carry metadata only; pixels stay in the
    /// cache.
    pub keep_pixels: bool,
}

impl Default for AcquireOptions {
    fn default() -> Self {
        Self {
            max_inflight: DEFAULT_MAX_INFLIGHT,
            retry: RetryPolicy::default(),
            keep_pixels: true,
        }
    }
}

enum PointOutcome {
    Tile(ImageTile, FetchSource),
    Miss(ReportEntry),
}

fn acquire_point(
    provider: &dyn TileProvider,
    cache: &TileCache,
    point: &SamplePoint,
    template: &SceneQuery,
    retry: &RetryPolicy,
) -> PointOutcome {
    let p = point.location();
    let query = template.with_area(QueryArea::Point(p));
    let miss = |status, scene_id: &str, message: String| {
        PointOutcome::Miss(ReportEntry {
            owner_id: point.owner_id.clone(),
            index: point.index,
            status,
            scene_id: scene_id.to_string(),
            message,
        })
    };
    let sel_key = selection_key(provider.id(), &query);
    if let Some(scene) = cache.read_selection(&sel_key) {
        let key = tile_key(provider.id(), &scene.scene_id, p, query.zoom);
        if let Ok(Some(tile)) = cache.read(&key, point) {
            return PointOutcome::Tile(tile, FetchSource::Cache);
        }
    }
    let scenes = match query_scenes(provider, &query, retry) {
        Ok(s) => s,
        Err(e) => return miss(AcquisitionStatus::Failed, "", e.to_string()),
    };
    let covering: Vec<SceneMeta> = scenes.into_iter().filter(|s| s.covers(p)).collect();
    let scene = match select_latest(&covering) {
        Ok(s) => s.clone(),
        Err(e) => return miss(AcquisitionStatus::NoScene, "", e.to_string()),
    };
    match fetch_tile(provider, cache, &scene, point, query.zoom, retry) {
        Ok((tile, source)) => {
            if let Err(e) = cache.write_selection(&sel_key, &scene) {
                return miss(AcquisitionStatus::Failed, &scene.scene_id, e.to_string());
            }
            PointOutcome::Tile(tile, source)
        }
        Err(e) => miss(AcquisitionStatus::Failed, &scene.scene_id, e.to_string()),
    }
}

/// Best-effort tile per point with at most `max_inflight` concurrent
/// requests. Tiles are ordered by `(owner_id, index)`; points without a tile
/// are listed in the report.
pub fn acquire_all(
    provider: &dyn TileProvider,
    cache: &TileCache,
    points: &[SamplePoint],
    template: &SceneQuery,
    options: &AcquireOptions,
) -> Result<(Vec<ImageTile>, AcquisitionReport), ImageryError> {
    template.validate()?;
    let slots: Vec<Mutex<Option<PointOutcome>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = options.max_inflight.max(1).min(points.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let mut outcome = acquire_point(provider, cache, &points[i], template, &options.retry);
                if let (PointOutcome::Tile(tile, _), false) = (&mut outcome, options.keep_pixels) {
                    tile.pixels = Vec::new();
                }
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let mut tiles = Vec::with_capacity(points.len());
    let mut report = AcquisitionReport {
        targeted: points.len(),
        ..Default::default()
    };
    for slot in slots {
        match slot.into_inner().expect("slot lock").expect("every point processed") {
            PointOutcome::Tile(tile, source) => {
                match source {
                    FetchSource::Cache => report.cache_hits += 1,
                    FetchSource::Provider => report.downloaded.push(tile.tile_id.clone()),
                }
                tiles.push(tile);
            }
            PointOutcome::Miss(entry) => report.entries.push(entry),
        }
    }
    tiles.sort_by(|a, b| a.owner_id.cmp(&b.owner_id).then(a.index.cmp(&b.index)));
    report
        .entries
        .sort_by(|a, b| a.owner_id.cmp(&b.owner_id).then(a.index.cmp(&b.index)));
    report.downloaded.sort();
    Ok((tiles, report))
}
