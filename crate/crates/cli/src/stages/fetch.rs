use std::collections::BTreeMap;
use std::time::Instant;

use demandmap_core::derive_seed;
use demandmap_core::geo::{bbox_around, sample_points, LatLon, SamplePoint};
use demandmap_core::imagery::{
    acquire_all, query_scenes, tile_key, AcquireOptions, AcquisitionReport, AcquisitionStatus, ImageTile, QueryArea,
    SceneQuery, TileCache, TileProvider,
};
use demandmap_core::kv::KvMap;
use serde::{Deserialize, Serialize};

use super::util::{clusters_csv, create_dir, load_clusters, require_upstream, tiles_csv, write_csv, write_kv};
use super::{Pipeline, Stage, StageOutcome, StageWork};
use crate::config::{DownloadConfig, PipelineConfig, ProviderConfig};
use crate::error::{PipelineError, Result};
use crate::provider::{build_provider, retry_policy};

/// One acquired tile, as listed in `tiles.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRow {
    pub tile_id: String,
    pub owner_id: String,
    pub index: usize,
    pub lat: f64,
    pub lon: f64,
    pub scene_id: String,
    pub timestamp: String,
    pub cache_key: String,
}

pub fn scene_template(d: &DownloadConfig) -> SceneQuery {
    SceneQuery {
        area: QueryArea::Point(LatLon::new(0.0, 0.0)),
        start: d.start,
        end: d.end,
        max_cloud_fraction: d.max_cloud,
        zoom: d.zoom,
    }
}

/// Result of acquiring tiles for a set of points.
pub struct Acquired {
    pub rows: Vec<TileRow>,
    pub report: AcquisitionReport,
}

/// Fetches (or reads from cache) one tile per point. A credential or
/// transport failure on the first scene search aborts with a provider error
/// instead of failing every point.
pub fn acquire(cfg: &PipelineConfig, provider: &dyn TileProvider, points: &[SamplePoint]) -> Result<Acquired> {
    let cache = TileCache::open(&cfg.cache_dir)?;
    let template = scene_template(&cfg.download);
    let retry = retry_policy(&cfg.download);
    if let Some(first) = points.first() {
        query_scenes(provider, &template.with_area(QueryArea::Point(first.location())), &retry)?;
    }
    let options = AcquireOptions {
        max_inflight: cfg.download.max_inflight,
        retry,
        keep_pixels: false,
    };
    let (tiles, report) = acquire_all(provider, &cache, points, &template, &options)?;
    // Individual misses are reported; a run that yields no imagery at all
    // leaves nothing to work with and is a provider failure.
    if tiles.is_empty() && !report.entries.is_empty() {
        let no_scene = report.entries.iter().filter(|e| e.status == AcquisitionStatus::NoScene).count();
        return Err(PipelineError::Provider(format!(
            "no tile acquired for {} points ({no_scene} without a usable scene); first error: {}",
            report.entries.len(),
            report.entries[0].message
        )));
    }
    let by_key: BTreeMap<String, &SamplePoint> = points.iter().map(|p| (p.key(), p)).collect();
    let rows = tiles
        .iter()
        .map(|t: &ImageTile| {
            let point = by_key[&t.tile_id];
            TileRow {
                tile_id: t.tile_id.clone(),
                owner_id: t.owner_id.clone(),
                index: t.index,
                lat: point.lat,
                lon: point.lon,
                scene_id: t.scene_id.clone(),
                timestamp: t.timestamp.to_rfc3339(),
                cache_key: tile_key(provider.id(), &t.scene_id, point.location(), t.zoom),
            }
        })
        .collect();
    Ok(Acquired { rows, report })
}

fn provider_inputs(cfg: &PipelineConfig) -> Vec<(String, std::path::PathBuf)> {
    match &cfg.provider {
        ProviderConfig::Mock { brightness_raster, .. } if brightness_raster.is_file() => {
            vec![("provider.mock.brightness_raster".into(), brightness_raster.clone())]
        }
        _ => Vec::new(),
    }
}

pub fn run(p: &mut Pipeline) -> Result<StageOutcome> {
    let t0 = Instant::now();
    let started = chrono::Utc::now();
    let clusters_path = clusters_csv(&p.cfg);
    require_upstream(&clusters_path, "ingest")?;
    let mut inputs = vec![("clusters".to_string(), clusters_path)];
    inputs.extend(provider_inputs(&p.cfg));
    let (fingerprint, input_sums) = p.fingerprint(Stage::Fetch, &["download.", "provider."], &inputs)?;
    if p.manifest.is_current(&p.cfg.output_dir, Stage::Fetch.name(), &fingerprint) && cache_complete(&p.cfg)? {
        let mut skip = p.try_skip(Stage::Fetch, &fingerprint)?.expect("stage is current");
        let acquired = skip.counts.get("acquired").copied().unwrap_or(0);
        skip.counts.insert("downloaded".into(), 0);
        skip.counts.insert("cache_hits".into(), acquired);
        if let Some(rec) = p.manifest.stages.get_mut(Stage::Fetch.name()) {
            rec.counts = skip.counts.clone();
        }
        p.manifest.save(&p.cfg.output_dir)?;
        return Ok(skip);
    }
    let cfg = &p.cfg;
    let clusters = load_clusters(cfg)?;
    let provider = build_provider(cfg)?;
    let d = &cfg.download;
    let mut points = Vec::with_capacity(clusters.len() * d.points_per_cluster);
    for c in &clusters {
        let bbox = bbox_around(c.centroid(), d.box_km)?;
        let seed = derive_seed(cfg.seed, &format!("points/{}", c.cluster_id));
        points.extend(sample_points(&bbox, &c.cluster_id, d.points_per_cluster, seed));
    }
    let acquired = acquire(cfg, provider.as_ref(), &points)?;

    let dir = cfg.stage_dir("fetch");
    create_dir(&dir)?;
    let tiles_path = tiles_csv(cfg);
    write_csv(&tiles_path, &acquired.rows)?;
    let report_path = dir.join("acquisition_report.csv");
    acquired.report.write_csv(&report_path)?;

    let no_scene = acquired
        .report
        .entries
        .iter()
        .filter(|e| e.status == AcquisitionStatus::NoScene)
        .count() as u64;
    let failed = acquired.report.entries.len() as u64;
    let mut summary = KvMap::new();
    summary.set("seed", cfg.seed);
    summary.set("clusters", clusters.len());
    summary.set("points_per_cluster", d.points_per_cluster);
    summary.set("targeted", acquired.report.targeted);
    summary.set("acquired", acquired.rows.len());
    summary.set("failed", failed);
    summary.set("no_scene", no_scene);
    let summary_path = dir.join("summary.txt");
    write_kv(&summary_path, &summary)?;

    let counts = BTreeMap::from([
        ("clusters".to_string(), clusters.len() as u64),
        ("points_per_cluster".to_string(), d.points_per_cluster as u64),
        ("targeted".to_string(), acquired.report.targeted as u64),
        ("acquired".to_string(), acquired.rows.len() as u64),
        ("failed".to_string(), failed),
        ("no_scene".to_string(), no_scene),
        ("downloaded".to_string(), acquired.report.downloaded.len() as u64),
        ("cache_hits".to_string(), acquired.report.cache_hits as u64),
    ]);
    p.record(
        Stage::Fetch,
        StageWork {
            fingerprint,
            inputs: input_sums,
            outputs: vec![tiles_path, report_path, summary_path],
            counts,
        },
        started,
        t0,
    )
}

/// True when every tile listed in `tiles.csv` is still in the cache.
fn cache_complete(cfg: &PipelineConfig) -> Result<bool> {
    let path = tiles_csv(cfg);
    if !path.is_file() {
        return Ok(false);
    }
    let cache = TileCache::open(&cfg.cache_dir)?;
    let rows: Vec<TileRow> = super::util::read_csv(&path)?;
    Ok(rows.iter().all(|r| cache.contains(&r.cache_key)))
}
