use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use demandmap_cnn::{aggregate_features, bundle, build_backbone, extract_features, FeatureSource, FeatureVector, Network};
use demandmap_core::geo::SamplePoint;
use demandmap_core::imagery::{RawImage, TileCache, TILE_CHANNELS, TILE_SIZE};
use demandmap_core::kv::KvMap;
use demandmap_core::labeling::BinEdges;
use demandmap_core::survey::{read_clusters, ClusterRecord};
use demandmap_core::Metric;
use serde::{Deserialize, Serialize};

use super::fetch::TileRow;
use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::manifest::write_atomic;

/// Images decoded at once while extracting features.
const FEATURE_CHUNK: usize = 128;

pub fn clusters_csv(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir("ingest").join("clusters.csv")
}

pub fn countries_csv(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir("ingest").join("cluster_country.csv")
}

pub fn tiles_csv(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir("fetch").join("tiles.csv")
}

pub fn split_csv(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir("train").join("split.csv")
}

pub fn metric_dir(cfg: &PipelineConfig, stage: &str, metric: Metric) -> PathBuf {
    cfg.stage_dir(stage).join(metric.name())
}

pub fn network_path(cfg: &PipelineConfig, metric: Metric) -> PathBuf {
    metric_dir(cfg, "train", metric).join("network.dmwb")
}

pub fn edges_path(cfg: &PipelineConfig, metric: Metric) -> PathBuf {
    metric_dir(cfg, "train", metric).join("bin_edges.json")
}

pub fn ensemble_path(cfg: &PipelineConfig, metric: Metric, model: &str, folds: &str) -> PathBuf {
    metric_dir(cfg, "fit", metric).join(format!("{model}_{folds}.json"))
}

/// Fails with a data error naming the stage that produces `path`.
pub fn require_upstream(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Data(format!(
            "{} is missing; run the {producer} stage first",
            path.display()
        )))
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn write_kv(path: &Path, kv: &KvMap) -> Result<()> {
    write_text(path, &kv.to_text())
}

pub fn load_clusters(cfg: &PipelineConfig) -> Result<Vec<ClusterRecord>> {
    let path = clusters_csv(cfg);
    require_upstream(&path, "ingest")?;
    Ok(read_clusters(&path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryRow {
    pub cluster_id: String,
    pub country: String,
}

pub fn load_countries(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let path = countries_csv(cfg);
    require_upstream(&path, "ingest")?;
    let rows: Vec<CountryRow> = read_csv(&path)?;
    Ok(rows.into_iter().map(|r| (r.cluster_id, r.country)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRow {
    pub cluster_id: String,
    pub country: String,
    /// `train` or `validation`.
    pub role: String,
}

/// Training and validation cluster ids, each sorted.
pub fn load_split(cfg: &PipelineConfig) -> Result<(Vec<String>, Vec<String>)> {
    let path = split_csv(cfg);
    require_upstream(&path, "train")?;
    let rows: Vec<SplitRow> = read_csv(&path)?;
    let (train, val): (Vec<SplitRow>, Vec<SplitRow>) = rows.into_iter().partition(|r| r.role == "train");
    Ok((
        train.into_iter().map(|r| r.cluster_id).collect(),
        val.into_iter().map(|r| r.cluster_id).collect(),
    ))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::io(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| PipelineError::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::io(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::io(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_tile_rows(cfg: &PipelineConfig) -> Result<Vec<TileRow>> {
    let path = tiles_csv(cfg);
    require_upstream(&path, "fetch")?;
    read_csv(&path)
}

/// Tile rows grouped by owner, each group ordered by point index.
pub fn group_tiles(rows: Vec<TileRow>) -> BTreeMap<String, Vec<TileRow>> {
    let mut groups: BTreeMap<String, Vec<TileRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.owner_id.clone()).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|r| r.index);
    }
    groups
}

/// Reads a tile's pixels back from the cache.
pub fn load_image(cache: &TileCache, row: &TileRow) -> Result<RawImage> {
    let point = SamplePoint {
        owner_id: row.owner_id.clone(),
        index: row.index,
        lat: row.lat,
        lon: row.lon,
    };
    let tile = cache
        .read(&row.cache_key, &point)?
        .ok_or_else(|| PipelineError::Data(format!("tile {} is not in the cache; rerun fetch", row.tile_id)))?;
    Ok(RawImage {
        width: TILE_SIZE,
        height: TILE_SIZE,
        channels: TILE_CHANNELS,
        data: tile.pixels,
    })
}

pub fn load_network(cfg: &PipelineConfig, metric: Metric) -> Result<Network> {
    let path = network_path(cfg, metric);
    require_upstream(&path, "train")?;
    let spec = demandmap_cnn::BackboneSpec {
        weights: None,
        ..cfg.backbone.clone()
    };
    let mut net = build_backbone(&spec)?;
    bundle::load_into(&mut net, &path)?;
    Ok(net)
}

pub fn load_edges(cfg: &PipelineConfig, metric: Metric) -> Result<BinEdges> {
    let path = edges_path(cfg, metric);
    require_upstream(&path, "train")?;
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean feature vector per owner over its tiles. Owners without tiles are
/// absent from the result.
pub fn owner_features(
    net: &Network,
    cache: &TileCache,
    groups: &BTreeMap<String, Vec<TileRow>>,
    crop_size: usize,
    source: FeatureSource,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let rows: Vec<&TileRow> = groups.values().flatten().collect();
    let mut per_owner: BTreeMap<String, Vec<FeatureVector>> = BTreeMap::new();
    for chunk in rows.chunks(FEATURE_CHUNK) {
        let images = chunk
            .iter()
            .map(|r| Ok((r.tile_id.clone(), load_image(cache, r)?)))
            .collect::<Result<Vec<_>>>()?;
        let feats = extract_features(net, &images, crop_size)?;
        for (row, f) in chunk.iter().zip(feats) {
            per_owner.entry(row.owner_id.clone()).or_default().push(f);
        }
    }
    let agg = aggregate_features(&per_owner, source)?;
    Ok(agg.into_iter().map(|f| (f.owner, f.values)).collect())
}
