use std::collections::BTreeMap;
use std::time::Instant;

use demandmap_cnn::activation_map;
use demandmap_core::imagery::TileCache;
use demandmap_core::labeling::assign_bin;

use super::util::{
    clusters_csv, create_dir, edges_path, load_clusters, load_edges, load_image, load_network, load_tile_rows,
    metric_dir, network_path, require_upstream, tiles_csv,
};
use super::{Pipeline, Stage, StageOutcome, StageWork};
use crate::error::{PipelineError, Result};

/// Tiles explained when none are configured.
const DEFAULT_TILES: usize = 4;

/// File stem for a tile id; `owner:index` ids contain a colon.
pub fn file_stem(tile_id: &str) -> String {
    tile_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn run(p: &mut Pipeline) -> Result<StageOutcome> {
    let t0 = Instant::now();
    let started = chrono::Utc::now();
    let cfg = &p.cfg;
    let metric = cfg.explain.metric;
    let inputs = vec![
        ("clusters".to_string(), clusters_csv(cfg)),
        ("tiles".to_string(), tiles_csv(cfg)),
        ("network".to_string(), network_path(cfg, metric)),
        ("edges".to_string(), edges_path(cfg, metric)),
    ];
    require_upstream(&inputs[0].1, "ingest")?;
    require_upstream(&inputs[1].1, "fetch")?;
    require_upstream(&inputs[2].1, "train")?;
    let (fingerprint, input_sums) = p.fingerprint(Stage::Explain, &["explain.", "cnn."], &inputs)?;
    if let Some(skip) = p.try_skip(Stage::Explain, &fingerprint)? {
        return Ok(skip);
    }
    let cfg = &p.cfg;
    let rows = load_tile_rows(cfg)?;
    let selected: Vec<_> = if cfg.explain.tiles.is_empty() {
        rows.iter().take(DEFAULT_TILES).collect()
    } else {
        let by_id: BTreeMap<&str, _> = rows.iter().map(|r| (r.tile_id.as_str(), r)).collect();
        cfg.explain
            .tiles
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| PipelineError::Config(format!("explain.tiles: tile {id} was not fetched")))
            })
            .collect::<Result<_>>()?
    };
    if let Some(t) = cfg.explain.target.filter(|&t| t >= demandmap_cnn::NUM_CLASSES) {
        return Err(PipelineError::Config(format!(
            "explain.target {t} is not a class (0..{})",
            demandmap_cnn::NUM_CLASSES
        )));
    }
    let clusters: BTreeMap<String, f64> = load_clusters(cfg)?
        .iter()
        .map(|c| (c.cluster_id.clone(), metric.value(c)))
        .collect();
    let edges = load_edges(cfg, metric)?;
    let net = load_network(cfg, metric)?;
    let cache = TileCache::open(&cfg.cache_dir)?;
    let dir = metric_dir(cfg, "explain", metric);
    create_dir(&dir)?;
    let mut outputs = Vec::new();
    for row in selected {
        let target = match cfg.explain.target {
            Some(t) => t,
            None => {
                let value = clusters.get(&row.owner_id).ok_or_else(|| {
                    PipelineError::Data(format!("tile {} has no survey cluster; set explain.target", row.tile_id))
                })?;
                assign_bin(&row.owner_id, *value, &edges).bin
            }
        };
        let image = load_image(&cache, row)?;
        let map = activation_map(&net, &image, &row.tile_id, target, cfg.explain.mode)?;
        let png = dir.join(format!("{}.png", file_stem(&row.tile_id)));
        map.write_png(&png)?;
        outputs.push(png.with_extension("txt"));
        outputs.push(png);
    }
    let counts = BTreeMap::from([("maps".to_string(), (outputs.len() / 2) as u64)]);
    p.record(
        Stage::Explain,
        StageWork {
            fingerprint,
            inputs: input_sums,
            outputs,
            counts,
        },
        started,
        t0,
    )
}
