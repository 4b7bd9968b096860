use std::collections::BTreeMap;
use std::time::Instant;

use demandmap_cnn::FeatureSource;
use demandmap_core::derive_seed;
use demandmap_core::geo::{cells_to_geojson, filter_low_population, grid_country, read_boundary, read_raster, sample_points, Prediction};
use demandmap_core::imagery::TileCache;
use demandmap_core::labeling::FoldMode;
use demandmap_core::regress::RidgeEnsemble;
use serde_json::{json, Map, Value};

use super::fetch::acquire;
use super::util::{create_dir, ensemble_path, group_tiles, load_network, network_path, owner_features, require_upstream, write_csv, write_text};
use super::{Pipeline, Stage, StageOutcome, StageWork};
use crate::error::{PipelineError, Result};
use crate::plot::choropleth_svg;
use crate::provider::build_provider;

/// The ensemble used for mapping.
pub const MAPPING_FOLDS: FoldMode = FoldMode::Spatial;

pub fn run(p: &mut Pipeline) -> Result<StageOutcome> {
    let t0 = Instant::now();
    let started = chrono::Utc::now();
    let cfg = &p.cfg;
    let boundary_path = cfg.require_file(cfg.boundary.as_ref(), "boundary")?;
    let pop_path = cfg.require_file(cfg.population_raster.as_ref(), "raster.population")?;
    let mut inputs = vec![("boundary".to_string(), boundary_path.clone()), ("raster.population".to_string(), pop_path.clone())];
    for &m in &cfg.metrics {
        let ens = ensemble_path(cfg, m, super::fit::CNN_MODEL, MAPPING_FOLDS.label());
        require_upstream(&ens, "fit")?;
        inputs.push((format!("{}.ensemble", m.name()), ens));
        inputs.push((format!("{}.network", m.name()), network_path(cfg, m)));
    }
    if let crate::config::ProviderConfig::Mock { brightness_raster, .. } = &cfg.provider {
        inputs.push(("provider.mock.brightness_raster".into(), brightness_raster.clone()));
    }
    let (fingerprint, input_sums) = p.fingerprint(
        Stage::Gridmap,
        &["gridmap.", "download.", "provider.", "fit.z", "train.crop_size", "cnn.", "metrics"],
        &inputs,
    )?;
    if let Some(skip) = p.try_skip(Stage::Gridmap, &fingerprint)? {
        return Ok(skip);
    }
    let cfg = &p.cfg;
    let g = &cfg.gridmap;
    let boundary = read_boundary(&boundary_path)?;
    let all_cells = grid_country(&boundary, g.cell_km)?;
    let total = all_cells.len();
    let pop = read_raster(&pop_path)?;
    let mut cells = filter_low_population(all_cells, &pop, g.min_population);
    let populated = cells.len();

    let mut points = Vec::with_capacity(cells.len() * g.points_per_cell);
    for c in &cells {
        let seed = derive_seed(cfg.seed, &format!("cell/{}", c.cell_id));
        points.extend(sample_points(&c.bbox, &c.cell_id, g.points_per_cell, seed));
    }
    let provider = build_provider(cfg)?;
    let acquired = acquire(cfg, provider.as_ref(), &points)?;
    let dir = cfg.stage_dir("gridmap");
    create_dir(&dir)?;
    let tiles_path = dir.join("tiles.csv");
    write_csv(&tiles_path, &acquired.rows)?;
    let report_path = dir.join("acquisition_report.csv");
    acquired.report.write_csv(&report_path)?;
    let groups = group_tiles(acquired.rows);
    let before = cells.len();
    cells.retain(|c| groups.contains_key(&c.cell_id));
    let without_imagery = before - cells.len();
    if cells.is_empty() {
        return Err(PipelineError::Data("no populated cell received imagery".into()));
    }

    let cache = TileCache::open(&cfg.cache_dir)?;
    let mut outputs = vec![tiles_path, report_path];
    for &metric in &cfg.metrics {
        let net = load_network(cfg, metric)?;
        let ensemble = RidgeEnsemble::load(&ensemble_path(cfg, metric, super::fit::CNN_MODEL, MAPPING_FOLDS.label()))?;
        let features = owner_features(&net, &cache, &groups, cfg.training.crop_size, FeatureSource::CellMean)?;
        for c in &mut cells {
            let (lower, value, upper) = ensemble.predict_interval(&features[&c.cell_id], cfg.fit.z)?;
            c.predictions.insert(metric.name().to_string(), Prediction { value, lower, upper });
        }
        let svg = dir.join(format!("{}.svg", metric.name()));
        let shaded: Vec<_> = cells.iter().map(|c| (c.bbox, c.predictions[metric.name()].value)).collect();
        write_text(&svg, &choropleth_svg(&format!("predicted {}", metric.name()), &shaded))?;
        outputs.push(svg);
    }
    let mut doc = cells_to_geojson(&cells, |c| {
        let mut props = Map::new();
        props.insert("cell_id".into(), json!(c.cell_id));
        props.insert("population".into(), json!(c.population));
        for (name, pred) in &c.predictions {
            props.insert(name.clone(), json!(pred.value));
            props.insert(format!("{name}_lo"), json!(pred.lower));
            props.insert(format!("{name}_hi"), json!(pred.upper));
        }
        props
    });
    if let Value::Object(o) = &mut doc {
        o.insert("seed".into(), json!(cfg.seed));
        o.insert("mapping_folds".into(), json!(MAPPING_FOLDS.label()));
    }
    let geojson = dir.join("predictions.geojson");
    write_text(&geojson, &serde_json::to_string_pretty(&doc)?)?;
    outputs.push(geojson);

    let counts = BTreeMap::from([
        ("grid_cells".to_string(), total as u64),
        ("populated_cells".to_string(), populated as u64),
        ("dropped_low_population".to_string(), (total - populated) as u64),
        ("dropped_no_imagery".to_string(), without_imagery as u64),
        ("mapped_cells".to_string(), cells.len() as u64),
        ("tiles".to_string(), acquired.report.targeted as u64 - acquired.report.entries.len() as u64),
    ]);
    p.record(
        Stage::Gridmap,
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
