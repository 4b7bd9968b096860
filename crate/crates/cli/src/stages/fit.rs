use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use demandmap_cnn::FeatureSource;
use demandmap_core::derive_seed;
use demandmap_core::geo::read_raster;
use demandmap_core::imagery::TileCache;
use demandmap_core::labeling::{make_fold_plan, FoldMode, FoldPlan, Site};
use demandmap_core::regress::{baseline_design, evaluate, fit_ensemble, BaselineFeature, Design, MetricReport};
use demandmap_core::survey::ClusterRecord;
use serde::{Deserialize, Serialize};

use super::util::{
    clusters_csv, create_dir, edges_path, ensemble_path, group_tiles, load_clusters, load_edges, load_network,
    load_split, load_tile_rows, metric_dir, network_path, owner_features, require_upstream, split_csv, tiles_csv,
    write_csv, write_kv, write_text,
};
use super::{Pipeline, Stage, StageOutcome, StageWork};
use crate::error::{PipelineError, Result};
use crate::plot::scatter_svg;

pub const CNN_MODEL: &str = "cnn";

/// One row of the accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub features: String,
    pub cross_validation: String,
    pub pearson_r2: f64,
    pub r2: f64,
    pub bin_accuracy: f64,
    pub sigma: f64,
    pub coverage: f64,
    pub n: usize,
}

/// One validation point of one model, for observed-versus-predicted plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub features: String,
    pub cross_validation: String,
    pub cluster_id: String,
    pub observed: f64,
    pub predicted: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Serialize)]
struct FoldRow<'a> {
    fold: usize,
    cluster_id: &'a str,
}

pub fn report_csv(cfg: &crate::config::PipelineConfig) -> PathBuf {
    cfg.stage_dir("fit").join("report.csv")
}

fn cnn_design(ids: &[&ClusterRecord], features: &BTreeMap<String, Vec<f64>>, metric: demandmap_core::Metric) -> Result<Design> {
    let rows: Vec<Vec<f64>> = ids.iter().map(|c| features[&c.cluster_id].clone()).collect();
    let y: Vec<f64> = ids.iter().map(|c| metric.value(c)).collect();
    Ok(Design::from_rows(ids.iter().map(|c| c.cluster_id.clone()).collect(), &rows, &y)?)
}

fn render_table(rows: &[ReportRow], seed: u64) -> String {
    let mut s = format!("seed={seed}\n\n");
    s.push_str(&format!(
        "{:<12} {:<20} {:<8} {:>10} {:>10} {:>8} {:>10} {:>9} {:>5}\n",
        "metric", "features", "cv", "pearson_r2", "r2", "bin_acc", "sigma", "coverage", "n"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<20} {:<8} {:>10.4} {:>10.4} {:>8.3} {:>10.4} {:>9.3} {:>5}\n",
            r.metric, r.features, r.cross_validation, r.pearson_r2, r.r2, r.bin_accuracy, r.sigma, r.coverage, r.n
        ));
    }
    s
}

pub fn run(p: &mut Pipeline) -> Result<StageOutcome> {
    let t0 = Instant::now();
    let started = chrono::Utc::now();
    let cfg = &p.cfg;
    let mut inputs = vec![
        ("clusters".to_string(), clusters_csv(cfg)),
        ("tiles".to_string(), tiles_csv(cfg)),
        ("split".to_string(), split_csv(cfg)),
    ];
    for &m in &cfg.metrics {
        inputs.push((format!("{}.network", m.name()), network_path(cfg, m)));
        inputs.push((format!("{}.edges", m.name()), edges_path(cfg, m)));
    }
    require_upstream(&inputs[0].1, "ingest")?;
    require_upstream(&inputs[1].1, "fetch")?;
    for (_, path) in &inputs[2..] {
        require_upstream(path, "train")?;
    }
    let pop_path = cfg.require_file(cfg.population_raster.as_ref(), "raster.population")?;
    let nl_path = cfg.require_file(cfg.nightlight_raster.as_ref(), "raster.nightlight")?;
    inputs.push(("raster.population".into(), pop_path.clone()));
    inputs.push(("raster.nightlight".into(), nl_path.clone()));
    let (fingerprint, input_sums) =
        p.fingerprint(Stage::Fit, &["fit.", "train.crop_size", "cnn.", "metrics"], &inputs)?;
    if let Some(skip) = p.try_skip(Stage::Fit, &fingerprint)? {
        return Ok(skip);
    }
    let cfg = &p.cfg;
    let rasters = [
        (BaselineFeature::PopulationDensity, read_raster(&pop_path)?),
        (BaselineFeature::Nightlight, read_raster(&nl_path)?),
    ];
    let clusters = load_clusters(cfg)?;
    let (train_ids, val_ids) = load_split(cfg)?;
    let groups = group_tiles(load_tile_rows(cfg)?);
    let cache = TileCache::open(&cfg.cache_dir)?;
    let dir = cfg.stage_dir("fit");
    create_dir(&dir)?;

    // Clusters without any tile cannot be scored by the image model and are
    // left out of every model so all rows compare the same points.
    let train_set: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let val_set: BTreeSet<&str> = val_ids.iter().map(String::as_str).collect();
    let with_tiles = |set: &BTreeSet<&str>| -> Vec<&ClusterRecord> {
        clusters
            .iter()
            .filter(|c| set.contains(c.cluster_id.as_str()) && groups.contains_key(&c.cluster_id))
            .collect()
    };
    let train_c = with_tiles(&train_set);
    let val_c = with_tiles(&val_set);
    if val_c.is_empty() {
        return Err(PipelineError::Data("no validation cluster has tiles".into()));
    }
    let sites: Vec<Site> = train_c
        .iter()
        .map(|c| Site {
            id: c.cluster_id.clone(),
            lat: c.lat,
            lon: c.lon,
        })
        .collect();
    let mut outputs = Vec::new();
    let mut plans: Vec<FoldPlan> = Vec::new();
    for mode in [FoldMode::Random, FoldMode::Spatial] {
        let plan = make_fold_plan(&sites, mode, cfg.fit.folds, derive_seed(cfg.seed, &format!("folds/{}", mode.label())))?;
        let rows: Vec<FoldRow> = plan
            .folds
            .iter()
            .enumerate()
            .flat_map(|(fold, ids)| ids.iter().map(move |id| FoldRow { fold, cluster_id: id }))
            .collect();
        let path = dir.join(format!("folds_{}.csv", mode.label()));
        write_csv(&path, &rows)?;
        outputs.push(path);
        plans.push(plan);
    }

    let mut table = Vec::new();
    let train_owned: Vec<ClusterRecord> = train_c.iter().map(|c| (*c).clone()).collect();
    let val_owned: Vec<ClusterRecord> = val_c.iter().map(|c| (*c).clone()).collect();
    for &metric in &cfg.metrics {
        let mdir = metric_dir(cfg, "fit", metric);
        create_dir(&mdir)?;
        let net = load_network(cfg, metric)?;
        let edges = load_edges(cfg, metric)?;
        let wanted: BTreeMap<String, _> = groups
            .iter()
            .filter(|(id, _)| train_set.contains(id.as_str()) || val_set.contains(id.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let features = owner_features(&net, &cache, &wanted, cfg.training.crop_size, FeatureSource::ClusterMean)?;
        let mut designs: Vec<(String, Design, Design)> = vec![(
            CNN_MODEL.to_string(),
            cnn_design(&train_c, &features, metric)?,
            cnn_design(&val_c, &features, metric)?,
        )];
        for (feature, raster) in &rasters {
            designs.push((
                feature.label().to_string(),
                baseline_design(&train_owned, metric, raster, cfg.fit.baseline_box_km)?,
                baseline_design(&val_owned, metric, raster, cfg.fit.baseline_box_km)?,
            ));
        }
        let mut scatter = Vec::new();
        // Baselines first, then the image model, as in the published table.
        designs.rotate_left(1);
        for (model, train_d, val_d) in &designs {
            for plan in &plans {
                let cv = plan.mode.label();
                let ensemble = fit_ensemble(train_d, plan, &cfg.fit.lambda_grid)?;
                let ens_path = ensemble_path(cfg, metric, model, cv);
                ensemble.save(&ens_path)?;
                let report: MetricReport = evaluate(&ensemble, val_d, &edges, cfg.fit.z)?;
                let csv_path = mdir.join(format!("validation_{model}_{cv}.csv"));
                let summary_path = mdir.join(format!("validation_{model}_{cv}.txt"));
                report.write(&csv_path, &summary_path)?;
                let mut summary = report.summary();
                summary.set("seed", cfg.seed);
                summary.set("lambdas", format!("{:?}", ensemble.lambdas()));
                write_kv(&summary_path, &summary)?;
                if model == CNN_MODEL {
                    let svg = mdir.join(format!("scatter_{cv}.svg"));
                    write_text(&svg, &scatter_svg(&format!("{} ({cv} folds)", metric.name()), &report.rows))?;
                    outputs.push(svg);
                }
                scatter.extend(report.rows.iter().map(|r| ScatterRow {
                    features: model.clone(),
                    cross_validation: cv.to_string(),
                    cluster_id: r.id.clone(),
                    observed: r.observed,
                    predicted: r.predicted,
                    lower: r.lower,
                    upper: r.upper,
                }));
                table.push(ReportRow {
                    metric: metric.name().to_string(),
                    features: model.clone(),
                    cross_validation: cv.to_string(),
                    pearson_r2: report.pearson_r2,
                    r2: report.r2,
                    bin_accuracy: report.bin_accuracy,
                    sigma: report.sigma,
                    coverage: report.coverage(),
                    n: report.rows.len(),
                });
                outputs.extend([ens_path, csv_path, summary_path]);
            }
        }
        let scatter_path = mdir.join("scatter.csv");
        write_csv(&scatter_path, &scatter)?;
        outputs.push(scatter_path);
    }
    let report_path = report_csv(cfg);
    write_csv(&report_path, &table)?;
    let text_path = dir.join("report.txt");
    write_text(&text_path, &render_table(&table, cfg.seed))?;
    outputs.extend([report_path, text_path]);
    let counts = BTreeMap::from([
        ("train_clusters".to_string(), train_c.len() as u64),
        ("validation_clusters".to_string(), val_c.len() as u64),
        ("models".to_string(), table.len() as u64),
    ]);
    p.record(
        Stage::Fit,
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
