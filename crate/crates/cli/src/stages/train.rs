use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use demandmap_cnn::{build_backbone, bundle, train, TrainSample, TrainingConfig, HEAD_LAYER};
use demandmap_core::derive_seed;
use demandmap_core::imagery::TileCache;
use demandmap_core::labeling::{assign_bin, make_split, quantile_edges, SplitMember};

use super::util::{
    clusters_csv, countries_csv, create_dir, edges_path, group_tiles, load_clusters, load_countries, load_image,
    load_tile_rows, metric_dir, network_path, require_upstream, split_csv, tiles_csv, write_csv, write_text, SplitRow,
};
use super::{Pipeline, Stage, StageOutcome, StageWork};
use crate::error::{PipelineError, Result};

pub fn run(p: &mut Pipeline) -> Result<StageOutcome> {
    let t0 = Instant::now();
    let started = chrono::Utc::now();
    let cfg = &p.cfg;
    let mut inputs = vec![
        ("clusters".to_string(), clusters_csv(cfg)),
        ("countries".to_string(), countries_csv(cfg)),
        ("tiles".to_string(), tiles_csv(cfg)),
    ];
    require_upstream(&inputs[0].1, "ingest")?;
    require_upstream(&inputs[2].1, "fetch")?;
    if let Some(w) = &cfg.backbone.weights {
        inputs.push(("cnn.weights".into(), cfg.require_file(Some(w), "cnn.weights")?));
    }
    let (fingerprint, input_sums) = p.fingerprint(Stage::Train, &["train.", "cnn.", "split", "metrics"], &inputs)?;
    if let Some(skip) = p.try_skip(Stage::Train, &fingerprint)? {
        return Ok(skip);
    }
    let cfg = &p.cfg;
    let clusters = load_clusters(cfg)?;
    let countries = load_countries(cfg)?;
    let members: Vec<SplitMember> = clusters
        .iter()
        .map(|c| SplitMember {
            id: c.cluster_id.clone(),
            country: countries.get(&c.cluster_id).cloned().unwrap_or_default(),
        })
        .collect();
    let split = make_split(&members, cfg.split.clone(), derive_seed(cfg.seed, "split"))?;
    create_dir(&cfg.stage_dir("train"))?;
    let train_ids: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let split_rows: Vec<SplitRow> = members
        .iter()
        .map(|m| SplitRow {
            cluster_id: m.id.clone(),
            country: m.country.clone(),
            role: if train_ids.contains(m.id.as_str()) { "train" } else { "validation" }.into(),
        })
        .collect();
    let split_path = split_csv(cfg);
    write_csv(&split_path, &split_rows)?;

    let cache = TileCache::open(&cfg.cache_dir)?;
    let groups = group_tiles(load_tile_rows(cfg)?);
    let train_clusters: Vec<_> = clusters.iter().filter(|c| train_ids.contains(c.cluster_id.as_str())).collect();
    let mut outputs = vec![split_path];
    let mut counts = BTreeMap::from([
        ("train_clusters".to_string(), split.train.len() as u64),
        ("validation_clusters".to_string(), split.validation.len() as u64),
    ]);
    for &metric in &cfg.metrics {
        let values: Vec<f64> = train_clusters.iter().map(|c| metric.value(c)).collect();
        let edges = quantile_edges(metric.name(), &values)?;
        let mut samples = Vec::new();
        for c in &train_clusters {
            let Some(rows) = groups.get(&c.cluster_id) else {
                continue;
            };
            let take = cfg.train_tiles_per_cluster.unwrap_or(rows.len()).min(rows.len());
            let assignment = assign_bin(&c.cluster_id, metric.value(c), &edges);
            for row in &rows[..take] {
                samples.push(TrainSample {
                    tile_id: row.tile_id.clone(),
                    image: load_image(&cache, row)?,
                    assignment: assignment.clone(),
                });
            }
        }
        if samples.is_empty() {
            return Err(PipelineError::Data(format!(
                "no tiles for the training clusters of {}",
                metric.name()
            )));
        }
        let mut net = build_backbone(&cfg.backbone)?;
        let tcfg = TrainingConfig {
            seed: derive_seed(cfg.seed, &format!("train/{}", metric.name())),
            ..cfg.training.clone()
        };
        let log = train(&mut net, &samples, &tcfg)?;
        if tcfg.epochs_frozen > 0 && log.frozen_phase_changed != [HEAD_LAYER] {
            return Err(PipelineError::Data(format!(
                "frozen phase changed layers {:?}; only layer {HEAD_LAYER} may change",
                log.frozen_phase_changed
            )));
        }
        let dir = metric_dir(cfg, "train", metric);
        create_dir(&dir)?;
        let net_path = network_path(cfg, metric);
        bundle::save(&net, &net_path)?;
        let log_path = dir.join("training_log.csv");
        log.write_csv(&log_path)?;
        let e_path = edges_path(cfg, metric);
        write_text(&e_path, &serde_json::to_string_pretty(&edges)?)?;
        let checks_path = dir.join("frozen_phase.txt");
        write_text(
            &checks_path,
            &format!(
                "seed={}\nchanged_layers={}\nfirst_loss={}\nlast_loss={}\n",
                cfg.seed,
                log.frozen_phase_changed
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                log.first_loss().unwrap_or(f64::NAN),
                log.last_loss().unwrap_or(f64::NAN),
            ),
        )?;
        outputs.extend([net_path, log_path, e_path, checks_path]);
        counts.insert(format!("{}_samples", metric.name()), samples.len() as u64);
        counts.insert(format!("{}_epochs", metric.name()), log.epochs.len() as u64);
    }
    p.record(
        Stage::Train,
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
