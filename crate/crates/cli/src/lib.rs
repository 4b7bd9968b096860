//! Stage-oriented pipeline: survey ingest, tile acquisition, network
//! fine-tuning, ridge ensembles with validation reports, gridded maps and
//! activation maps.

pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod provider;
pub mod stages;
pub mod synth;

use std::path::Path;

use demandmap_core::kv::KvMap;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
pub use stages::{Pipeline, Stage, StageOutcome};

/// Reads a config file, applies `key=value` overrides and the seed override.
pub fn load_config(path: &Path, seed: Option<u64>, overrides: &[String]) -> Result<PipelineConfig> {
    if !path.is_file() {
        return Err(PipelineError::Config(format!("config file {} not found", path.display())));
    }
    let mut kv = KvMap::read(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("stage argument {o:?} is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    let cfg = PipelineConfig::from_kv(kv, path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Runs one stage, or every stage when `stage` is `None`.
pub fn run(cfg: PipelineConfig, stage: Option<Stage>) -> Result<Vec<StageOutcome>> {
    let mut pipeline = Pipeline::open(cfg)?;
    match stage {
        Some(s) => Ok(vec![pipeline.run(s)?]),
        None => pipeline.run_all(),
    }
}
