//! Pipeline stages. Each stage reads its inputs from earlier stages' files in
//! the output directory, so stages can be run one at a time.

mod explain;
mod fetch;
mod fit;
mod gridmap;
mod ingest;
mod train;
mod util;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::manifest::{file_checksum, RunLock, RunManifest, StageRecord};

pub use fetch::TileRow;
pub use fit::ReportRow;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Fetch,
    Train,
    Fit,
    Gridmap,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Fetch,
        Stage::Train,
        Stage::Fit,
        Stage::Gridmap,
        Stage::Explain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Fetch => "fetch",
            Stage::Train => "train",
            Stage::Fit => "fit",
            Stage::Gridmap => "gridmap",
            Stage::Explain => "explain",
        }
    }
}

/// What a stage did, for console output.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub counts: BTreeMap<String, u64>,
    pub seconds: f64,
}

impl std::fmt::Display for StageOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: ", self.stage.name())?;
        if self.skipped {
            write!(f, "up to date")?;
        } else {
            write!(f, "done in {:.1}s", self.seconds)?;
        }
        for (k, v) in &self.counts {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// A pipeline run holding the output-directory lock.
#[derive(Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub manifest: RunManifest,
    _lock: RunLock,
}

/// Inputs and outputs of one stage execution.
pub(crate) struct StageWork {
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub counts: BTreeMap<String, u64>,
}

impl Pipeline {
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        let lock = RunLock::acquire(&cfg.output_dir)?;
        let mut manifest = RunManifest::load(&cfg.output_dir)?;
        manifest.config_hash = cfg.hash();
        manifest.versions.insert("demandmap".into(), VERSION.into());
        manifest.versions.insert("seed".into(), cfg.seed.to_string());
        manifest.save(&cfg.output_dir)?;
        Ok(Self {
            cfg,
            manifest,
            _lock: lock,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    /// Hashes the stage name, the seed, the config keys under `prefixes` and
    /// the contents of `inputs`.
    pub(crate) fn fingerprint(
        &self,
        stage: Stage,
        prefixes: &[&str],
        inputs: &[(String, PathBuf)],
    ) -> Result<(String, BTreeMap<String, String>)> {
        let mut sums = BTreeMap::new();
        for (label, path) in inputs {
            sums.insert(label.clone(), file_checksum(path)?);
        }
        let mut h = Sha256::new();
        h.update(format!("{}\n{VERSION}\n", stage.name()));
        h.update(self.cfg.section_hash(prefixes));
        for (k, v) in &sums {
            h.update(format!("{k}={v}\n"));
        }
        Ok((hex::encode(h.finalize()), sums))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.cfg.output_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Records a finished stage and saves the manifest.
    pub(crate) fn record(&mut self, stage: Stage, work: StageWork, started: chrono::DateTime<chrono::Utc>, t0: Instant) -> Result<StageOutcome> {
        let mut outputs = BTreeMap::new();
        for p in &work.outputs {
            outputs.insert(self.rel(p), file_checksum(p)?);
        }
        let seconds = t0.elapsed().as_secs_f64();
        self.manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                fingerprint: work.fingerprint,
                inputs: work.inputs,
                outputs,
                counts: work.counts.clone(),
                started: started.to_rfc3339(),
                seconds,
                skipped: false,
            },
        );
        self.manifest.save(&self.cfg.output_dir)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            counts: work.counts,
            seconds,
        })
    }

    /// Returns the skip outcome when `stage` is current for `fingerprint`.
    pub(crate) fn try_skip(&mut self, stage: Stage, fingerprint: &str) -> Result<Option<StageOutcome>> {
        if !self.manifest.is_current(&self.cfg.output_dir, stage.name(), fingerprint) {
            return Ok(None);
        }
        let rec = self.manifest.stages.get_mut(stage.name()).expect("current stage has a record");
        rec.skipped = true;
        let counts = rec.counts.clone();
        self.manifest.save(&self.cfg.output_dir)?;
        Ok(Some(StageOutcome {
            stage,
            skipped: true,
            counts,
            seconds: 0.0,
        }))
    }

    pub fn run(&mut self, stage: Stage) -> Result<StageOutcome> {
        match stage {
            Stage::Ingest => ingest::run(self),
            Stage::Fetch => fetch::run(self),
            Stage::Train => train::run(self),
            Stage::Fit => fit::run(self),
            Stage::Gridmap => gridmap::run(self),
            Stage::Explain => explain::run(self),
        }
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|&s| self.run(s)).collect()
    }
}
