//! Run manifest and output-directory lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const LOCK_FILE: &str = ".demandmap.lock";

/// SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| PipelineError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        PipelineError::io(path, e)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's configuration section and input checksums.
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    /// Output paths relative to the output directory, with checksums.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub started: String,
    pub seconds: f64,
    /// Set when the last invocation reused existing outputs.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join(MANIFEST_FILE)
    }

    /// Loads the manifest, or an empty one when absent.
    pub fn load(output_dir: &Path) -> Result<Self> {
        let path = Self::path(output_dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::io(&path, e))
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&Self::path(output_dir), &json)
    }

    /// True when `stage` last ran with `fingerprint` and every recorded
    /// output still has its checksum.
    pub fn is_current(&self, output_dir: &Path, stage: &str, fingerprint: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.fingerprint == fingerprint
            && !rec.outputs.is_empty()
            && rec
                .outputs
                .iter()
                .all(|(rel, sum)| file_checksum(&output_dir.join(rel)).is_ok_and(|s| &s == sum))
    }

    /// Checksum of a recorded output, used as a downstream input.
    pub fn output_checksum(&self, stage: &str, rel: &str) -> Option<&str> {
        self.stages.get(stage)?.outputs.get(rel).map(String::as_str)
    }
}

/// Exclusive ownership of an output directory for one run. The lock file is
/// removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(output_dir: &Path) -> Result<Self> {
        fs::create_dir_all(output_dir).map_err(|e| PipelineError::io(output_dir, e))?;
        let path = output_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid={}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Config(format!(
                "{} is locked by another run ({}); remove the file if that run is gone",
                output_dir.display(),
                path.display()
            ))),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
