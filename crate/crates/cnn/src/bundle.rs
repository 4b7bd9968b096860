//! Single-file weight bundles: `DMWB`, a little-endian `u32` format
//! version, a `u64` manifest length, a JSON manifest of
//! `(layer, name, shape)` entries, then every array as little-endian `f64`
//! in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::Network;
use crate::CnnError;

const MAGIC: &[u8; 4] = b"DMWB";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

/// What a load did with each layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub loaded: Vec<usize>,
    /// Layers kept at their fresh initialization because the bundle's head
    /// has a different shape.
    pub reinitialized: Vec<usize>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CnnError {
    CnnError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn save(net: &Network, path: &Path) -> Result<(), CnnError> {
    let mut manifest = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        for p in &layer.params {
            manifest.push(BundleEntry {
                layer: i,
                name: p.name.to_string(),
                shape: p.shape.clone(),
            });
        }
    }
    let json = serde_json::to_vec(&manifest).map_err(|e| CnnError::Bundle(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(&tmp, e));
    write(MAGIC)?;
    write(&BUNDLE_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for layer in &net.layers {
        for p in &layer.params {
            for v in &p.value {
                write(&v.to_le_bytes())?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| io_err(&tmp, e))?
        .sync_all()
        .map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Reads a bundle into `(manifest, arrays)`.
pub fn read(path: &Path) -> Result<(Vec<BundleEntry>, Vec<Vec<f64>>), CnnError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| io_err(path, e))?;
    if &head[..4] != MAGIC {
        return Err(CnnError::Bundle(format!("{}: not a weight bundle", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != BUNDLE_VERSION {
        return Err(CnnError::Bundle(format!("unsupported bundle version {version}")));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| io_err(path, e))?;
    let manifest: Vec<BundleEntry> = serde_json::from_slice(&json).map_err(|e| CnnError::Bundle(e.to_string()))?;
    let mut arrays = Vec::with_capacity(manifest.len());
    let mut buf = [0u8; 8];
    for entry in &manifest {
        let count: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| CnnError::Bundle(format!("truncated data for layer {} {}", entry.layer, entry.name)))?;
            values.push(f64::from_le_bytes(buf));
        }
        arrays.push(values);
    }
    Ok((manifest, arrays))
}

/// Copies bundle arrays into `net`. A backbone whose head shape differs from
/// the bundle keeps its fresh head; any other mismatch is an error naming the
/// first offending layer.
pub fn load_into(net: &mut Network, path: &Path) -> Result<LoadReport, CnnError> {
    let (manifest, arrays) = read(path)?;
    let max_layer = manifest.iter().map(|e| e.layer + 1).max().unwrap_or(0);
    if max_layer != net.layers.len() {
        return Err(CnnError::Bundle(format!(
            "bundle describes {max_layer} layers, network has {}",
            net.layers.len()
        )));
    }
    let head = net.head();
    let reinit_head = net.is_backbone();
    let mut report = LoadReport::default();
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let entries: Vec<usize> = (0..manifest.len()).filter(|&j| manifest[j].layer == i).collect();
        let matches = entries.len() == layer.params.len()
            && entries
                .iter()
                .zip(&layer.params)
                .all(|(&j, p)| manifest[j].name == p.name && manifest[j].shape == p.shape);
        if !matches {
            if i == head && reinit_head {
                report.reinitialized.push(i);
                continue;
            }
            let expected: Vec<String> = layer.params.iter().map(|p| format!("{}{:?}", p.name, p.shape)).collect();
            let found: Vec<String> = entries
                .iter()
                .map(|&j| format!("{}{:?}", manifest[j].name, manifest[j].shape))
                .collect();
            return Err(CnnError::Bundle(format!(
                "layer {i} ({}) mismatch: expected [{}], bundle has [{}]",
                layer.kind.role(),
                expected.join(", "),
                found.join(", ")
            )));
        }
        for (&j, p) in entries.iter().zip(layer.params.iter_mut()) {
            p.value.clone_from(&arrays[j]);
        }
        report.loaded.push(i);
    }
    Ok(report)
}
