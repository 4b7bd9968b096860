//! Building blocks for predicting telecom demand metrics from daytime
//! satellite imagery: household survey ingest, geometry and rasters, tile
//! acquisition, quantile labeling and fold planning, and nested
//! cross-validated ridge ensembles.

pub mod geo;
pub mod imagery;
pub mod kv;
pub mod labeling;
pub mod regress;
pub mod survey;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A cluster-level demand metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    /// Fraction of households owning at least one phone.
    Penetration,
    /// Monthly phone spend per person.
    Spend,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Penetration, Metric::Spend];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Penetration => "penetration",
            Metric::Spend => "spend",
        }
    }

    pub fn value(self, record: &survey::ClusterRecord) -> f64 {
        match self {
            Metric::Penetration => record.phone_penetration,
            Metric::Spend => record.spend_per_capita,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "penetration" => Ok(Metric::Penetration),
            "spend" => Ok(Metric::Spend),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// Derives an independent seed for `tag` from a run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
