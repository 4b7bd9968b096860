//! Household survey ingest and per-cluster aggregation.
//!
//! Column names differ between national survey releases, so the manifest maps
//! each role (cluster id, phone ownership, phone spend, household size,
//! coordinates) onto an input column.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geo::{BBox, LatLon};
use crate::kv::{KvError, KvMap};

#[derive(Debug, thiserror::Error)]
pub enum SurveyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("{path}: mapped column `{column}` not found in header")]
    MissingColumn { path: String, column: String },
    #[error("manifest maps column `{0}` to more than one role")]
    DuplicateMapping(String),
    #[error("clusters without a centroid: {}", .0.join(", "))]
    MissingCentroids(Vec<String>),
    #[error("{path} line {line}: {message}")]
    BadCoordinate {
        path: String,
        line: u64,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdRow {
    pub cluster_id: String,
    /// `None` when the answer is missing.
    pub has_phone: Option<bool>,
    /// Monthly phone spend in local currency.
    pub phone_spend: Option<f64>,
    pub household_size: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub lat: f64,
    pub lon: f64,
    pub n_households: usize,
    pub phone_penetration: f64,
    pub spend_per_capita: f64,
}

impl ClusterRecord {
    pub fn centroid(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub cluster_id: String,
    pub has_phone: String,
    pub spend: String,
    /// When unmapped every household counts as one person.
    pub household_size: Option<String>,
    pub lat: String,
    pub lon: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyManifest {
    pub country: String,
    pub households_csv: PathBuf,
    pub coords_csv: PathBuf,
    pub columns: ColumnMap,
    pub expected_clusters: Option<usize>,
    /// Country bounding box used to flag centroid outliers.
    pub bounds: Option<BBox>,
    pub currency: String,
}

impl SurveyManifest {
    /// Reads a manifest file; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self, SurveyError> {
        let kv = KvMap::read(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_kv(&kv, base)
    }

    pub fn from_kv(kv: &KvMap, base: &Path) -> Result<Self, SurveyError> {
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let columns = ColumnMap {
            cluster_id: kv.require("col.cluster_id")?.to_string(),
            has_phone: kv.require("col.has_phone")?.to_string(),
            spend: kv.require("col.spend")?.to_string(),
            household_size: kv.get("col.household_size").map(str::to_string),
            lat: kv.require("col.lat")?.to_string(),
            lon: kv.require("col.lon")?.to_string(),
        };
        let mut seen = HashSet::new();
        let roles = [
            Some(&columns.cluster_id),
            Some(&columns.has_phone),
            Some(&columns.spend),
            columns.household_size.as_ref(),
            Some(&columns.lat),
            Some(&columns.lon),
        ];
        for c in roles.into_iter().flatten() {
            if !seen.insert(c.clone()) {
                return Err(SurveyError::DuplicateMapping(c.clone()));
            }
        }
        let expected_clusters = match kv.get("expected_clusters") {
            Some(_) => Some(kv.parse_required::<usize>("expected_clusters")?),
            None => None,
        };
        let bounds = match kv.get("bbox") {
            Some(text) => Some(BBox::parse(text).map_err(|e| {
                SurveyError::Manifest(KvError::Invalid {
                    key: "bbox".into(),
                    value: text.into(),
                    reason: e.to_string(),
                })
            })?),
            None => None,
        };
        Ok(Self {
            country: kv.require("country")?.to_string(),
            households_csv: resolve(kv.require("households_csv")?),
            coords_csv: resolve(kv.require("coords_csv")?),
            columns,
            expected_clusters,
            bounds,
            currency: kv.get("currency").unwrap_or("LCU").to_string(),
        })
    }
}


/// A non-fatal problem found while parsing or aggregating.
#[derive(Debug, Clone, PartialEq)]
pub struct Warning {
    /// 1-based line in the source file (header is line 1); 0 when not tied to a row.
    pub line: u64,
    pub column: String,
    pub value: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub warnings: Vec<Warning>,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty()
        || ["na", "n/a", "nan", "null", "none", ".", "missing"]
            .iter()
            .any(|m| t.eq_ignore_ascii_case(m))
}

/// Parses phone ownership: yes/no/true/false/y/n, or a count of phones
/// (zero means no).
fn parse_has_phone(cell: &str) -> Result<Option<bool>, String> {
    let t = cell.trim();
    if is_missing(t) {
        return Ok(None);
    }
    match t.to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" => return Ok(Some(true)),
        "no" | "n" | "false" => return Ok(Some(false)),
        _ => {}
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v > 0.0)),
        _ => Err(format!("unrecognised phone ownership {t:?}")),
    }
}

fn parse_spend(cell: &str) -> Result<Option<f64>, String> {
    if is_missing(cell) {
        return Ok(None);
    }
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v)),
        Ok(v) => Err(format!("spend {v} must be a non-negative number")),
        Err(_) => Err(format!("unparseable spend {:?}", cell.trim())),
    }
}

fn parse_household_size(cell: &str) -> Result<Option<u32>, String> {
    if is_missing(cell) {
        return Ok(None);
    }
    let t = cell.trim();
    match t.parse::<f64>() {
        Ok(v) if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(Some(v as u32)),
        _ => Err(format!("household size {t:?} must be a positive integer")),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, SurveyError> {
    let file = std::fs::File::open(path).map_err(|source| SurveyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().flexible(true).from_reader(file))
}

fn column_index(headers: &csv::StringRecord, column: &str, path: &Path) -> Result<usize, SurveyError> {
    headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| SurveyError::MissingColumn {
            path: path.display().to_string(),
            column: column.to_string(),
        })
}

fn take<T>(
    report: &mut ParseReport,
    line: u64,
    column: &str,
    value: &str,
    parsed: Result<Option<T>, String>,
) -> Option<T> {
    parsed.unwrap_or_else(|message| {
        report.warnings.push(Warning {
            line,
            column: column.to_string(),
            value: value.to_string(),
            message,
        });
        None
    })
}

/// Reads one [`HouseholdRow`] per record of the households CSV. Blank or
/// missing-marker cells become `None`; unparseable cells are reported and
/// also become `None`. Rows without a cluster id are skipped with a warning.
pub fn parse_households(manifest: &SurveyManifest) -> Result<(Vec<HouseholdRow>, ParseReport), SurveyError> {
    let path = &manifest.households_csv;
    let csv_err = |source| SurveyError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let cols = &manifest.columns;
    let i_cluster = column_index(&headers, &cols.cluster_id, path)?;
    let i_phone = column_index(&headers, &cols.has_phone, path)?;
    let i_spend = column_index(&headers, &cols.spend, path)?;
    let i_size = cols
        .household_size
        .as_deref()
        .map(|c| column_index(&headers, c, path))
        .transpose()?;

    let mut rows = Vec::new();
    let mut report = ParseReport::default();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("");
        let cluster_id = cell(i_cluster).trim().to_string();
        if cluster_id.is_empty() {
            report.warnings.push(Warning {
                line,
                column: cols.cluster_id.clone(),
                value: String::new(),
                message: "row without cluster id skipped".into(),
            });
            continue;
        }
        let has_phone = take(&mut report, line, &cols.has_phone, cell(i_phone), parse_has_phone(cell(i_phone)));
        let phone_spend = take(&mut report, line, &cols.spend, cell(i_spend), parse_spend(cell(i_spend)));
        let household_size = match (i_size, cols.household_size.as_deref()) {
            (Some(i), Some(c)) => take(&mut report, line, c, cell(i), parse_household_size(cell(i))),
            _ => Some(1),
        };
        rows.push(HouseholdRow {
            cluster_id,
            has_phone,
            phone_spend,
            household_size,
        });
    }
    Ok((rows, report))
}

/// Reads cluster centroids from the coordinates CSV.
pub fn parse_coordinates(manifest: &SurveyManifest) -> Result<BTreeMap<String, LatLon>, SurveyError> {
    let path = &manifest.coords_csv;
    let csv_err = |source| SurveyError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let cols = &manifest.columns;
    let i_cluster = column_index(&headers, &cols.cluster_id, path)?;
    let i_lat = column_index(&headers, &cols.lat, path)?;
    let i_lon = column_index(&headers, &cols.lon, path)?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| SurveyError::BadCoordinate {
            path: path.display().to_string(),
            line,
            message,
        };
        let id = record.get(i_cluster).unwrap_or("").trim();
        if id.is_empty() {
            continue;
        }
        let num = |i: usize| -> Result<f64, SurveyError> {
            let t = record.get(i).unwrap_or("").trim();
            t.parse::<f64>().map_err(|_| bad(format!("unparseable coordinate {t:?}")))
        };
        let (lat, lon) = (num(i_lat)?, num(i_lon)?);
        let p = LatLon::validated(lat, lon).map_err(|e| bad(e.to_string()))?;
        out.insert(id.to_string(), p);
    }
    Ok(out)
}

/// Aggregates household rows into per-cluster metrics, ordered by cluster id.
///
/// Penetration counts only rows with a known phone answer. Spend per capita
/// averages `spend / household_size` over rows with a known household size,
/// with missing spend counted as zero. Clusters with no known phone answer
/// are dropped with a warning.
pub fn aggregate_clusters(
    rows: &[HouseholdRow],
    coords: &BTreeMap<String, LatLon>,
) -> Result<(Vec<ClusterRecord>, Vec<Warning>), SurveyError> {
    #[derive(Default)]
    struct Acc {
        yes: usize,
        answered: usize,
        spend: Vec<f64>,
    }
    let mut groups: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in rows {
        let acc = groups.entry(r.cluster_id.as_str()).or_default();
        if let Some(p) = r.has_phone {
            acc.answered += 1;
            acc.yes += usize::from(p);
        }
        if let Some(size) = r.household_size {
            acc.spend.push(r.phone_spend.unwrap_or(0.0) / f64::from(size));
        }
    }
    let missing: Vec<String> = groups
        .keys()
        .filter(|id| !coords.contains_key(**id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(SurveyError::MissingCentroids(missing));
    }
    let mut records = Vec::with_capacity(groups.len());
    let mut warnings = Vec::new();
    for (id, mut acc) in groups {
        let warn = |message: &str| Warning {
            line: 0,
            column: String::new(),
            value: id.to_string(),
            message: message.to_string(),
        };
        if acc.answered == 0 {
            warnings.push(warn("cluster excluded: no household answered phone ownership"));
            continue;
        }
        let spend_per_capita = if !acc.spend.is_empty() {
            // summed in sorted order so row order cannot change the result
            acc.spend.sort_by(f64::total_cmp);
            acc.spend.iter().sum::<f64>() / acc.spend.len() as f64
        } else {
            warnings.push(warn("no household size known; spend per capita set to 0"));
            0.0
        };
        let c = coords[id];
        records.push(ClusterRecord {
            cluster_id: id.to_string(),
            lat: c.lat,
            lon: c.lon,
            n_households: acc.answered,
            phone_penetration: acc.yes as f64 / acc.answered as f64,
            spend_per_capita,
        });
    }
    Ok((records, warnings))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub country: String,
    pub cluster_count: usize,
    pub expected_clusters: Option<usize>,
    pub penetration_range: Option<(f64, f64)>,
    pub spend_range: Option<(f64, f64)>,
    pub duplicate_ids: Vec<String>,
    pub out_of_range: Vec<String>,
    pub centroid_outliers: Vec<String>,
}

impl ValidationReport {
    pub fn count_ok(&self) -> bool {
        self.expected_clusters.is_none_or(|e| e == self.cluster_count)
    }

    pub fn is_clean(&self) -> bool {
        self.count_ok()
            && self.duplicate_ids.is_empty()
            && self.out_of_range.is_empty()
            && self.centroid_outliers.is_empty()
    }

    /// `key=value` rendering written next to `clusters.csv`.
    pub fn to_text(&self) -> String {
        let range = |r: Option<(f64, f64)>| r.map_or("none".to_string(), |(a, b)| format!("{a},{b}"));
        let list = |v: &[String]| v.join(",");
        let mut kv = KvMap::new();
        kv.set("country", &self.country);
        kv.set("cluster_count", self.cluster_count);
        kv.set(
            "expected_clusters",
            self.expected_clusters.map_or("none".to_string(), |e| e.to_string()),
        );
        kv.set("count_ok", self.count_ok());
        kv.set("penetration_range", range(self.penetration_range));
        kv.set("spend_range", range(self.spend_range));
        kv.set("duplicate_ids", list(&self.duplicate_ids));
        kv.set("out_of_range", list(&self.out_of_range));
        kv.set("centroid_outliers", list(&self.centroid_outliers));
        kv.set("clean", self.is_clean());
        kv.to_text()
    }
}

pub fn validate_survey(records: &[ClusterRecord], manifest: &SurveyManifest) -> ValidationReport {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(&r.cluster_id).or_default() += 1;
    }
    let mut duplicate_ids: Vec<String> = counts
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    duplicate_ids.sort();
    let range = |f: fn(&ClusterRecord) -> f64| {
        records.iter().map(f).fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        })
    };
    let out_of_range: BTreeSet<String> = records
        .iter()
        .filter(|r| {
            !(0.0..=1.0).contains(&r.phone_penetration)
                || !(r.spend_per_capita.is_finite() && r.spend_per_capita >= 0.0)
                || r.n_households == 0
        })
        .map(|r| r.cluster_id.clone())
        .collect();
    let centroid_outliers: BTreeSet<String> = records
        .iter()
        .filter(|r| {
            LatLon::validated(r.lat, r.lon).is_err()
                || manifest.bounds.is_some_and(|b| !b.contains(r.centroid()))
        })
        .map(|r| r.cluster_id.clone())
        .collect();
    ValidationReport {
        country: manifest.country.clone(),
        cluster_count: records.len(),
        expected_clusters: manifest.expected_clusters,
        penetration_range: range(|r| r.phone_penetration),
        spend_range: range(|r| r.spend_per_capita),
        duplicate_ids,
        out_of_range: out_of_range.into_iter().collect(),
        centroid_outliers: centroid_outliers.into_iter().collect(),
    }
}

/// Writes `clusters.csv`.
pub fn write_clusters(path: &Path, records: &[ClusterRecord]) -> Result<(), SurveyError> {
    let err = |source| SurveyError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "cluster_id",
        "lat",
        "lon",
        "n_households",
        "phone_penetration",
        "spend_per_capita",
    ])
    .map_err(err)?;
    for r in records {
        w.write_record([
            r.cluster_id.clone(),
            r.lat.to_string(),
            r.lon.to_string(),
            r.n_households.to_string(),
            r.phone_penetration.to_string(),
            r.spend_per_capita.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| SurveyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_clusters(path: &Path) -> Result<Vec<ClusterRecord>, SurveyError> {
    let err = |source| SurveyError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<Vec<ClusterRecord>, _>>().map_err(err)
}
