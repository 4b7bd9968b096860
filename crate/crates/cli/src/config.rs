//! Pipeline configuration: a flat `key=value` file with dotted section
//! prefixes. Relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use demandmap_cnn::saliency::SaliencyMode;
use demandmap_cnn::{BackboneSpec, TrainingConfig};
use demandmap_core::geo::BBox;
use demandmap_core::imagery::{default_date_range, DEFAULT_MAX_CLOUD, DEFAULT_MAX_INFLIGHT, DEFAULT_ZOOM};
use demandmap_core::kv::KvMap;
use demandmap_core::labeling::{SplitKind, DEFAULT_FOLDS};
use demandmap_core::regress::{default_lambda_grid, DEFAULT_Z};
use demandmap_core::Metric;
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

const KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "cache_dir",
    "boundary",
    "raster.population",
    "raster.nightlight",
    "split",
    "metrics",
    "download.points_per_cluster",
    "download.box_km",
    "download.zoom",
    "download.max_cloud",
    "download.max_inflight",
    "download.retry_attempts",
    "download.retry_base_ms",
    "download.start",
    "download.end",
    "provider.kind",
    "provider.id",
    "provider.mock.brightness_raster",
    "provider.mock.cloudy_box",
    "provider.http.url_template",
    "provider.http.search_url",
    "provider.http.token_env",
    "provider.http.auth_header",
    "provider.http.timeout_s",
    "cnn.width_scale",
    "cnn.weights",
    "cnn.init_seed",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs_frozen",
    "train.epochs_full",
    "train.loss_alpha",
    "train.crop_size",
    "train.tiles_per_cluster",
    "fit.folds",
    "fit.lambda_grid",
    "fit.z",
    "fit.baseline_box_km",
    "gridmap.cell_km",
    "gridmap.min_population",
    "gridmap.points_per_cell",
    "explain.tiles",
    "explain.target",
    "explain.mode",
    "explain.metric",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadConfig {
    pub points_per_cluster: usize,
    pub box_km: f64,
    pub zoom: u32,
    pub max_cloud: f64,
    pub max_inflight: usize,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderConfig {
    /// Offline provider rendering tiles from a development raster.
    Mock {
        id: String,
        brightness_raster: PathBuf,
        cloudy_box: Option<BBox>,
    },
    Http {
        id: String,
        url_template: String,
        search_url: Option<String>,
        /// Name of the environment variable holding the token.
        token_env: Option<String>,
        auth_header: String,
        timeout_s: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    pub z: f64,
    pub baseline_box_km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridmapConfig {
    pub cell_km: f64,
    pub min_population: f64,
    pub points_per_cell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    pub tiles: Vec<String>,
    /// Defaults to each tile's training bin.
    pub target: Option<usize>,
    pub mode: SaliencyMode,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub path: PathBuf,
    pub raw: KvMap,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    /// Country name to survey manifest.
    pub surveys: BTreeMap<String, PathBuf>,
    pub boundary: Option<PathBuf>,
    pub population_raster: Option<PathBuf>,
    pub nightlight_raster: Option<PathBuf>,
    pub split: SplitKind,
    pub metrics: Vec<Metric>,
    pub download: DownloadConfig,
    pub provider: ProviderConfig,
    pub backbone: BackboneSpec,
    pub training: TrainingConfig,
    /// Caps the tiles per cluster used for fine-tuning; features always use
    /// every tile.
    pub train_tiles_per_cluster: Option<usize>,
    pub fit: FitConfig,
    pub gridmap: GridmapConfig,
    pub explain: ExplainConfig,
}

fn invalid(key: &str, value: &str, reason: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("key `{key}`: cannot use {value:?} ({reason})"))
}

fn parse_date(kv: &KvMap, key: &str, default: DateTime<Utc>, end_of_day: bool) -> Result<DateTime<Utc>> {
    let Some(text) = kv.get(key) else {
        return Ok(default);
    };
    let date = NaiveDate::parse_from_str(text, "%Y-%m-%d").map_err(|e| invalid(key, text, e))?;
    let time = if end_of_day {
        date.and_hms_opt(23, 59, 59)
    } else {
        date.and_hms_opt(0, 0, 0)
    };
    Ok(time.expect("valid wall time").and_utc())
}

fn parse_split(text: &str) -> Result<SplitKind> {
    if let Some(country) = text.strip_prefix("country:") {
        if country.is_empty() {
            return Err(invalid("split", text, "empty country"));
        }
        return Ok(SplitKind::CountryHoldout {
            country: country.to_string(),
        });
    }
    let pct = text
        .strip_prefix("random")
        .and_then(|p| p.parse::<u32>().ok())
        .filter(|p| (1..100).contains(p))
        .ok_or_else(|| invalid("split", text, "expected randomNN or country:<name>"))?;
    Ok(SplitKind::Random { fraction_percent: pct })
}

impl PipelineConfig {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(PipelineError::Config(format!("config file {} not found", path.display())));
        }
        let kv = KvMap::read(path)?;
        Self::from_kv(kv, path)
    }

    pub fn from_kv(kv: KvMap, path: &Path) -> Result<Self> {
        for (k, _) in kv.iter() {
            if !KEYS.contains(&k) && !k.starts_with("survey.") {
                return Err(PipelineError::Config(format!("unknown key `{k}`")));
            }
        }
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let opt_path = |key: &str| kv.get(key).map(resolve);
        let survey_section = kv.section("survey.");
        let surveys: BTreeMap<String, PathBuf> = survey_section
            .iter()
            .map(|(country, p)| (country.to_string(), resolve(p)))
            .collect();
        let metrics = match kv.get("metrics") {
            None => Metric::ALL.to_vec(),
            Some(text) => text
                .split(',')
                .map(|m| m.trim().parse::<Metric>().map_err(|e| invalid("metrics", text, e)))
                .collect::<Result<Vec<_>>>()?,
        };
        if metrics.is_empty() {
            return Err(invalid("metrics", "", "no metric selected"));
        }
        let (start, end) = default_date_range();
        let download = DownloadConfig {
            points_per_cluster: kv.parse_or("download.points_per_cluster", 20)?,
            box_km: kv.parse_or("download.box_km", 10.0)?,
            zoom: kv.parse_or("download.zoom", DEFAULT_ZOOM)?,
            max_cloud: kv.parse_or("download.max_cloud", DEFAULT_MAX_CLOUD)?,
            max_inflight: kv.parse_or("download.max_inflight", DEFAULT_MAX_INFLIGHT)?,
            retry_attempts: kv.parse_or("download.retry_attempts", 3)?,
            retry_base_ms: kv.parse_or("download.retry_base_ms", 1000)?,
            start: parse_date(&kv, "download.start", start, false)?,
            end: parse_date(&kv, "download.end", end, true)?,
        };
        if download.points_per_cluster == 0 || !(download.box_km > 0.0) || download.retry_attempts == 0 {
            return Err(PipelineError::Config(
                "download.points_per_cluster, download.box_km and download.retry_attempts must be positive".into(),
            ));
        }
        let provider = match kv.get("provider.kind").unwrap_or("mock") {
            "mock" => ProviderConfig::Mock {
                id: kv.get("provider.id").unwrap_or("mock").to_string(),
                brightness_raster: opt_path("provider.mock.brightness_raster").ok_or_else(|| {
                    PipelineError::Config("provider.kind=mock needs provider.mock.brightness_raster".into())
                })?,
                cloudy_box: match kv.get("provider.mock.cloudy_box") {
                    None => None,
                    Some(t) => Some(BBox::parse(t).map_err(|e| invalid("provider.mock.cloudy_box", t, e))?),
                },
            },
            "http" => ProviderConfig::Http {
                id: kv.get("provider.id").unwrap_or("http").to_string(),
                url_template: kv.require("provider.http.url_template")?.to_string(),
                search_url: kv.get("provider.http.search_url").map(str::to_string),
                token_env: kv.get("provider.http.token_env").map(str::to_string),
                auth_header: kv.get("provider.http.auth_header").unwrap_or("Authorization").to_string(),
                timeout_s: kv.parse_or("provider.http.timeout_s", 30)?,
            },
            other => return Err(invalid("provider.kind", other, "expected mock or http")),
        };
        let backbone = BackboneSpec {
            width_scale: kv.parse_or("cnn.width_scale", 1.0)?,
            weights: opt_path("cnn.weights"),
            init_seed: kv.parse_or("cnn.init_seed", 0)?,
            ..BackboneSpec::default()
        };
        backbone.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let defaults = TrainingConfig::default();
        let training = TrainingConfig {
            learning_rate: kv.parse_or("train.learning_rate", defaults.learning_rate)?,
            batch_size: kv.parse_or("train.batch_size", defaults.batch_size)?,
            epochs_frozen: kv.parse_or("train.epochs_frozen", defaults.epochs_frozen)?,
            epochs_full: kv.parse_or("train.epochs_full", defaults.epochs_full)?,
            loss_alpha: kv.parse_or("train.loss_alpha", defaults.loss_alpha)?,
            crop_size: kv.parse_or("train.crop_size", defaults.crop_size)?,
            ..defaults
        };
        training.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let lambda_grid = match kv.get("fit.lambda_grid") {
            None => default_lambda_grid(),
            Some(text) => text
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| invalid("fit.lambda_grid", text, e)))
                .collect::<Result<Vec<_>>>()?,
        };
        if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(PipelineError::Config("fit.lambda_grid must list non-negative values".into()));
        }
        let fit = FitConfig {
            folds: kv.parse_or("fit.folds", DEFAULT_FOLDS)?,
            lambda_grid,
            z: kv.parse_or("fit.z", DEFAULT_Z)?,
            baseline_box_km: kv.parse_or("fit.baseline_box_km", download.box_km)?,
        };
        let gridmap = GridmapConfig {
            cell_km: kv.parse_or("gridmap.cell_km", 10.0)?,
            min_population: kv.parse_or("gridmap.min_population", 100.0)?,
            points_per_cell: kv.parse_or("gridmap.points_per_cell", download.points_per_cluster)?,
        };
        if gridmap.points_per_cell == 0 {
            return Err(PipelineError::Config("gridmap.points_per_cell must be positive".into()));
        }
        let explain = ExplainConfig {
            tiles: kv
                .get("explain.tiles")
                .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                .unwrap_or_default(),
            target: match kv.get("explain.target") {
                None => None,
                Some(_) => Some(kv.parse_required::<usize>("explain.target")?),
            },
            mode: kv
                .parse_or("explain.mode", SaliencyMode::Paper)
                .map_err(|e| PipelineError::Config(e.to_string()))?,
            metric: kv.parse_or("explain.metric", Metric::Penetration)?,
        };
        Ok(Self {
            path: path.to_path_buf(),
            seed: kv.parse_or("seed", 0)?,
            output_dir: opt_path("output_dir").unwrap_or_else(|| base.join("out")),
            cache_dir: opt_path("cache_dir").unwrap_or_else(|| base.join("cache")),
            surveys,
            boundary: opt_path("boundary"),
            population_raster: opt_path("raster.population"),
            nightlight_raster: opt_path("raster.nightlight"),
            split: parse_split(kv.get("split").unwrap_or("random30"))?,
            metrics,
            download,
            provider,
            backbone,
            training,
            train_tiles_per_cluster: match kv.get("train.tiles_per_cluster") {
                None => None,
                Some(_) => Some(kv.parse_required::<usize>("train.tiles_per_cluster")?),
            },
            fit,
            gridmap,
            explain,
            raw: kv,
        })
    }

    /// Overrides the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.raw.set("seed", seed);
        self
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.raw.to_text().as_bytes()))
    }

    /// Hash of the seed and every key under the given prefixes.
    pub fn section_hash(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(format!("seed={}\n", self.seed));
        for (k, v) in self.raw.iter() {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn require_file(&self, path: Option<&PathBuf>, key: &str) -> Result<PathBuf> {
        let p = path.ok_or_else(|| PipelineError::Config(format!("`{key}` is not set")))?;
        if !p.is_file() {
            return Err(PipelineError::Config(format!("`{key}`: {} not found", p.display())));
        }
        Ok(p.clone())
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_dir.join(stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::from_kv(KvMap::parse(text).unwrap(), Path::new("/work/config.txt"))
    }

    const MIN: &str = "provider.mock.brightness_raster=dev.asc\n";

    #[test]
    fn defaults_and_resolution() {
        let c = cfg(MIN).unwrap();
        assert_eq!(c.download.points_per_cluster, 20);
        assert_eq!(c.download.zoom, 14);
        assert_eq!(c.training.learning_rate, 3e-6);
        assert_eq!(c.output_dir, PathBuf::from("/work/out"));
        assert_eq!(c.split, SplitKind::random30());
        assert_eq!(c.metrics, Metric::ALL.to_vec());
        match c.provider {
            ProviderConfig::Mock { brightness_raster, .. } => assert_eq!(brightness_raster, PathBuf::from("/work/dev.asc")),
            _ => panic!("mock expected"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(cfg(&format!("{MIN}downlaod.zoom=3\n")), Err(PipelineError::Config(_))));
        assert!(cfg(&format!("{MIN}split=random0\n")).is_err());
        assert!(cfg(&format!("{MIN}cnn.width_scale=2\n")).is_err());
        assert!(cfg(&format!("{MIN}train.crop_size=300\n")).is_err());
        assert!(cfg("provider.kind=ftp\n").is_err());
    }

    #[test]
    fn split_and_surveys() {
        let c = cfg(&format!("{MIN}split=country:ethiopia\nsurvey.malawi=m.txt\nsurvey.ethiopia=/abs/e.txt\n")).unwrap();
        assert_eq!(
            c.split,
            SplitKind::CountryHoldout {
                country: "ethiopia".into()
            }
        );
        assert_eq!(c.surveys["malawi"], PathBuf::from("/work/m.txt"));
        assert_eq!(c.surveys["ethiopia"], PathBuf::from("/abs/e.txt"));
    }

    #[test]
    fn section_hash_tracks_only_its_keys() {
        let a = cfg(MIN).unwrap();
        let b = cfg(&format!("{MIN}fit.z=2.5\n")).unwrap();
        assert_eq!(a.section_hash(&["download."]), b.section_hash(&["download."]));
        assert_ne!(a.section_hash(&["fit."]), b.section_hash(&["fit."]));
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.section_hash(&["fit."]), a.clone().with_seed(9).section_hash(&["fit."]));
    }
}
