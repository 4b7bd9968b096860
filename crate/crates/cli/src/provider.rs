//! Tile provider construction from configuration.

use std::sync::Arc;
use std::time::Duration;

use demandmap_core::derive_seed;
use demandmap_core::geo::read_raster;
use demandmap_core::imagery::{
    default_scene, render_synthetic_tile, HttpTileProvider, HttpTileProviderConfig, MockProvider, QueryArea, RetryPolicy,
    SceneMeta, TileProvider,
};

use crate::config::{DownloadConfig, PipelineConfig, ProviderConfig};
use crate::error::{PipelineError, Result};

/// Cloud fraction reported for scenes inside the mock's cloudy box.
const CLOUDY_FRACTION: f64 = 0.5;

pub fn retry_policy(d: &DownloadConfig) -> RetryPolicy {
    RetryPolicy {
        attempts: d.retry_attempts,
        base_delay: Duration::from_millis(d.retry_base_ms),
        jitter: 0.5,
    }
}

/// Seed for the mock's block layout at a location.
fn location_seed(lat: f64, lon: f64) -> u64 {
    derive_seed(0, &format!("{lat:.7},{lon:.7}"))
}

pub fn build_provider(cfg: &PipelineConfig) -> Result<Box<dyn TileProvider>> {
    match &cfg.provider {
        ProviderConfig::Mock {
            id,
            brightness_raster,
            cloudy_box,
        } => {
            let raster = cfg.require_file(Some(brightness_raster), "provider.mock.brightness_raster")?;
            let raster = Arc::new(read_raster(&raster)?);
            let cloudy = *cloudy_box;
            let provider = MockProvider::new(move |_, p, _| {
                let d = raster.sample(p.lat, p.lon).unwrap_or(0.0);
                render_synthetic_tile(d, location_seed(p.lat, p.lon))
            })
            .with_id(id.clone())
            .with_scenes(move |q| {
                let at = match q.area {
                    QueryArea::Point(p) => Some(p),
                    QueryArea::Box(b) => Some(b.center()),
                };
                match (cloudy, at) {
                    (Some(b), Some(p)) if b.contains(p) => vec![SceneMeta {
                        scene_id: "mock-cloudy".into(),
                        cloud_fraction: CLOUDY_FRACTION,
                        ..default_scene()
                    }],
                    _ => vec![default_scene()],
                }
            });
            Ok(Box::new(provider))
        }
        ProviderConfig::Http {
            id,
            url_template,
            search_url,
            token_env,
            auth_header,
            timeout_s,
        } => {
            let token = match token_env {
                None => None,
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    PipelineError::Provider(format!("credential variable {var} is not set"))
                })?),
            };
            let mut c = HttpTileProviderConfig::new(url_template.clone());
            c.provider_id = id.clone();
            c.search_url = search_url.clone();
            c.auth_header = auth_header.clone();
            c.auth_token = token;
            c.timeout = Duration::from_secs(*timeout_s);
            Ok(Box::new(HttpTileProvider::new(c)))
        }
    }
}
