use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use image::GenericImageView;

use super::{ProviderError, QueryArea, RawImage, SceneMeta, SceneQuery, TileProvider, TILE_CHANNELS, TILE_SIZE};
use crate::geo::LatLon;

#[derive(Debug, Clone)]
pub struct HttpTileProviderConfig {
    pub provider_id: String,
    /// Either point-centred (`{lat}`, `{lon}`, `{zoom}`, `{scene}`) or a
    /// web-mercator tile template (`{z}`, `{x}`, `{y}`, `{scene}`).
    pub url_template: String,
    /// Returns a JSON array of scenes; `{lat}`, `{lon}`, `{start}`, `{end}`,
    /// `{max_cloud}` are substituted. Without it one static scene is assumed.
    pub search_url: Option<String>,
    pub auth_header: String,
    pub auth_token: Option<String>,
    pub static_scene_time: DateTime<Utc>,
    pub timeout: Duration,
}

impl HttpTileProviderConfig {
    pub fn new(url_template: impl Into<String>) -> Self {
        Self {
            provider_id: "http".into(),
            url_template: url_template.into(),
            search_url: None,
            auth_header: "Authorization".into(),
            auth_token: None,
            static_scene_time: Utc.with_ymd_and_hms(2016, 12, 31, 0, 0, 0).unwrap(),
            timeout: Duration::from_secs(30),
        }
    }
}

/// Generic tile server client.
pub struct HttpTileProvider {
    config: HttpTileProviderConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpTileProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTileProvider")
            .field("provider_id", &self.config.provider_id)
            .field("url_template", &self.config.url_template)
            .finish()
    }
}

impl HttpTileProvider {
    pub fn new(config: HttpTileProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn get(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        let mut req = self.agent.get(url);
        if let Some(token) = &self.config.auth_token {
            req = req.header(self.config.auth_header.as_str(), token.as_str());
        }
        let mut resp = req.call().map_err(|e| ProviderError::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_to_vec()
                .map_err(|e| ProviderError::Transport(format!("{url}: {e}"))),
            401 | 403 => Err(ProviderError::Credential(format!("{url}: HTTP {status}"))),
            429 | 500..=599 => Err(ProviderError::Transport(format!("{url}: HTTP {status}"))),
            _ => Err(ProviderError::Other(format!("{url}: HTTP {status}"))),
        }
    }

    fn is_slippy(&self) -> bool {
        self.config.url_template.contains("{x}") && self.config.url_template.contains("{y}")
    }

    fn fetch_slippy(&self, scene: &SceneMeta, p: LatLon, zoom: u32) -> Result<RawImage, ProviderError> {
        let n = 2f64.powi(zoom as i32);
        let lat = p.lat.to_radians();
        let px = (p.lon + 180.0) / 360.0 * n * TILE_SIZE as f64;
        let py = (1.0 - (lat.tan() + 1.0 / lat.cos()).ln() / std::f64::consts::PI) / 2.0 * n * TILE_SIZE as f64;
        let left = (px - TILE_SIZE as f64 / 2.0).round() as i64;
        let top = (py - TILE_SIZE as f64 / 2.0).round() as i64;
        let tx0 = left.div_euclid(TILE_SIZE as i64);
        let ty0 = top.div_euclid(TILE_SIZE as i64);
        let (ox, oy) = ((left - tx0 * TILE_SIZE as i64) as usize, (top - ty0 * TILE_SIZE as i64) as usize);
        let span = 2 * TILE_SIZE;
        let mut mosaic = vec![0u8; span * span * TILE_CHANNELS];
        let wrap = n as i64;
        for dy in 0..2 {
            for dx in 0..2 {
                let x = (tx0 + dx).rem_euclid(wrap);
                let y = (ty0 + dy).clamp(0, wrap - 1);
                let url = self
                    .config
                    .url_template
                    .replace("{z}", &zoom.to_string())
                    .replace("{x}", &x.to_string())
                    .replace("{y}", &y.to_string())
                    .replace("{scene}", &scene.scene_id);
                let img = decode(&self.get(&url)?)?;
                if img.width != TILE_SIZE || img.height != TILE_SIZE {
                    return Ok(img);
                }
                for r in 0..TILE_SIZE {
                    let dst = ((dy as usize * TILE_SIZE + r) * span + dx as usize * TILE_SIZE) * TILE_CHANNELS;
                    let src = r * TILE_SIZE * TILE_CHANNELS;
                    mosaic[dst..dst + TILE_SIZE * TILE_CHANNELS]
                        .copy_from_slice(&img.data[src..src + TILE_SIZE * TILE_CHANNELS]);
                }
            }
        }
        let mut data = Vec::with_capacity(TILE_SIZE * TILE_SIZE * TILE_CHANNELS);
        for r in 0..TILE_SIZE {
            let o = ((oy + r) * span + ox) * TILE_CHANNELS;
            data.extend_from_slice(&mosaic[o..o + TILE_SIZE * TILE_CHANNELS]);
        }
        Ok(RawImage {
            width: TILE_SIZE,
            height: TILE_SIZE,
            channels: TILE_CHANNELS,
            data,
        })
    }
}

fn decode(bytes: &[u8]) -> Result<RawImage, ProviderError> {
    let img = image::load_from_memory(bytes).map_err(|e| ProviderError::Other(format!("undecodable tile: {e}")))?;
    let (w, h) = img.dimensions();
    Ok(RawImage {
        width: w as usize,
        height: h as usize,
        channels: TILE_CHANNELS,
        data: img.to_rgb8().into_raw(),
    })
}

fn query_point(q: &SceneQuery) -> LatLon {
    match q.area {
        QueryArea::Point(p) => p,
        QueryArea::Box(b) => b.center(),
    }
}

impl TileProvider for HttpTileProvider {
    fn id(&self) -> &str {
        &self.config.provider_id
    }

    fn search(&self, query: &SceneQuery) -> Result<Vec<SceneMeta>, ProviderError> {
        let Some(template) = &self.config.search_url else {
            return Ok(vec![SceneMeta {
                scene_id: format!("{}-static", self.config.provider_id),
                timestamp: self.config.static_scene_time,
                cloud_fraction: 0.0,
                footprint: vec![],
            }]);
        };
        let p = query_point(query);
        let url = template
            .replace("{lat}", &p.lat.to_string())
            .replace("{lon}", &p.lon.to_string())
            .replace("{start}", &query.start.to_rfc3339())
            .replace("{end}", &query.end.to_rfc3339())
            .replace("{max_cloud}", &query.max_cloud_fraction.to_string());
        let body = self.get(&url)?;
        serde_json::from_slice(&body).map_err(|e| ProviderError::Other(format!("scene list: {e}")))
    }

    fn download(&self, scene: &SceneMeta, p: LatLon, zoom: u32) -> Result<RawImage, ProviderError> {
        if self.is_slippy() {
            return self.fetch_slippy(scene, p, zoom);
        }
        let url = self
            .config
            .url_template
            .replace("{lat}", &p.lat.to_string())
            .replace("{lon}", &p.lon.to_string())
            .replace("{zoom}", &zoom.to_string())
            .replace("{scene}", &scene.scene_id);
        decode(&self.get(&url)?)
    }
}
