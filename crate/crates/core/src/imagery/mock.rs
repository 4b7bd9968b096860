use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ProviderError, RawImage, SceneMeta, SceneQuery, TileProvider, TILE_CHANNELS, TILE_SIZE};
use crate::geo::LatLon;

type SceneFn = dyn Fn(&SceneQuery) -> Vec<SceneMeta> + Send + Sync;
type RenderFn = dyn Fn(&SceneMeta, LatLon, u32) -> RawImage + Send + Sync;

/// Deterministic in-process provider with call counters and failure injection.
pub struct MockProvider {
    id: String,
    scenes: Box<SceneFn>,
    render: Box<RenderFn>,
    search_calls: AtomicUsize,
    download_calls: AtomicUsize,
    failing_searches: AtomicUsize,
    failing_downloads: AtomicUsize,
    reject_credentials: bool,
}

impl std::fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockProvider")
            .field("id", &self.id)
            .field("search_calls", &self.search_calls())
            .field("download_calls", &self.download_calls())
            .finish()
    }
}

/// One cloud-free, globally covering scene dated 2016-06-01.
pub fn default_scene() -> SceneMeta {
    SceneMeta {
        scene_id: "mock-20160601".into(),
        timestamp: Utc.with_ymd_and_hms(2016, 6, 1, 10, 30, 0).unwrap(),
        cloud_fraction: 0.0,
        footprint: vec![],
    }
}

impl MockProvider {
    pub fn new(render: impl Fn(&SceneMeta, LatLon, u32) -> RawImage + Send + Sync + 'static) -> Self {
        Self {
            id: "mock".into(),
            scenes: Box::new(|_| vec![default_scene()]),
            render: Box::new(render),
            search_calls: AtomicUsize::new(0),
            download_calls: AtomicUsize::new(0),
            failing_searches: AtomicUsize::new(0),
            failing_downloads: AtomicUsize::new(0),
            reject_credentials: false,
        }
    }

    /// Serves tiles with every byte equal to `value`.
    pub fn constant_gray(value: u8) -> Self {
        Self::new(move |_, _, _| RawImage {
            width: TILE_SIZE,
            height: TILE_SIZE,
            channels: TILE_CHANNELS,
            data: vec![value; TILE_SIZE * TILE_SIZE * TILE_CHANNELS],
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_scenes(mut self, scenes: impl Fn(&SceneQuery) -> Vec<SceneMeta> + Send + Sync + 'static) -> Self {
        self.scenes = Box::new(scenes);
        self
    }

    /// The first `n` searches fail with a transport error.
    pub fn failing_searches(self, n: usize) -> Self {
        self.failing_searches.store(n, Ordering::SeqCst);
        self
    }

    /// The first `n` downloads fail with a transport error.
    pub fn failing_downloads(self, n: usize) -> Self {
        self.failing_downloads.store(n, Ordering::SeqCst);
        self
    }

    pub fn rejecting_credentials(mut self) -> Self {
        self.reject_credentials = true;
        self
    }

    pub fn search_calls(&self) -> usize {
        self.search_calls.load(Ordering::SeqCst)
    }

    pub fn download_calls(&self) -> usize {
        self.download_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.search_calls() + self.download_calls()
    }

    pub fn reset_counters(&self) {
        self.search_calls.store(0, Ordering::SeqCst);
        self.download_calls.store(0, Ordering::SeqCst);
    }
}

fn take_failure(counter: &AtomicUsize) -> bool {
    counter
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
}

impl TileProvider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn search(&self, query: &SceneQuery) -> Result<Vec<SceneMeta>, ProviderError> {
        self.search_calls.fetch_add(1, Ordering::SeqCst);
        if self.reject_credentials {
            return Err(ProviderError::Credential("mock token rejected".into()));
        }
        if take_failure(&self.failing_searches) {
            return Err(ProviderError::Transport("injected search failure".into()));
        }
        Ok((self.scenes)(query))
    }

    fn download(&self, scene: &SceneMeta, p: LatLon, zoom: u32) -> Result<RawImage, ProviderError> {
        self.download_calls.fetch_add(1, Ordering::SeqCst);
        if self.reject_credentials {
            return Err(ProviderError::Credential("mock token rejected".into()));
        }
        if take_failure(&self.failing_downloads) {
            return Err(ProviderError::Transport("injected download failure".into()));
        }
        Ok((self.render)(scene, p, zoom))
    }
}

const BLOCK: usize = 8;

/// Synthetic 256×256 RGB scene. `development` in [0, 1] raises ground
/// brightness and the density of built-up blocks; `seed` only moves the
/// blocks around. Flat 8×8 blocks keep the PNG small.
pub fn render_synthetic_tile(development: f64, seed: u64) -> RawImage {
    let d = development.clamp(0.0, 1.0);
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * d).round() as u8;
    let ground = [mix(62.0, 182.0), mix(86.0, 176.0), mix(44.0, 166.0)];
    let roofs = [[232u8, 228, 220], [150, 70, 56]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = TILE_SIZE / BLOCK;
    let mut data = vec![0u8; TILE_SIZE * TILE_SIZE * TILE_CHANNELS];
    for br in 0..blocks {
        for bc in 0..blocks {
            let built = rng.random::<f64>() < 0.6 * d;
            let colour = if built { roofs[rng.random_range(0..2)] } else { ground };
            for r in br * BLOCK..(br + 1) * BLOCK {
                for c in bc * BLOCK..(bc + 1) * BLOCK {
                    let o = (r * TILE_SIZE + c) * TILE_CHANNELS;
                    data[o..o + TILE_CHANNELS].copy_from_slice(&colour);
                }
            }
        }
    }
    RawImage {
        width: TILE_SIZE,
        height: TILE_SIZE,
        channels: TILE_CHANNELS,
        data,
    }
}
