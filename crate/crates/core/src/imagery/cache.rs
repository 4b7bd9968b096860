use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use sha2::{Digest, Sha256};

use super::{ImageTile, ImageryError, QueryArea, SceneMeta, SceneQuery, TILE_SIZE};
use crate::geo::{LatLon, SamplePoint};
use crate::kv::KvMap;

const LOCK_STRIPES: usize = 64;

/// Content-addressed tile key.
pub fn tile_key(provider_id: &str, scene_id: &str, p: LatLon, zoom: u32) -> String {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0]);
    h.update(scene_id.as_bytes());
    h.update([0]);
    h.update(p.lat.to_bits().to_le_bytes());
    h.update(p.lon.to_bits().to_le_bytes());
    h.update(zoom.to_le_bytes());
    hex::encode(h.finalize())
}

/// Key of the scene chosen for a query, so warm runs skip the search.
pub fn selection_key(provider_id: &str, q: &SceneQuery) -> String {
    let mut h = Sha256::new();
    h.update(b"selection\0");
    h.update(provider_id.as_bytes());
    h.update([0]);
    match q.area {
        QueryArea::Point(p) => {
            h.update([0]);
            h.update(p.lat.to_bits().to_le_bytes());
            h.update(p.lon.to_bits().to_le_bytes());
        }
        QueryArea::Box(b) => {
            h.update([1]);
            for v in [b.min_lat, b.max_lat, b.min_lon, b.max_lon] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    h.update(q.start.timestamp().to_le_bytes());
    h.update(q.end.timestamp().to_le_bytes());
    h.update(q.max_cloud_fraction.to_bits().to_le_bytes());
    h.update(q.zoom.to_le_bytes());
    hex::encode(h.finalize())
}

/// On-disk tile store: `tiles/<k0k1>/<key>.png` with a `.meta` key=value
/// sidecar. Writes go through a temp file and a rename, so readers never see
/// partial files; writers to one key are serialized by a striped lock.
#[derive(Debug)]
pub struct TileCache {
    root: PathBuf,
    stripes: Vec<Mutex<()>>,
    counter: AtomicU64,
}

impl TileCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ImageryError> {
        let root = root.into();
        for sub in ["tiles", "selections", "tmp"] {
            fs::create_dir_all(root.join(sub)).map_err(|e| cache_err(&root.join(sub), e))?;
        }
        Ok(Self {
            root,
            stripes: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
            counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock_key(&self, key: &str) -> MutexGuard<'_, ()> {
        let stripe = u8::from_str_radix(&key[..2.min(key.len())], 16).unwrap_or(0) as usize % LOCK_STRIPES;
        self.stripes[stripe].lock().unwrap_or_else(|p| p.into_inner())
    }

    fn tile_dir(&self, key: &str) -> PathBuf {
        self.root.join("tiles").join(&key[..2])
    }

    pub fn png_path(&self, key: &str) -> PathBuf {
        self.tile_dir(key).join(format!("{key}.png"))
    }

    pub fn meta_path(&self, key: &str) -> PathBuf {
        self.tile_dir(key).join(format!("{key}.meta"))
    }

    fn selection_path(&self, key: &str) -> PathBuf {
        self.root.join("selections").join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.png_path(key).is_file() && self.meta_path(key).is_file()
    }

    /// Removes both files of an entry; missing files are ignored.
    pub fn purge(&self, key: &str) {
        let _ = fs::remove_file(self.png_path(key));
        let _ = fs::remove_file(self.meta_path(key));
    }

    fn atomic_write(&self, dest: &Path, bytes: &[u8]) -> Result<(), ImageryError> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .root
            .join("tmp")
            .join(format!("{}.{}.{n}", std::process::id(), dest.file_name().and_then(|s| s.to_str()).unwrap_or("f")));
        let write = || -> std::io::Result<()> {
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
            fs::rename(&tmp, dest)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            cache_err(dest, e)
        })
    }

    /// Stores a tile. The caller holds the key lock.
    pub fn write(&self, key: &str, tile: &ImageTile) -> Result<(), ImageryError> {
        let mut png = Vec::new();
        PngEncoder::new_with_quality(&mut png, CompressionType::Fast, FilterType::Adaptive)
            .write_image(&tile.pixels, TILE_SIZE as u32, TILE_SIZE as u32, ExtendedColorType::Rgb8)
            .map_err(|e| ImageryError::Integrity(format!("png encode: {e}")))?;
        let mut meta = KvMap::default();
        meta.set("scene_id", &tile.scene_id);
        meta.set("timestamp", tile.timestamp.to_rfc3339());
        meta.set("lat", format!("{:?}", tile.lat));
        meta.set("lon", format!("{:?}", tile.lon));
        meta.set("zoom", tile.zoom.to_string());
        // Sidecar last: an entry counts as present only once both exist.
        self.atomic_write(&self.png_path(key), &png)?;
        self.atomic_write(&self.meta_path(key), meta.to_text().as_bytes())
    }

    /// Reads an entry for `point`. Unreadable entries are purged and reported
    /// as absent.
    pub fn read(&self, key: &str, point: &SamplePoint) -> Result<Option<ImageTile>, ImageryError> {
        if !self.contains(key) {
            return Ok(None);
        }
        match self.decode(key, point) {
            Ok(tile) => Ok(Some(tile)),
            Err(_) => {
                self.purge(key);
                Ok(None)
            }
        }
    }

    fn decode(&self, key: &str, point: &SamplePoint) -> Result<ImageTile, String> {
        let meta = KvMap::read(&self.meta_path(key)).map_err(|e| e.to_string())?;
        let field = |k: &str| meta.get(k).map(str::to_string).ok_or_else(|| format!("missing {k}"));
        let timestamp: DateTime<Utc> = DateTime::parse_from_rfc3339(&field("timestamp")?)
            .map_err(|e| e.to_string())?
            .with_timezone(&Utc);
        let parse_f = |k: &str| -> Result<f64, String> { field(k)?.parse().map_err(|e| format!("{k}: {e}")) };
        let bytes = fs::read(self.png_path(key)).map_err(|e| e.to_string())?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
        if img.width() as usize != TILE_SIZE || img.height() as usize != TILE_SIZE {
            return Err(format!("cached tile is {}x{}", img.width(), img.height()));
        }
        Ok(ImageTile {
            tile_id: point.key(),
            owner_id: point.owner_id.clone(),
            index: point.index,
            lat: parse_f("lat")?,
            lon: parse_f("lon")?,
            zoom: field("zoom")?.parse().map_err(|e| format!("zoom: {e}"))?,
            scene_id: field("scene_id")?,
            timestamp,
            pixels: img.to_rgb8().into_raw(),
        })
    }

    pub fn read_selection(&self, key: &str) -> Option<SceneMeta> {
        let text = fs::read_to_string(self.selection_path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write_selection(&self, key: &str, scene: &SceneMeta) -> Result<(), ImageryError> {
        let json = serde_json::to_vec(scene).map_err(|e| ImageryError::Cache {
            path: key.to_string(),
            message: e.to_string(),
        })?;
        self.atomic_write(&self.selection_path(key), &json)
    }
}

fn cache_err(path: &Path, e: std::io::Error) -> ImageryError {
    ImageryError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
