use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use demandmap_core::geo::{LatLon, SamplePoint};
use demandmap_core::imagery::{
    acquire_all, fetch_tile, query_scenes, AcquireOptions, HttpTileProvider, HttpTileProviderConfig, ImageryError,
    MockProvider, ProviderError, QueryArea, RawImage, RetryPolicy, SceneMeta, SceneQuery, TileCache, TileProvider,
    TILE_SIZE,
};

fn point(owner: &str, index: usize, lat: f64, lon: f64) -> SamplePoint {
    SamplePoint {
        owner_id: owner.into(),
        index,
        lat,
        lon,
    }
}

fn fast() -> AcquireOptions {
    AcquireOptions {
        max_inflight: 4,
        retry: RetryPolicy::immediate(3),
        keep_pixels: true,
    }
}

fn scene() -> SceneMeta {
    SceneMeta {
        scene_id: "s1".into(),
        timestamp: Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap(),
        cloud_fraction: 0.0,
        footprint: vec![],
    }
}

#[test]
fn constant_tile_and_cache_hit() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TileCache::open(dir.path()).unwrap();
    let provider = MockProvider::constant_gray(128);
    let p = point("c1", 0, -13.0, 34.0);
    let retry = RetryPolicy::immediate(1);
    let (tile, _) = fetch_tile(&provider, &cache, &scene(), &p, 14, &retry).unwrap();
    assert_eq!(tile.pixels.len(), TILE_SIZE * TILE_SIZE * 3);
    assert!(tile.pixels.iter().all(|&v| v == 128));
    provider.reset_counters();
    let (again, _) = fetch_tile(&provider, &cache, &scene(), &p, 14, &retry).unwrap();
    assert_eq!(provider.total_calls(), 0);
    assert_eq!(again, tile);
}

#[test]
fn wrong_payload_shape_is_rejected_and_not_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TileCache::open(dir.path()).unwrap();
    let provider = MockProvider::new(|_, _, _| RawImage {
        width: 255,
        height: 256,
        channels: 3,
        data: vec![0; 255 * 256 * 3],
    });
    let p = point("c1", 0, 0.0, 0.0);
    let err = fetch_tile(&provider, &cache, &scene(), &p, 14, &RetryPolicy::immediate(1)).unwrap_err();
    assert!(matches!(err, ImageryError::Integrity(_)), "{err}");
    let key = demandmap_core::imagery::tile_key("mock", "s1", p.location(), 14);
    assert!(!cache.contains(&key));
}

#[test]
fn point_outside_footprint_is_a_coverage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TileCache::open(dir.path()).unwrap();
    let mut s = scene();
    s.footprint = vec![
        LatLon::new(0.0, 0.0),
        LatLon::new(0.0, 1.0),
        LatLon::new(1.0, 1.0),
        LatLon::new(1.0, 0.0),
    ];
    let p = point("c1", 0, 5.0, 5.0);
    let err = fetch_tile(&MockProvider::constant_gray(1), &cache, &s, &p, 14, &RetryPolicy::immediate(1)).unwrap_err();
    assert!(matches!(err, ImageryError::Coverage { .. }));
}

/// Scenes over the cloudy box never pass the 5% filter.
fn cloudy_provider() -> MockProvider {
    MockProvider::new(|_, p, _| demandmap_core::imagery::render_synthetic_tile((p.lat + 14.0).clamp(0.0, 1.0), 1))
        .with_scenes(|q: &SceneQuery| {
            let QueryArea::Point(p) = q.area else { unreachable!() };
            let cloudy = p.lat > -12.05 && p.lon > 34.95;
            vec![
                SceneMeta {
                    cloud_fraction: if cloudy { 0.6 } else { 0.01 },
                    ..scene()
                },
                SceneMeta {
                    scene_id: "s0".into(),
                    timestamp: Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap(),
                    cloud_fraction: if cloudy { 0.3 } else { 0.0 },
                    footprint: vec![],
                },
            ]
        })
}

fn grid_points(clusters: usize, per: usize) -> Vec<SamplePoint> {
    let mut pts = Vec::new();
    for c in (0..clusters).rev() {
        for i in 0..per {
            pts.push(point(&format!("c{c:03}"), i, -13.0 + c as f64 * 0.01, 34.0 + i as f64 * 0.001));
        }
    }
    pts.push(point("cloud", 0, -12.0, 35.0));
    pts
}

#[test]
fn acquisition_is_best_effort_ordered_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TileCache::open(dir.path()).unwrap();
    let provider = cloudy_provider();
    let pts = grid_points(12, 5);
    let template = SceneQuery::at(LatLon::new(0.0, 0.0));
    let (tiles, report) = acquire_all(&provider, &cache, &pts, &template, &fast()).unwrap();
    assert_eq!(tiles.len(), 60);
    assert_eq!(report.entries.len(), 1);
    assert_eq!(report.entries[0].owner_id, "cloud");
    assert_eq!(report.downloaded.len(), 60);
    let order: Vec<(String, usize)> = tiles.iter().map(|t| (t.owner_id.clone(), t.index)).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);
    assert!(tiles.iter().all(|t| t.scene_id == "s1"));

    provider.reset_counters();
    let cloudy_only = cloudy_provider();
    let (again, report2) = acquire_all(&cloudy_only, &cache, &pts[..pts.len() - 1], &template, &fast()).unwrap();
    assert_eq!(again, tiles);
    assert!(report2.downloaded.is_empty());
    assert_eq!(cloudy_only.total_calls(), 0);
}

#[test]
fn returned_tiles_respect_query_limits() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TileCache::open(dir.path()).unwrap();
    let provider = MockProvider::constant_gray(50).with_scenes(|_| {
        vec![
            SceneMeta {
                scene_id: "future".into(),
                timestamp: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
                cloud_fraction: 0.0,
                footprint: vec![],
            },
            SceneMeta {
                scene_id: "hazy".into(),
                timestamp: Utc.with_ymd_and_hms(2016, 6, 1, 0, 0, 0).unwrap(),
                cloud_fraction: 0.051,
                footprint: vec![],
            },
            SceneMeta {
                scene_id: "ok".into(),
                timestamp: Utc.with_ymd_and_hms(2014, 6, 1, 0, 0, 0).unwrap(),
                cloud_fraction: 0.05,
                footprint: vec![],
            },
        ]
    });
    let q = SceneQuery::at(LatLon::new(0.0, 0.0));
    let (tiles, _) = acquire_all(&provider, &cache, &grid_points(3, 2)[..6], &q, &fast()).unwrap();
    assert!(tiles.iter().all(|t| t.scene_id == "ok"));
    let listed = query_scenes(&provider, &q, &RetryPolicy::immediate(1)).unwrap();
    assert!(listed.iter().all(|s| s.cloud_fraction <= 0.05 && s.timestamp >= q.start && s.timestamp <= q.end));
}

#[test]
fn transient_download_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TileCache::open(dir.path()).unwrap();
    let provider = MockProvider::constant_gray(7).failing_downloads(2);
    let p = point("c", 0, 1.0, 1.0);
    assert!(fetch_tile(&provider, &cache, &scene(), &p, 14, &RetryPolicy::immediate(3)).is_ok());
    assert_eq!(provider.download_calls(), 3);
}

/// Minimal HTTP/1.1 server answering each request via `respond`.
fn serve(respond: impl Fn(&str) -> (u16, &'static str, Vec<u8>) + Send + Sync + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if line.to_ascii_lowercase().starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (status, ctype, body) = respond(&format!("{path} {auth}"));
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
            let _ = stream.flush();
            let _ = reader.read(&mut [0u8; 0]);
        }
    });
    (format!("http://{addr}"), hits)
}

fn png(width: u32, height: u32, value: u8) -> Vec<u8> {
    let img = image::RgbImage::from_pixel(width, height, image::Rgb([value, value / 2, 3]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

#[test]
fn http_provider_point_template_and_auth() {
    let (base, _) = serve(|req| {
        if !req.contains("Bearer secret") {
            return (401, "text/plain", b"no".to_vec());
        }
        (200, "image/png", png(256, 256, 200))
    });
    let mut config = HttpTileProviderConfig::new(format!("{base}/tile?lat={{lat}}&lon={{lon}}&z={{zoom}}"));
    config.auth_token = Some("Bearer secret".into());
    let provider = HttpTileProvider::new(config.clone());
    let scenes = provider.search(&SceneQuery::at(LatLon::new(0.0, 0.0))).unwrap();
    let raw = provider.download(&scenes[0], LatLon::new(-13.0, 34.0), 14).unwrap();
    assert_eq!((raw.width, raw.height), (256, 256));
    assert_eq!(&raw.data[..3], &[200, 100, 3]);

    config.auth_token = Some("Bearer wrong".into());
    let denied = HttpTileProvider::new(config);
    assert!(matches!(
        denied.download(&scenes[0], LatLon::new(-13.0, 34.0), 14),
        Err(ProviderError::Credential(_))
    ));
}

#[test]
fn http_provider_stitches_web_mercator_tiles() {
    let (base, hits) = serve(|_| (200, "image/png", png(256, 256, 90)));
    let provider = HttpTileProvider::new(HttpTileProviderConfig::new(format!("{base}/{{z}}/{{x}}/{{y}}.png")));
    let raw = provider.download(&scene(), LatLon::new(-13.0, 34.0), 14).unwrap();
    assert_eq!((raw.width, raw.height, raw.data.len()), (256, 256, 256 * 256 * 3));
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[test]
fn http_server_errors_are_transport_errors() {
    let (base, hits) = serve(|_| (503, "text/plain", b"busy".to_vec()));
    let provider = HttpTileProvider::new(HttpTileProviderConfig::new(format!("{base}/t?lat={{lat}}")));
    let retry = RetryPolicy::immediate(3);
    let err = retry.run(|| provider.download(&scene(), LatLon::new(0.0, 0.0), 14)).unwrap_err();
    assert!(matches!(err, ProviderError::Transport(_)));
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}
