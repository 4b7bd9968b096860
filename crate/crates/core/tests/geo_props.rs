use demandmap_core::geo::{bbox_around, grid_country, point_in_polygon, BBox, LatLon, Polygon, Raster};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sphere radius for which one degree of arc is 111.32 km.
const R_KM: f64 = 6378.137;

fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R_KM * h.sqrt().asin()
}

fn edge_lengths(b: &BBox) -> [f64; 3] {
    let mid = (b.min_lat + b.max_lat) / 2.0;
    [
        haversine_km(LatLon::new(b.min_lat, b.min_lon), LatLon::new(b.max_lat, b.min_lon)),
        haversine_km(LatLon::new(mid, b.min_lon), LatLon::new(mid, b.max_lon)),
        haversine_km(LatLon::new(b.max_lat, b.min_lon), LatLon::new(b.max_lat, b.max_lon)),
    ]
}

#[test]
fn ten_km_boxes_measure_ten_km() {
    for lat in [0.0, 30.0, -30.0, 60.0, -60.0] {
        let b = bbox_around(LatLon::new(lat, 17.0), 10.0).unwrap();
        for (i, e) in edge_lengths(&b).iter().enumerate() {
            assert!((e - 10.0).abs() / 10.0 < 0.005, "lat {lat} edge {i}: {e} km");
        }
    }
    let eq = bbox_around(LatLon::new(0.0, 0.0), 10.0).unwrap();
    let [ns, ew, _] = edge_lengths(&eq);
    assert!((ns - 10.0).abs() < 0.01 && (ew - 10.0).abs() < 0.01);
}

proptest! {
    #[test]
    fn box_edges_within_tolerance_to_seventy(lat in -70.0f64..70.0, lon in -179.0f64..179.0, side in 1.0f64..20.0) {
        let b = bbox_around(LatLon::new(lat, lon), side).unwrap();
        let [ns, mid, _] = edge_lengths(&b);
        prop_assert!((ns - side).abs() / side < 0.005);
        prop_assert!((mid - side).abs() / side < 0.005);
    }

    #[test]
    fn box_is_centred(lat in -80.0f64..80.0, lon in -179.0f64..179.0) {
        let c = LatLon::new(lat, lon);
        let b = bbox_around(c, 10.0).unwrap();
        let m = b.center();
        prop_assert!((m.lat - lat).abs() < 1e-12 && (m.lon - lon).abs() < 1e-12);
        prop_assert!(b.contains(c));
    }
}

#[test]
fn polar_centroid_rejected() {
    assert!(bbox_around(LatLon::new(89.5, 0.0), 10.0).is_err());
    assert!(bbox_around(LatLon::new(f64::NAN, 0.0), 10.0).is_err());
}

/// Country of `n`×`n` cells whose east edge steps with each row's width, so
/// it tiles exactly under per-row longitude steps.
fn staircase_country(lat: f64, lon: f64, cell_km: f64, n: usize) -> Polygon {
    let dlat = cell_km / 111.32;
    let mut east = Vec::new();
    for row in 0..n {
        let centre = lat + (row as f64 + 0.5) * dlat;
        let width = n as f64 * cell_km / (111.32 * centre.to_radians().cos());
        east.push(LatLon::new(lat + row as f64 * dlat, lon + width));
        east.push(LatLon::new(lat + (row + 1) as f64 * dlat, lon + width));
    }
    let mut ring = vec![LatLon::new(lat, lon)];
    ring.extend(east);
    ring.push(LatLon::new(lat + n as f64 * dlat, lon));
    ring.dedup();
    Polygon::new(ring, vec![]).unwrap()
}

#[test]
fn hundred_cell_countries_grid_to_hundred_cells() {
    for (lat, lon) in [(0.0, 0.0), (-13.5, 34.0), (9.0, 38.5), (55.0, -3.0)] {
        for cell_km in [1.0, 10.0] {
            let cells = grid_country(&[staircase_country(lat, lon, cell_km, 10)], cell_km).unwrap();
            assert_eq!(cells.len(), 100, "at ({lat}, {lon}) with {cell_km} km cells");
        }
    }
    let square = bbox_around(LatLon::new(0.0, 20.0), 100.0).unwrap();
    let cells = grid_country(&[Polygon::new(square.ring(), vec![]).unwrap()], 10.0).unwrap();
    assert_eq!(cells.len(), 100);
}

/// Every interior sample point of the boundary lies in exactly one cell.
#[test]
fn grid_covers_boundary_once() {
    let ring = vec![
        LatLon::new(-12.0, 33.0),
        LatLon::new(-12.1, 33.6),
        LatLon::new(-11.5, 33.9),
        LatLon::new(-11.2, 33.4),
        LatLon::new(-11.6, 33.3),
    ];
    let poly = Polygon::new(ring.clone(), vec![]).unwrap();
    let cells = grid_country(std::slice::from_ref(&poly), 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = poly.bounds();
    let mut checked = 0;
    while checked < 2000 {
        let p = LatLon::new(rng.random_range(b.min_lat..b.max_lat), rng.random_range(b.min_lon..b.max_lon));
        if !point_in_polygon(&ring, p) {
            continue;
        }
        let hits = cells
            .iter()
            .filter(|c| {
                c.bbox.min_lat < p.lat && p.lat < c.bbox.max_lat && c.bbox.min_lon < p.lon && p.lon < c.bbox.max_lon
            })
            .count();
        assert_eq!(hits, 1, "point {p:?}");
        checked += 1;
    }
}

fn random_raster(rng: &mut ChaCha8Rng) -> Raster {
    let (w, h) = (rng.random_range(5..60), rng.random_range(5..60));
    let pw = rng.random_range(0.001..0.05);
    let values = (0..w * h)
        .map(|_| if rng.random::<f64>() < 0.05 { -9999.0 } else { rng.random_range(0.0..100.0) })
        .collect();
    Raster::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), pw, pw, w, h, values, Some(-9999.0))
        .unwrap()
}

/// Pixel-by-pixel enumeration of the whole raster.
fn brute_mean(r: &Raster, b: &BBox) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for row in 0..r.height {
        for col in 0..r.width {
            let lat = r.origin_lat - (row as f64 + 0.5) * r.pixel_height;
            let lon = r.origin_lon + (col as f64 + 0.5) * r.pixel_width;
            let v = r.values[row * r.width + col];
            if lat >= b.min_lat && lat <= b.max_lat && lon >= b.min_lon && lon <= b.max_lon && v != -9999.0 {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[test]
fn zonal_mean_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    for _ in 0..300 {
        let r = random_raster(&mut rng);
        let e = r.extent();
        let pad = 0.2 * (e.max_lat - e.min_lat);
        let lat = [rng.random_range(e.min_lat - pad..e.max_lat + pad), rng.random_range(e.min_lat - pad..e.max_lat + pad)];
        let lon = [rng.random_range(e.min_lon - pad..e.max_lon + pad), rng.random_range(e.min_lon - pad..e.max_lon + pad)];
        let Ok(b) = BBox::new(lat[0].min(lat[1]), lat[0].max(lat[1]), lon[0].min(lon[1]), lon[0].max(lon[1])) else {
            continue;
        };
        match (r.zonal_mean(&b), brute_mean(&r, &b)) {
            (Ok(got), Some(want)) => {
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
                compared += 1;
            }
            (Err(_), None) => {}
            (got, want) => panic!("zonal {got:?} vs brute {want:?}"),
        }
    }
    assert!(compared > 100);
}
