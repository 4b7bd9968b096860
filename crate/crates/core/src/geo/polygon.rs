use super::{BBox, GeoError, LatLon};

/// A polygon with an exterior ring and optional holes. Rings are stored open
/// (the closing vertex is not repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<LatLon>,
    pub holes: Vec<Vec<LatLon>>,
}

impl Polygon {
    /// Builds a polygon, dropping closing duplicates and validating every ring.
    pub fn new(exterior: Vec<LatLon>, holes: Vec<Vec<LatLon>>) -> Result<Self, GeoError> {
        let exterior = open_ring(exterior);
        let holes: Vec<_> = holes.into_iter().map(open_ring).collect();
        validate_ring(&exterior)?;
        for h in &holes {
            validate_ring(h)?;
        }
        Ok(Self { exterior, holes })
    }

    pub fn bounds(&self) -> BBox {
        let mut b = BBox {
            min_lat: f64::INFINITY,
            max_lat: f64::NEG_INFINITY,
            min_lon: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
        };
        for p in &self.exterior {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        b
    }

    /// Even-odd containment over the exterior and holes.
    pub fn contains(&self, p: LatLon) -> bool {
        point_in_polygon(&self.exterior, p) && !self.holes.iter().any(|h| point_in_polygon(h, p))
    }

    /// Area (degree²) of the intersection with an axis-aligned box.
    pub fn clipped_area(&self, bbox: &BBox) -> f64 {
        let outer = ring_area(&clip_ring(&self.exterior, bbox)).abs();
        let holes: f64 = self
            .holes
            .iter()
            .map(|h| ring_area(&clip_ring(h, bbox)).abs())
            .sum();
        (outer - holes).max(0.0)
    }
}

fn open_ring(mut ring: Vec<LatLon>) -> Vec<LatLon> {
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

/// Even-odd ray casting test.
pub fn point_in_polygon(ring: &[LatLon], p: LatLon) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Signed shoelace area in (lon, lat) space.
fn ring_area(ring: &[LatLon]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        s += a.lon * b.lat - b.lon * a.lat;
    }
    0.5 * s
}

/// Sutherland-Hodgman clip of a ring against an axis-aligned box.
fn clip_ring(ring: &[LatLon], bbox: &BBox) -> Vec<LatLon> {
    #[derive(Clone, Copy)]
    enum Edge {
        MinLon,
        MaxLon,
        MinLat,
        MaxLat,
    }
    let inside = |p: LatLon, e: Edge| match e {
        Edge::MinLon => p.lon >= bbox.min_lon,
        Edge::MaxLon => p.lon <= bbox.max_lon,
        Edge::MinLat => p.lat >= bbox.min_lat,
        Edge::MaxLat => p.lat <= bbox.max_lat,
    };
    let cross = |a: LatLon, b: LatLon, e: Edge| -> LatLon {
        match e {
            Edge::MinLon | Edge::MaxLon => {
                let x = if matches!(e, Edge::MinLon) { bbox.min_lon } else { bbox.max_lon };
                let t = (x - a.lon) / (b.lon - a.lon);
                LatLon::new(a.lat + t * (b.lat - a.lat), x)
            }
            Edge::MinLat | Edge::MaxLat => {
                let y = if matches!(e, Edge::MinLat) { bbox.min_lat } else { bbox.max_lat };
                let t = (y - a.lat) / (b.lat - a.lat);
                LatLon::new(y, a.lon + t * (b.lon - a.lon))
            }
        }
    };
    let mut out: Vec<LatLon> = ring.to_vec();
    for e in [Edge::MinLon, Edge::MaxLon, Edge::MinLat, Edge::MaxLat] {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            match (inside(cur, e), inside(prev, e)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross(prev, cur, e));
                    out.push(cur);
                }
                (false, true) => out.push(cross(prev, cur, e)),
                (false, false) => {}
            }
        }
    }
    out
}

fn orient(a: LatLon, b: LatLon, c: LatLon) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: LatLon, b: LatLon, p: LatLon) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(a: LatLon, b: LatLon, c: LatLon, d: LatLon) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Rejects rings with fewer than three distinct vertices, non-finite
/// coordinates, or intersections between non-adjacent edges.
fn validate_ring(ring: &[LatLon]) -> Result<(), GeoError> {
    if ring.len() < 3 {
        return Err(GeoError::Geometry(format!(
            "ring has {} distinct vertices, need at least 3",
            ring.len()
        )));
    }
    if let Some(p) = ring.iter().find(|p| !p.lat.is_finite() || !p.lon.is_finite()) {
        return Err(GeoError::Geometry(format!("non-finite vertex ({}, {})", p.lat, p.lon)));
    }
    if ring_area(ring) == 0.0 {
        return Err(GeoError::Geometry("ring has zero area".into()));
    }
    let n = ring.len();
    // sweep over edges ordered by their minimum longitude
    let mut order: Vec<usize> = (0..n).collect();
    let min_lon = |i: usize| ring[i].lon.min(ring[(i + 1) % n].lon);
    let max_lon = |i: usize| ring[i].lon.max(ring[(i + 1) % n].lon);
    order.sort_by(|&a, &b| min_lon(a).total_cmp(&min_lon(b)));
    let mut active: Vec<usize> = Vec::new();
    for &i in &order {
        let lo = min_lon(i);
        active.retain(|&j| max_lon(j) >= lo);
        for &j in &active {
            let adjacent = (i + 1) % n == j || (j + 1) % n == i;
            if adjacent {
                continue;
            }
            if segments_intersect(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return Err(GeoError::Geometry(format!(
                    "ring self-intersects between edges {} and {}",
                    i.min(j),
                    i.max(j)
                )));
            }
        }
        active.push(i);
    }
    Ok(())
}
