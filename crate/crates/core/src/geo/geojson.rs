use std::path::Path;

use serde_json::{json, Map, Value};

use super::{GeoError, GridCell, LatLon, Polygon};

/// Reads every Polygon/MultiPolygon in a GeoJSON document (FeatureCollection,
/// Feature or bare geometry). Coordinates are `[lon, lat]`.
pub fn read_boundary(path: &Path) -> Result<Vec<Polygon>, GeoError> {
    let text = std::fs::read_to_string(path).map_err(|source| GeoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_boundary_str(&text)
}

pub fn read_boundary_str(text: &str) -> Result<Vec<Polygon>, GeoError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| GeoError::Geometry(format!("invalid GeoJSON: {e}")))?;
    let mut out = Vec::new();
    collect(&doc, &mut out)?;
    if out.is_empty() {
        return Err(GeoError::Geometry("GeoJSON contains no polygons".into()));
    }
    Ok(out)
}

fn collect(v: &Value, out: &mut Vec<Polygon>) -> Result<(), GeoError> {
    match v.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => {
            for f in v.get("features").and_then(Value::as_array).into_iter().flatten() {
                collect(f, out)?;
            }
        }
        Some("Feature") => {
            if let Some(g) = v.get("geometry") {
                if !g.is_null() {
                    collect(g, out)?;
                }
            }
        }
        Some("GeometryCollection") => {
            for g in v.get("geometries").and_then(Value::as_array).into_iter().flatten() {
                collect(g, out)?;
            }
        }
        Some("Polygon") => out.push(polygon(coords(v)?)?),
        Some("MultiPolygon") => {
            for p in coords(v)?.as_array().into_iter().flatten() {
                out.push(polygon(p)?);
            }
        }
        _ => {}
    }
    Ok(())
}

fn coords(v: &Value) -> Result<&Value, GeoError> {
    v.get("coordinates")
        .ok_or_else(|| GeoError::Geometry("geometry without coordinates".into()))
}

fn polygon(rings: &Value) -> Result<Polygon, GeoError> {
    let rings = rings
        .as_array()
        .ok_or_else(|| GeoError::Geometry("polygon coordinates must be an array of rings".into()))?;
    let mut parsed = rings.iter().map(ring).collect::<Result<Vec<_>, _>>()?;
    if parsed.is_empty() {
        return Err(GeoError::Geometry("polygon without rings".into()));
    }
    let exterior = parsed.remove(0);
    Polygon::new(exterior, parsed)
}

fn ring(v: &Value) -> Result<Vec<LatLon>, GeoError> {
    v.as_array()
        .ok_or_else(|| GeoError::Geometry("ring must be an array of positions".into()))?
        .iter()
        .map(|pos| {
            let lon = pos.get(0).and_then(Value::as_f64);
            let lat = pos.get(1).and_then(Value::as_f64);
            match (lat, lon) {
                (Some(lat), Some(lon)) => Ok(LatLon::new(lat, lon)),
                _ => Err(GeoError::Geometry(format!("bad position {pos}"))),
            }
        })
        .collect()
}

/// FeatureCollection of cell outlines. `properties` supplies each feature's
/// property object.
pub fn cells_to_geojson<F>(cells: &[GridCell], mut properties: F) -> Value
where
    F: FnMut(&GridCell) -> Map<String, Value>,
{
    let features: Vec<Value> = cells
        .iter()
        .map(|c| {
            let ring: Vec<Value> = c.polygon().iter().map(|p| json!([p.lon, p.lat])).collect();
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": Value::Object(properties(c)),
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}
