//! Minimal static SVG plots: an observed-versus-predicted scatter with
//! interval whiskers and a grid choropleth.

use std::fmt::Write as _;

use demandmap_core::geo::BBox;
use demandmap_core::regress::PointRow;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 48.0;

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Observed (x) against predicted (y) with vertical interval bars and the
/// identity line.
pub fn scatter_svg(title: &str, rows: &[PointRow]) -> String {
    let (lo, hi) = span(rows.iter().flat_map(|r| [r.observed, r.predicted, r.lower, r.upper]));
    let inner = SIZE - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - lo) / (hi - lo) * inner;
    let sy = |v: f64| SIZE - MARGIN - (v - lo) / (hi - lo) * inner;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for r in rows {
        let x = sx(r.observed);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#9ab" stroke-width="0.8"/>"##,
            sy(r.lower),
            sy(r.upper)
        );
        let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{:.2}" r="2.5" fill="#1f5f8b"/>"##, sy(r.predicted));
    }
    let label = |s: &mut String, x: f64, y: f64, text: String, anchor: &str| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{text}</text>"#
        );
    };
    label(&mut s, SIZE / 2.0, SIZE - 12.0, "observed".into(), "middle");
    label(&mut s, MARGIN, SIZE - MARGIN + 14.0, format!("{lo:.3}"), "start");
    label(&mut s, SIZE - MARGIN, SIZE - MARGIN + 14.0, format!("{hi:.3}"), "end");
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {})">predicted</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Linear white-to-blue ramp.
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(247.0, 8.0), c(251.0, 48.0), c(255.0, 107.0))
}

/// Cells coloured by value over the bounding box of all cells.
pub fn choropleth_svg(title: &str, cells: &[(BBox, f64)]) -> String {
    let (min_lat, max_lat) = span(cells.iter().flat_map(|(b, _)| [b.min_lat, b.max_lat]));
    let (min_lon, max_lon) = span(cells.iter().flat_map(|(b, _)| [b.min_lon, b.max_lon]));
    let (vlo, vhi) = span(cells.iter().map(|(_, v)| *v));
    let inner = SIZE - 2.0 * MARGIN;
    let scale = inner / (max_lat - min_lat).max(max_lon - min_lon);
    let px = |lon: f64| MARGIN + (lon - min_lon) * scale;
    let py = |lat: f64| MARGIN + (max_lat - lat) * scale;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{} ({vlo:.3} to {vhi:.3})</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    for (b, v) in cells {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            px(b.min_lon),
            py(b.max_lat),
            (b.max_lon - b.min_lon) * scale,
            (b.max_lat - b.min_lat) * scale,
            ramp((v - vlo) / (vhi - vlo))
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_has_one_marker_per_row() {
        let rows: Vec<PointRow> = (0..5)
            .map(|i| PointRow {
                id: i.to_string(),
                observed: i as f64,
                predicted: i as f64 + 0.1,
                lower: i as f64 - 1.0,
                upper: i as f64 + 1.0,
            })
            .collect();
        let svg = scatter_svg("a < b", &rows);
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn choropleth_handles_constant_values() {
        let b = BBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let svg = choropleth_svg("x", &[(b, 2.0), (b, 2.0)]);
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(!svg.contains("NaN"));
    }
}
