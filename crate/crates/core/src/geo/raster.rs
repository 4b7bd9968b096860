use std::io::Write;
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::tags::Tag;

use super::{BBox, GeoError};

const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_GDAL_NODATA: u16 = 42113;

/// Single-band north-up raster in WGS84 degrees.
///
/// `origin_lon`/`origin_lat` locate the outer north-west corner; row 0 is the
/// northernmost row and values are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub nodata: Option<f64>,
}

impl Raster {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        origin_lon: f64,
        origin_lat: f64,
        pixel_width: f64,
        pixel_height: f64,
        width: usize,
        height: usize,
        values: Vec<f64>,
        nodata: Option<f64>,
    ) -> Result<Self, GeoError> {
        if width * height != values.len() {
            return Err(GeoError::Raster(format!(
                "{width}x{height} raster given {} values",
                values.len()
            )));
        }
        if !(pixel_width > 0.0 && pixel_height > 0.0) {
            return Err(GeoError::Raster("pixel size must be positive".into()));
        }
        Ok(Self {
            origin_lon,
            origin_lat,
            pixel_width,
            pixel_height,
            width,
            height,
            values,
            nodata,
        })
    }

    pub fn extent(&self) -> BBox {
        BBox {
            min_lat: self.origin_lat - self.height as f64 * self.pixel_height,
            max_lat: self.origin_lat,
            min_lon: self.origin_lon,
            max_lon: self.origin_lon + self.width as f64 * self.pixel_width,
        }
    }

    /// Centre of pixel `(row, col)` as `(lat, lon)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_lat - (row as f64 + 0.5) * self.pixel_height,
            self.origin_lon + (col as f64 + 0.5) * self.pixel_width,
        )
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, v: f64) -> bool {
        v.is_finite() && self.nodata.is_none_or(|nd| v != nd)
    }

    /// Value of the pixel containing `(lat, lon)`, if valid.
    pub fn sample(&self, lat: f64, lon: f64) -> Option<f64> {
        let col = ((lon - self.origin_lon) / self.pixel_width).floor();
        let row = ((self.origin_lat - lat) / self.pixel_height).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        let v = self.get(row as usize, col as usize);
        self.is_valid(v).then_some(v)
    }

    /// Sum and count of valid pixels whose centres lie in `bbox` (closed).
    fn zonal_accumulate(&self, bbox: &BBox) -> (f64, usize) {
        let index_range = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            // one pixel of slack; the exact test below decides membership
            let a = (lo - 1.0).floor().max(0.0);
            let b = (hi + 1.0).ceil().min(n as f64 - 1.0);
            (a <= b).then_some((a as usize, b as usize))
        };
        let cols = index_range(
            (bbox.min_lon - self.origin_lon) / self.pixel_width - 0.5,
            (bbox.max_lon - self.origin_lon) / self.pixel_width - 0.5,
            self.width,
        );
        let rows = index_range(
            (self.origin_lat - bbox.max_lat) / self.pixel_height - 0.5,
            (self.origin_lat - bbox.min_lat) / self.pixel_height - 0.5,
            self.height,
        );
        let (Some((c0, c1)), Some((r0, r1))) = (cols, rows) else {
            return (0.0, 0);
        };
        let mut sum = 0.0;
        let mut count = 0;
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (lat, lon) = self.pixel_center(row, col);
                if lat < bbox.min_lat || lat > bbox.max_lat || lon < bbox.min_lon || lon > bbox.max_lon {
                    continue;
                }
                let v = self.get(row, col);
                if self.is_valid(v) {
                    sum += v;
                    count += 1;
                }
            }
        }
        (sum, count)
    }

    /// Mean of valid pixels whose centres fall inside `bbox`.
    pub fn zonal_mean(&self, bbox: &BBox) -> Result<f64, GeoError> {
        match self.zonal_accumulate(bbox) {
            (_, 0) => Err(GeoError::EmptyZone),
            (sum, n) => Ok(sum / n as f64),
        }
    }

    /// Sum of valid pixels whose centres fall inside `bbox`.
    pub fn zonal_sum(&self, bbox: &BBox) -> Result<f64, GeoError> {
        match self.zonal_accumulate(bbox) {
            (_, 0) => Err(GeoError::EmptyZone),
            (sum, _) => Ok(sum),
        }
    }

    /// Writes an ESRI ASCII grid.
    pub fn write_ascii(&self, path: &Path) -> Result<(), GeoError> {
        if (self.pixel_width - self.pixel_height).abs() > 1e-12 * self.pixel_width {
            return Err(GeoError::Raster("ESRI ASCII grids need square pixels".into()));
        }
        let io = |source| GeoError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let nodata = self.nodata.unwrap_or(-9999.0);
        write!(
            out,
            "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value {}\n",
            self.width,
            self.height,
            self.origin_lon,
            self.extent().min_lat,
            self.pixel_width,
            nodata
        )
        .map_err(io)?;
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| if v.is_finite() { v.to_string() } else { nodata.to_string() })
                .collect();
            writeln!(out, "{}", line.join(" ")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Reads an ESRI ASCII grid (`.asc`) or a single-band GeoTIFF (`.tif`).
pub fn read_raster(path: &Path) -> Result<Raster, GeoError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "tif" | "tiff" => read_geotiff(path),
        _ => {
            let text = std::fs::read_to_string(path).map_err(|source| GeoError::Io {
                path: path.display().to_string(),
                source,
            })?;
            parse_ascii_grid(&text)
        }
    }
}

pub(crate) fn parse_ascii_grid(text: &str) -> Result<Raster, GeoError> {
    let mut tokens = text.split_whitespace().peekable();
    let mut header = std::collections::HashMap::new();
    while let Some(tok) = tokens.peek() {
        if tok.parse::<f64>().is_ok() {
            break;
        }
        let key = tokens.next().unwrap().to_ascii_lowercase();
        let value = tokens
            .next()
            .ok_or_else(|| GeoError::Raster(format!("header key {key} has no value")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| GeoError::Raster(format!("header {key}: bad number {value:?}")))?;
        header.insert(key, value);
    }
    let need = |k: &str| {
        header
            .get(k)
            .copied()
            .ok_or_else(|| GeoError::Raster(format!("missing header {k}")))
    };
    let width = need("ncols")? as usize;
    let height = need("nrows")? as usize;
    let (dx, dy) = match header.get("cellsize") {
        Some(&c) => (c, c),
        None => (need("dx")?, need("dy")?),
    };
    let west = match header.get("xllcorner") {
        Some(&x) => x,
        None => need("xllcenter")? - 0.5 * dx,
    };
    let south = match header.get("yllcorner") {
        Some(&y) => y,
        None => need("yllcenter")? - 0.5 * dy,
    };
    let nodata = header.get("nodata_value").copied();
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|_| GeoError::Raster(format!("bad cell value {t:?}"))))
        .collect::<Result<_, _>>()?;
    Raster::new(west, south + height as f64 * dy, dx, dy, width, height, values, nodata)
}

fn read_geotiff(path: &Path) -> Result<Raster, GeoError> {
    let err = |e: tiff::TiffError| GeoError::Raster(format!("{}: {e}", path.display()));
    let file = std::fs::File::open(path).map_err(|source| GeoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut decoder = Decoder::new(std::io::BufReader::new(file)).map_err(err)?;
    let (width, height) = decoder.dimensions().map_err(err)?;
    let scale = decoder
        .get_tag_f64_vec(Tag::Unknown(TAG_MODEL_PIXEL_SCALE))
        .map_err(|_| GeoError::Raster("GeoTIFF lacks ModelPixelScale".into()))?;
    let tie = decoder
        .get_tag_f64_vec(Tag::Unknown(TAG_MODEL_TIEPOINT))
        .map_err(|_| GeoError::Raster("GeoTIFF lacks ModelTiepoint".into()))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(GeoError::Raster("malformed georeferencing tags".into()));
    }
    let nodata = decoder
        .get_tag_ascii_string(Tag::Unknown(TAG_GDAL_NODATA))
        .ok()
        .and_then(|s| s.trim_matches(char::from(0)).trim().parse::<f64>().ok());
    let values: Vec<f64> = match decoder.read_image().map_err(err)? {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        _ => return Err(GeoError::Raster("unsupported GeoTIFF sample type".into())),
    };
    let (width, height) = (width as usize, height as usize);
    if values.len() != width * height {
        return Err(GeoError::Raster(format!(
            "expected a single band of {width}x{height} samples, got {}",
            values.len()
        )));
    }
    let (dx, dy) = (scale[0], scale[1]);
    let west = tie[3] - tie[0] * dx;
    let north = tie[4] + tie[1] * dy;
    Raster::new(west, north, dx, dy, width, height, values, nodata)
}
