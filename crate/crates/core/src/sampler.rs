//! Land-only point generation.
//!
//! Points are drawn uniformly in latitude/longitude inside a configurable
//! window and rejected when they fall on a water cell of a [`WaterMask`].
//! Each accepted point becomes the center of a square [`SceneFootprint`].

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Meters per degree of latitude on the spherical approximation.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

const MASK_MAGIC: &[u8; 4] = b"WMSK";
const MASK_HEADER_LEN: usize = 16;

static BUILTIN_MASK: &[u8] = include_bytes!("../assets/land_1deg.wmsk");

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("point {point}: {attempts} consecutive draws fell on water")]
    MaxRejectionsExceeded { point: usize, attempts: u64 },
    #[error("latitude {lat} is too close to a pole for a footprint")]
    PolarFootprint { lat: f64 },
    #[error("invalid water mask: {0}")]
    InvalidMask(String),
    #[error("malformed points file at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A WGS84 location in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, SamplerError> {
        let p = Self { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(SamplerError::InvalidConfig(format!("point ({lat}, {lon}) out of range")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Equirectangular binary grid, 1 = water, 0 = land.
///
/// Row 0 starts at +90° latitude and column 0 at −180° longitude. Bits are
/// stored exactly as in the mask file: row-major, most significant bit
/// first, each row padded to a byte boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaterMask {
    rows: usize,
    cols: usize,
    row_stride: usize,
    bits: Vec<u8>,
}

impl WaterMask {
    /// Builds a mask by evaluating `is_water(row, col)` for every cell.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut is_water: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, SamplerError> {
        Self::check_shape(rows, cols)?;
        let row_stride = cols.div_ceil(8);
        let mut bits = vec![0u8; rows * row_stride];
        for r in 0..rows {
            for c in 0..cols {
                if is_water(r, c) {
                    bits[r * row_stride + c / 8] |= 0x80 >> (c % 8);
                }
            }
        }
        Ok(Self { rows, cols, row_stride, bits })
    }

    pub fn all_land(rows: usize) -> Self {
        Self::from_fn(rows, rows * 2, |_, _| false).expect("valid shape")
    }

    pub fn all_water(rows: usize) -> Self {
        Self::from_fn(rows, rows * 2, |_, _| true).expect("valid shape")
    }

    /// The coarse 1°-per-cell land mask bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_bytes(BUILTIN_MASK).expect("bundled mask is valid")
    }

    fn check_shape(rows: usize, cols: usize) -> Result<(), SamplerError> {
        if rows == 0 || cols != rows * 2 {
            return Err(SamplerError::InvalidMask(format!(
                "{rows}x{cols} grid does not tile the globe with square cells"
            )));
        }
        Ok(())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, SamplerError> {
        if data.len() < MASK_HEADER_LEN || &data[..4] != MASK_MAGIC {
            return Err(SamplerError::InvalidMask("missing WMSK header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap()) as usize;
        let (rows, cols) = (word(4), word(8));
        Self::check_shape(rows, cols)?;
        let row_stride = cols.div_ceil(8);
        let payload = &data[MASK_HEADER_LEN..];
        if payload.len() != rows * row_stride {
            return Err(SamplerError::InvalidMask(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                rows * row_stride
            )));
        }
        Ok(Self { rows, cols, row_stride, bits: payload.to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MASK_HEADER_LEN + self.bits.len());
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SamplerError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SamplerError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_deg(&self) -> f64 {
        180.0 / self.rows as f64
    }

    /// Floor-indexed cell containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: GeoPoint) -> (usize, usize) {
        let cell = self.cell_deg();
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clamp((90.0 - p.lat) / cell, self.rows), clamp((p.lon + 180.0) / cell, self.cols))
    }

    pub fn is_water_cell(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.row_stride + col / 8] & (0x80 >> (col % 8)) != 0
    }

    pub fn land_fraction(&self) -> f64 {
        let land = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_water_cell(r, c))
            .count();
        land as f64 / (self.rows * self.cols) as f64
    }
}

/// True iff the mask cell holding `p` is land.
pub fn is_land(mask: &WaterMask, p: GeoPoint) -> bool {
    let (r, c) = mask.cell_of(p);
    !mask.is_water_cell(r, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_points: usize,
    pub seed: u64,
    pub lat_range: [f64; 2],
    pub lon_range: [f64; 2],
    /// Consecutive failed draws tolerated for a single point.
    pub max_rejections: u64,
    pub scene_size_px: u32,
    pub gsd_m: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_points: 1,
            seed: 0,
            lat_range: [-56.0, 84.0],
            lon_range: [-180.0, 180.0],
            max_rejections: 10_000,
            scene_size_px: 1000,
            gsd_m: 10.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |msg: String| Err(SamplerError::InvalidConfig(msg));
        let [lat_min, lat_max] = self.lat_range;
        let [lon_min, lon_max] = self.lon_range;
        if !(lat_min.is_finite() && lat_max.is_finite() && -90.0 <= lat_min && lat_max <= 90.0) {
            return bad(format!("latitude range [{lat_min}, {lat_max}] outside [-90, 90]"));
        }
        if lat_min > lat_max {
            return bad(format!("lat_min {lat_min} > lat_max {lat_max}"));
        }
        if !(lon_min.is_finite() && lon_max.is_finite() && -180.0 <= lon_min && lon_max <= 180.0) {
            return bad(format!("longitude range [{lon_min}, {lon_max}] outside [-180, 180]"));
        }
        if lon_min > lon_max {
            return bad(format!("lon_min {lon_min} > lon_max {lon_max}"));
        }
        if self.max_rejections == 0 {
            return bad("max_rejections must be at least 1".into());
        }
        if !(self.gsd_m.is_finite() && self.gsd_m > 0.0) {
            return bad(format!("gsd_m must be positive, got {}", self.gsd_m));
        }
        Ok(())
    }
}

/// Draws `cfg.n_points` land points, deterministic in `cfg.seed`.
pub fn generate_points(cfg: &SamplerConfig, mask: &WaterMask) -> Result<Vec<GeoPoint>, SamplerError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lat_min, lat_max] = cfg.lat_range;
    let [lon_min, lon_max] = cfg.lon_range;
    let mut points = Vec::with_capacity(cfg.n_points);
    for point in 0..cfg.n_points {
        let accepted = (0..cfg.max_rejections).find_map(|_| {
            let p = GeoPoint {
                lat: rng.random_range(lat_min..=lat_max),
                lon: rng.random_range(lon_min..=lon_max),
            };
            is_land(mask, p).then_some(p)
        });
        match accepted {
            Some(p) => points.push(p),
            None => {
                return Err(SamplerError::MaxRejectionsExceeded { point, attempts: cfg.max_rejections })
            }
        }
    }
    Ok(points)
}

/// Axis-aligned bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.lat_min <= other.lat_max
            && other.lat_min <= self.lat_max
            && self.lon_min <= other.lon_max
            && other.lon_min <= self.lon_max
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.lat_min + self.lat_max) / 2.0,
            lon: (self.lon_min + self.lon_max) / 2.0,
        }
    }
}

/// Square acquisition window centered on a generated point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFootprint {
    pub center: GeoPoint,
    pub size_px: u32,
    pub gsd_m: f64,
    pub bbox: BBox,
}

impl SceneFootprint {
    /// Degrees per pixel along latitude and longitude.
    pub fn pixel_deg(&self) -> (f64, f64) {
        if self.size_px == 0 {
            return (0.0, 0.0);
        }
        let n = self.size_px as f64;
        ((self.bbox.lat_max - self.bbox.lat_min) / n, (self.bbox.lon_max - self.bbox.lon_min) / n)
    }
}

/// Footprint spanning `size_px * gsd_m` meters on each axis around `p`.
pub fn footprint_of(p: GeoPoint, size_px: u32, gsd_m: f64) -> Result<SceneFootprint, SamplerError> {
    if !(gsd_m.is_finite() && gsd_m > 0.0) {
        return Err(SamplerError::InvalidConfig(format!("gsd_m must be positive, got {gsd_m}")));
    }
    if p.lat.abs() >= 89.0 {
        return Err(SamplerError::PolarFootprint { lat: p.lat });
    }
    let half_m = size_px as f64 * gsd_m / 2.0;
    let dlat = half_m / METERS_PER_DEGREE;
    let dlon = half_m / (METERS_PER_DEGREE * p.lat.to_radians().cos());
    Ok(SceneFootprint {
        center: p,
        size_px,
        gsd_m,
        bbox: BBox {
            lat_min: p.lat - dlat,
            lon_min: p.lon - dlon,
            lat_max: p.lat + dlat,
            lon_max: p.lon + dlon,
        },
    })
}

/// Writes the points CSV: `id,lat,lon`, six decimals, LF endings.
pub fn save_points(points: &[GeoPoint], path: impl AsRef<Path>) -> Result<(), SamplerError> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    out.write_all(points_csv(points).as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn points_csv(points: &[GeoPoint]) -> String {
    let mut s = String::with_capacity(16 + points.len() * 28);
    s.push_str("id,lat,lon\n");
    for (i, p) in points.iter().enumerate() {
        s.push_str(&format!("{i},{:.6},{:.6}\n", p.lat, p.lon));
    }
    s
}

pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<GeoPoint>, SamplerError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?;
    if headers.iter().collect::<Vec<_>>() != ["id", "lat", "lon"] {
        return Err(SamplerError::MalformedRow { line: 1, reason: "expected header `id,lat,lon`".into() });
    }
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64, SamplerError> {
            record
                .get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| SamplerError::MalformedRow { line, reason: format!("bad field {i}") })
        };
        if record.len() != 3 {
            return Err(SamplerError::MalformedRow { line, reason: "expected 3 fields".into() });
        }
        let p = GeoPoint { lat: field(1)?, lon: field(2)? };
        if !p.is_valid() {
            return Err(SamplerError::MalformedRow { line, reason: "coordinates out of range".into() });
        }
        points.push(p);
    }
    Ok(points)
}

fn csv_error(e: csv::Error) -> SamplerError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SamplerError::Io(io),
        other => SamplerError::MalformedRow { line, reason: format!("{other:?}") },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2x4 mask: left half of the globe water, right half land.
    fn split_mask() -> WaterMask {
        WaterMask::from_fn(2, 4, |_, c| c < 2).unwrap()
    }

    #[test]
    fn lookup_follows_cell_values() {
        let mask = split_mask();
        assert!(is_land(&mask, GeoPoint { lat: 10.0, lon: 45.0 }));
        assert!(!is_land(&mask, GeoPoint { lat: 10.0, lon: -45.0 }));
    }

    #[test]
    fn boundary_points_use_floor_rule() {
        // Scalar re-evaluation of the index formula on exact cell boundaries.
        let mask = WaterMask::from_fn(180, 360, |r, c| (r + c) % 2 == 0).unwrap();
        for &(lat, lon) in &[(0.0, 0.0), (45.0, -90.0), (-56.0, 179.0), (90.0, -180.0), (-90.0, 180.0)] {
            let row = ((90.0f64 - lat) / 1.0).floor().clamp(0.0, 179.0) as usize;
            let col = ((lon + 180.0f64) / 1.0).floor().clamp(0.0, 359.0) as usize;
            assert_eq!(mask.cell_of(GeoPoint { lat, lon }), (row, col), "({lat}, {lon})");
            assert_eq!(is_land(&mask, GeoPoint { lat, lon }), (row + col) % 2 == 1);
        }
    }

    #[test]
    fn mask_bytes_round_trip() {
        let mask = WaterMask::from_fn(3, 6, |r, c| r == c).unwrap();
        let bytes = mask.to_bytes();
        assert_eq!(&bytes[..4], b"WMSK");
        assert_eq!(bytes.len(), 16 + 3);
        assert_eq!(WaterMask::from_bytes(&bytes).unwrap(), mask);
        assert!(WaterMask::from_bytes(&bytes[..18]).is_err());
        assert!(WaterMask::from_fn(3, 5, |_, _| true).is_err());
    }

    #[test]
    fn builtin_mask_is_plausible() {
        let mask = WaterMask::builtin();
        assert_eq!((mask.rows(), mask.cols()), (180, 360));
        let land = mask.land_fraction();
        assert!((0.25..0.4).contains(&land), "land fraction {land}");
        assert!(is_land(&mask, GeoPoint { lat: 23.0, lon: 10.0 })); // Sahara
        assert!(!is_land(&mask, GeoPoint { lat: 0.0, lon: -30.0 })); // Atlantic
    }

    #[test]
    fn zero_points_is_empty() {
        let cfg = SamplerConfig { n_points: 0, ..Default::default() };
        assert!(generate_points(&cfg, &WaterMask::all_water(4)).unwrap().is_empty());
    }

    #[test]
    fn all_water_exhausts_rejections() {
        let cfg = SamplerConfig { n_points: 1, max_rejections: 50, ..Default::default() };
        let err = generate_points(&cfg, &WaterMask::all_water(4)).unwrap_err();
        assert!(matches!(err, SamplerError::MaxRejectionsExceeded { point: 0, attempts: 50 }));
    }

    #[test]
    fn generation_is_deterministic_and_on_land() {
        let mask = split_mask();
        let cfg = SamplerConfig { n_points: 500, seed: 9, ..Default::default() };
        let a = generate_points(&cfg, &mask).unwrap();
        let b = generate_points(&cfg, &mask).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| is_land(&mask, p) && p.lon >= 0.0));
        assert!(a.iter().all(|p| (-56.0..=84.0).contains(&p.lat)));
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = SamplerConfig { lat_range: [10.0, -10.0], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(SamplerError::InvalidConfig(_))));
        let cfg = SamplerConfig { lon_range: [-190.0, 0.0], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn footprint_spherical_extent() {
        let fp = footprint_of(GeoPoint { lat: 0.0, lon: 0.0 }, 1000, 10.0).unwrap();
        let d = 5000.0 / 111_320.0;
        assert!((fp.bbox.lat_max - d).abs() < 1e-12);
        assert!((fp.bbox.lon_max - d).abs() < 1e-12);
        assert!((d - 0.044915).abs() < 1e-6);

        let fp60 = footprint_of(GeoPoint { lat: 60.0, lon: 0.0 }, 1000, 10.0).unwrap();
        let dlon60 = fp60.bbox.lon_max - fp60.center.lon;
        assert!((dlon60 / d - 2.0).abs() < 1e-9);
        assert!((fp60.bbox.lat_max - fp60.center.lat - d).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_polar_footprints() {
        let p = GeoPoint { lat: 12.5, lon: -3.25 };
        let fp = footprint_of(p, 0, 10.0).unwrap();
        assert_eq!(fp.bbox.center(), p);
        assert_eq!((fp.bbox.lat_min, fp.bbox.lat_max), (p.lat, p.lat));
        assert!(matches!(
            footprint_of(GeoPoint { lat: 89.0, lon: 0.0 }, 10, 10.0),
            Err(SamplerError::PolarFootprint { .. })
        ));
        assert!(footprint_of(GeoPoint { lat: -89.5, lon: 0.0 }, 0, 10.0).is_err());
    }

    #[test]
    fn csv_format_is_exact() {
        let csv = points_csv(&[GeoPoint { lat: 12.345678, lon: -71.000001 }, GeoPoint { lat: 0.5, lon: 1.0 }]);
        assert_eq!(csv, "id,lat,lon\n0,12.345678,-71.000001\n1,0.500000,1.000000\n");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        save_points(&[], &path).unwrap();
        assert!(load_points(&path).unwrap().is_empty());

        let p = GeoPoint { lat: 12.345678, lon: -71.000001 };
        save_points(&[p], &path).unwrap();
        let back = load_points(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].lat - p.lat).abs() < 5e-7 && (back[0].lon - p.lon).abs() < 5e-7);

        fs::write(&path, "id,lat,lon\n0,abc,1.0\n").unwrap();
        assert!(matches!(load_points(&path), Err(SamplerError::MalformedRow { line: 2, .. })));
        fs::write(&path, "id,lat,lon\n0,91.0,1.0\n").unwrap();
        assert!(matches!(load_points(&path), Err(SamplerError::MalformedRow { .. })));
        fs::write(&path, "x,y\n").unwrap();
        assert!(load_points(&path).is_err());
    }
}
