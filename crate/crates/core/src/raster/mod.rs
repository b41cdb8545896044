//! In-memory rasters and their file formats.
//!
//! All samples are held as `f32` regardless of the source bit depth; the
//! GeoTIFF reader converts integer layouts on load.

use std::collections::BTreeMap;
use std::io;

mod geotiff;
mod png_io;

pub use geotiff::{decode_geotiff, encode_geotiff, read_geotiff, read_geotiff_header, write_geotiff, RasterHeader};
pub use png_io::{read_png, write_png, write_png_gray, write_png_rgb, PngImage};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("raster dimensions must be non-zero, got {width}x{height}")]
    Empty { width: usize, height: usize },
    #[error("band `{band}` has {got} samples, expected {expected}")]
    PlaneSize { band: String, expected: usize, got: usize },
    #[error("duplicate band name `{0}`")]
    DuplicateBand(String),
    #[error("band `{0}` not present")]
    MissingBand(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Top-left origin and pixel size, both in degrees.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeoTransform {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub pixel_lat_deg: f64,
    pub pixel_lon_deg: f64,
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self { origin_lat: 0.0, origin_lon: 0.0, pixel_lat_deg: 1.0, pixel_lon_deg: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    pub data: Vec<f32>,
}

/// A multi-band `f32` pixel grid with a nodata sentinel.
///
/// Planes are row-major, `width * height` samples each. Rasters are not
/// mutated after construction; transformations build new ones.
#[derive(Debug, Clone)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    nodata: f32,
    geo: GeoTransform,
    metadata: BTreeMap<String, String>,
}

impl PartialEq for Raster {
    /// Bitwise sample comparison, so NaN nodata compares equal to itself.
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self.geo == other.geo
            && self.metadata == other.metadata
            && self.bands.len() == other.bands.len()
            && self.bands.iter().zip(&other.bands).all(|(a, b)| {
                a.name == b.name
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<(String, Vec<f32>)>,
        nodata: f32,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty { width, height });
        }
        let expected = width * height;
        let mut out: Vec<Band> = Vec::with_capacity(bands.len());
        for (name, data) in bands {
            if data.len() != expected {
                return Err(RasterError::PlaneSize { band: name, expected, got: data.len() });
            }
            if out.iter().any(|b| b.name == name) {
                return Err(RasterError::DuplicateBand(name));
            }
            out.push(Band { name, data });
        }
        Ok(Self {
            width,
            height,
            bands: out,
            nodata,
            geo: GeoTransform::default(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_geo(mut self, geo: GeoTransform) -> Self {
        self.geo = geo;
        self
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band_names(&self) -> Vec<&str> {
        self.bands.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn band(&self, name: &str) -> Option<&[f32]> {
        self.bands.iter().find(|b| b.name == name).map(|b| b.data.as_slice())
    }

    pub fn has_band(&self, name: &str) -> bool {
        self.bands.iter().any(|b| b.name == name)
    }

    /// Whether `v` is the nodata sentinel (NaN-aware).
    pub fn is_nodata(&self, v: f32) -> bool {
        if self.nodata.is_nan() {
            v.is_nan()
        } else {
            v == self.nodata
        }
    }

    /// A raster holding only `names`, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Raster, RasterError> {
        let bands = names
            .iter()
            .map(|&n| {
                self.band(n)
                    .map(|d| (n.to_string(), d.to_vec()))
                    .ok_or_else(|| RasterError::MissingBand(n.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Raster::new(self.width, self.height, bands, self.nodata)?
            .with_geo(self.geo)
            .with_metadata(self.metadata.clone()))
    }

    /// Same grid and metadata with every band replaced by `f(name, plane)`.
    pub fn map_bands(&self, mut f: impl FnMut(&str, &[f32]) -> Vec<f32>) -> Raster {
        let bands = self
            .bands
            .iter()
            .map(|b| {
                let data = f(&b.name, &b.data);
                assert_eq!(data.len(), self.pixel_count(), "map_bands must preserve plane size");
                Band { name: b.name.clone(), data }
            })
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            bands,
            nodata: self.nodata,
            geo: self.geo,
            metadata: self.metadata.clone(),
        }
    }

    pub fn into_bands(self) -> Vec<Band> {
        self.bands
    }
}

/// Maps a unit-interval value to `0..=255`: clamp, scale, round half away
/// from zero. NaN maps to 0.
pub fn quantize_u8(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_bounds_and_midpoint() {
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(-0.3), 0);
        assert_eq!(quantize_u8(7.0), 255);
        assert_eq!(quantize_u8(f64::NAN), 0);
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_u8(lo) <= quantize_u8(hi));
        }

        #[test]
        fn quantize_is_idempotent_on_grid(k in 0u8..=255) {
            let x = k as f64 / 255.0;
            prop_assert_eq!(quantize_u8(x), k);
            prop_assert_eq!(quantize_u8(quantize_u8(x) as f64 / 255.0), k);
        }
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(matches!(Raster::new(0, 3, vec![], f32::NAN), Err(RasterError::Empty { .. })));
        let err = Raster::new(2, 2, vec![("a".into(), vec![0.0; 3])], f32::NAN).unwrap_err();
        assert!(matches!(err, RasterError::PlaneSize { expected: 4, got: 3, .. }));
        let err = Raster::new(1, 1, vec![("a".into(), vec![0.0]), ("a".into(), vec![1.0])], 0.0).unwrap_err();
        assert!(matches!(err, RasterError::DuplicateBand(_)));
    }

    #[test]
    fn select_and_nodata() {
        let r = Raster::new(2, 1, vec![("x".into(), vec![1.0, f32::NAN]), ("y".into(), vec![2.0, 3.0])], f32::NAN)
            .unwrap();
        let y = r.select(&["y"]).unwrap();
        assert_eq!(y.band_names(), ["y"]);
        assert!(r.select(&["z"]).is_err());
        assert!(r.is_nodata(r.band("x").unwrap()[1]));
        assert!(!r.is_nodata(1.0));
        let doubled = r.map_bands(|_, p| p.iter().map(|v| v * 2.0).collect());
        assert_eq!(doubled.band("y").unwrap(), &[4.0, 6.0]);
        assert_eq!(doubled.width(), 2);
    }
}
