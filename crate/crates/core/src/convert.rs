//! Normalization of raw rasters and export to 8-bit PNG or passthrough TIFF.
//!
//! Three normalizations are available: min-max `(x - min) / (max - min)`,
//! standardization `(x - mean) / std` and max division `x / max`. The scalars
//! come from [`stats_of`] over the non-nodata samples in scope. PNG export
//! maps standardized values through a clip to ±3 and a linear map to [0, 1].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{quantize_u8, write_geotiff, write_png, PngImage, Raster, RasterError};
use crate::satellite::Satellite;
use crate::stage::{Progress, Stage};
use crate::store::{parse_relative, DatasetManifest, DatasetStore, FileKind, LayoutCoord, StoreError};

/// Standardized values are clipped to ±this many deviations before export.
pub const STD_CLIP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizationMode {
    MinMax,
    Standardize,
    MaxDiv,
    RawTiff,
}

impl NormalizationMode {
    pub fn name(self) -> &'static str {
        match self {
            NormalizationMode::MinMax => "minmax",
            NormalizationMode::Standardize => "std",
            NormalizationMode::MaxDiv => "max",
            NormalizationMode::RawTiff => "tiff",
        }
    }

    /// Kind of file written for converted images.
    pub fn output_kind(self) -> FileKind {
        match self {
            NormalizationMode::RawTiff => FileKind::ConvertedTiff,
            _ => FileKind::Converted,
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormalizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "minmax" | "min-max" => Ok(NormalizationMode::MinMax),
            "std" | "standardize" => Ok(NormalizationMode::Standardize),
            "max" | "maxdiv" => Ok(NormalizationMode::MaxDiv),
            "tiff" | "raw" | "rawtiff" => Ok(NormalizationMode::RawTiff),
            other => Err(format!("unknown mode `{other}` (expected minmax, std, max or tiff)")),
        }
    }
}

/// Which samples the normalization scalars are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsScope {
    /// One set of scalars over all rendered bands jointly.
    Image,
    /// Separate scalars per band.
    Band,
}

impl StatsScope {
    pub fn default_for(satellite: Satellite) -> Self {
        match satellite {
            Satellite::S1 => StatsScope::Image,
            Satellite::S2 => StatsScope::Band,
        }
    }
}

impl FromStr for StatsScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image" => Ok(StatsScope::Image),
            "band" => Ok(StatsScope::Band),
            other => Err(format!("unknown stats scope `{other}` (expected image or band)")),
        }
    }
}

impl fmt::Display for StatsScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatsScope::Image => "image",
            StatsScope::Band => "band",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConvertError {
    #[error("no valid samples in scope")]
    AllNodata,
    #[error("band `{0}` not present")]
    MissingBand(String),
    #[error("raw tiff mode has no normalization")]
    NoNormalization,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scalars over every non-nodata sample of the given planes.
pub fn stats_of_planes(planes: &[&[f32]], is_nodata: impl Fn(f32) -> bool) -> Result<ImageStats, ConvertError> {
    let valid = || planes.iter().flat_map(|p| p.iter()).copied().filter(|&v| !is_nodata(v) && !v.is_nan());
    let (mut n, mut sum, mut min, mut max) = (0u64, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for v in valid() {
        let v = v as f64;
        n += 1;
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    if n == 0 {
        return Err(ConvertError::AllNodata);
    }
    let mean = sum / n as f64;
    let var = valid().map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(ImageStats { min, max, mean: mean.clamp(min, max), std: var.sqrt() })
}

/// Scalars over the named bands of `r`.
pub fn stats_of(r: &Raster, bands: &[&str]) -> Result<ImageStats, ConvertError> {
    let planes = bands
        .iter()
        .map(|b| r.band(b).ok_or_else(|| ConvertError::MissingBand(b.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    stats_of_planes(&planes, |v| r.is_nodata(v))
}

/// A denominator that made a normalization undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    ZeroRange,
    ZeroStd,
    ZeroMax,
}

/// One normalization with its scalars bound.
#[derive(Debug, Clone, Copy)]
pub struct Normalizer {
    mode: NormalizationMode,
    stats: ImageStats,
}

impl Normalizer {
    pub fn new(mode: NormalizationMode, stats: ImageStats) -> Result<Self, ConvertError> {
        if mode == NormalizationMode::RawTiff {
            return Err(ConvertError::NoNormalization);
        }
        Ok(Self { mode, stats })
    }

    /// The zero denominator, if any; such normalizations output all zeros.
    pub fn degenerate(&self) -> Option<Degenerate> {
        let s = &self.stats;
        match self.mode {
            NormalizationMode::MinMax if s.max == s.min => Some(Degenerate::ZeroRange),
            NormalizationMode::Standardize if s.std == 0.0 => Some(Degenerate::ZeroStd),
            NormalizationMode::MaxDiv if s.max == 0.0 => Some(Degenerate::ZeroMax),
            _ => None,
        }
    }

    /// Normalized value of one sample.
    pub fn apply(&self, x: f32) -> f64 {
        if self.degenerate().is_some() {
            return 0.0;
        }
        let (x, s) = (x as f64, &self.stats);
        match self.mode {
            NormalizationMode::MinMax => (x - s.min) / (s.max - s.min),
            NormalizationMode::Standardize => (x - s.mean) / s.std,
            NormalizationMode::MaxDiv => x / s.max,
            NormalizationMode::RawTiff => x,
        }
    }

    /// Value in [0, 1] used for 8-bit export.
    pub fn export_unit(&self, x: f32) -> f64 {
        let y = self.apply(x);
        match self.mode {
            NormalizationMode::Standardize => (y.clamp(-STD_CLIP, STD_CLIP) + STD_CLIP) / (2.0 * STD_CLIP),
            _ => y,
        }
    }

    pub fn quantize(&self, x: f32) -> u8 {
        quantize_u8(self.export_unit(x))
    }
}

fn warn_degenerate(n: &Normalizer) {
    if let Some(d) = n.degenerate() {
        log::warn!("{:?} normalization is degenerate ({d:?}); writing zeros", n.mode);
    }
}

fn normalize(r: &Raster, stats: &ImageStats, mode: NormalizationMode) -> Raster {
    let n = Normalizer::new(mode, *stats).expect("normalizing mode");
    warn_degenerate(&n);
    r.map_bands(|_, plane| plane.iter().map(|&v| if r.is_nodata(v) { v } else { n.apply(v) as f32 }).collect())
}

/// Min-max normalization; nodata samples are kept.
pub fn normalize_minmax(r: &Raster, stats: &ImageStats) -> Raster {
    normalize(r, stats, NormalizationMode::MinMax)
}

/// Standardization; nodata samples are kept.
pub fn normalize_std(r: &Raster, stats: &ImageStats) -> Raster {
    normalize(r, stats, NormalizationMode::Standardize)
}

/// Division by the maximum; nodata samples are kept.
pub fn normalize_max(r: &Raster, stats: &ImageStats) -> Raster {
    normalize(r, stats, NormalizationMode::MaxDiv)
}

/// Normalizes and quantizes the satellite's render bands into an 8-bit
/// image: gray for S1, RGB (B4, B3, B2) for S2. Nodata pixels become 0.
pub fn render_u8(
    r: &Raster,
    satellite: Satellite,
    mode: NormalizationMode,
    scope: StatsScope,
) -> Result<PngImage, ConvertError> {
    let bands = satellite.render_bands();
    let planes = bands
        .iter()
        .map(|b| r.band(b).ok_or_else(|| ConvertError::MissingBand(b.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let stats_for = |ps: &[&[f32]]| match stats_of_planes(ps, |v| r.is_nodata(v)) {
        Ok(s) => s,
        Err(_) => {
            log::warn!("no valid samples to normalize; writing zeros");
            ImageStats { min: 0.0, max: 0.0, mean: 0.0, std: 0.0 }
        }
    };
    let normalizers: Vec<Normalizer> = match scope {
        StatsScope::Image => vec![Normalizer::new(mode, stats_for(&planes))?; planes.len()],
        StatsScope::Band => {
            planes.iter().map(|p| Normalizer::new(mode, stats_for(&[p]))).collect::<Result<_, _>>()?
        }
    };
    normalizers.iter().for_each(warn_degenerate);
    let quantized: Vec<Vec<u8>> = planes
        .iter()
        .zip(&normalizers)
        .map(|(p, n)| p.iter().map(|&v| if r.is_nodata(v) { 0 } else { n.quantize(v) }).collect())
        .collect();
    let channels = quantized.len();
    let mut data = Vec::with_capacity(r.pixel_count() * channels);
    for i in 0..r.pixel_count() {
        data.extend(quantized.iter().map(|q| q[i]));
    }
    Ok(PngImage { width: r.width(), height: r.height(), channels, data })
}

/// Writes the converted form of one raw raster to `out`.
pub fn convert_product(
    r: &Raster,
    satellite: Satellite,
    mode: NormalizationMode,
    scope: StatsScope,
    out: &Path,
) -> Result<(), ConvertError> {
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    if mode == NormalizationMode::RawTiff {
        return Ok(write_geotiff(r, out)?);
    }
    let img = render_u8(r, satellite, mode, scope)?;
    Ok(write_png(out, &img)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConvertReport {
    pub converted: usize,
    pub errors: Vec<(String, String)>,
}

/// Converts every candidate's raw file next to it and records the output
/// paths in the manifest.
pub fn convert_store(
    store: &DatasetStore,
    mode: NormalizationMode,
    scope: Option<StatsScope>,
    progress: &dyn Progress,
) -> Result<ConvertReport, ConvertError> {
    let manifest = store.load()?;
    let jobs: Vec<(Satellite, String)> =
        manifest.slots().flat_map(|(.., sat, sm)| sm.candidates.iter().map(move |c| (sat, c.raw_path.clone()))).collect();
    progress.set_total(Stage::Convert, jobs.len() as u64);
    let results: Vec<(String, Result<String, ConvertError>)> = jobs
        .par_iter()
        .map(|(sat, raw)| {
            let out = converted_path_for(raw, mode).ok_or_else(|| {
                ConvertError::Store(StoreError::Invalid(format!("`{raw}` is not a layout path")))
            });
            let out = out.and_then(|rel| {
                let r = crate::raster::read_geotiff(store.path(raw))?;
                let scope = scope.unwrap_or_else(|| StatsScope::default_for(*sat));
                convert_product(&r, *sat, mode, scope, &store.path(&rel))?;
                Ok(rel)
            });
            progress.advance(Stage::Convert, 1);
            (raw.clone(), out)
        })
        .collect();

    store.update(|m: &mut DatasetManifest| {
        let mut report = ConvertReport::default();
        for region in &mut m.regions {
            for me in &mut region.months {
                for sm in me.satellites.values_mut() {
                    for c in &mut sm.candidates {
                        let Some((_, res)) = results.iter().find(|(raw, _)| *raw == c.raw_path) else { continue };
                        let previous = c.converted_path.take();
                        match res {
                            Ok(rel) => {
                                if let Some(old) = previous.filter(|old| old != rel) {
                                    let _ = fs::remove_file(store.path(&old));
                                }
                                c.converted_path = Some(rel.clone());
                                report.converted += 1;
                            }
                            Err(e) => {
                                progress.log(&format!("cannot convert {}: {e}", c.raw_path));
                                report.errors.push((c.raw_path.clone(), e.to_string()));
                            }
                        }
                    }
                }
            }
        }
        Ok::<_, ConvertError>(report)
    })
}

/// Converted-file path next to a raw file, e.g. `…/raw_1.tif` → `…/img_1.png`.
pub fn converted_path_for(raw: &str, mode: NormalizationMode) -> Option<String> {
    let (coord, discarded) = parse_relative(raw)?;
    let out = LayoutCoord { kind: mode.output_kind(), ..coord };
    Some(if discarded { crate::store::discarded_relative_path(&out) } else { crate::store::relative_path(&out) })
}
