//! Patch grids over kept images and per-scene preview mosaics.
//!
//! A grid places `rows x cols` square patches at `stride` spacing starting
//! from the top-left corner; partial patches at the right and bottom edges
//! are dropped. Previews stack one row of patches per acquisition month.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{render_u8, ConvertError, NormalizationMode, StatsScope};
use crate::month::YearMonth;
use crate::raster::{read_geotiff, read_png, write_geotiff, write_png, PngImage, Raster, RasterError};
use crate::satellite::Satellite;
use crate::stage::{Progress, Stage};
use crate::store::{parse_relative, DatasetManifest, DatasetStore, FileKind, StoreError};

pub const PATCHES_DIR: &str = "patches";
pub const PREVIEWS_DIR: &str = "previews";

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("patch size {patch} exceeds the {width}x{height} image")]
    PatchTooLarge { patch: usize, width: usize, height: usize },
    #[error("patch size and stride must be at least 1")]
    ZeroSize,
    #[error("inconsistent series: {0}")]
    InconsistentSeries(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgePolicy {
    DiscardPartial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_px: usize,
    pub stride_px: usize,
    pub rows: usize,
    pub cols: usize,
    pub edge_policy: EdgePolicy,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_px: usize, stride_px: usize) -> Result<Self, PatchError> {
        if patch_px == 0 || stride_px == 0 {
            return Err(PatchError::ZeroSize);
        }
        if patch_px > width.min(height) {
            return Err(PatchError::PatchTooLarge { patch: patch_px, width, height });
        }
        Ok(Self {
            patch_px,
            stride_px,
            rows: (height - patch_px) / stride_px + 1,
            cols: (width - patch_px) / stride_px + 1,
            edge_policy: EdgePolicy::DiscardPartial,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left pixel (x, y) of a patch.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (col * self.stride_px, row * self.stride_px)
    }
}

/// A `w x h` window of an interleaved 8-bit image.
pub fn crop(img: &PngImage, x: usize, y: usize, w: usize, h: usize) -> PngImage {
    assert!(x + w <= img.width && y + h <= img.height, "crop outside image");
    let c = img.channels;
    let mut data = Vec::with_capacity(w * h * c);
    for row in y..y + h {
        let start = (row * img.width + x) * c;
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    PngImage { width: w, height: h, channels: c, data }
}

/// A `w x h` window of every band.
pub fn crop_raster(r: &Raster, x: usize, y: usize, w: usize, h: usize) -> Raster {
    assert!(x + w <= r.width() && y + h <= r.height(), "crop outside raster");
    let bands = r
        .bands()
        .iter()
        .map(|b| {
            let mut data = Vec::with_capacity(w * h);
            for row in y..y + h {
                data.extend_from_slice(&b.data[row * r.width() + x..row * r.width() + x + w]);
            }
            (b.name.clone(), data)
        })
        .collect();
    let mut geo = *r.geo();
    geo.origin_lat -= y as f64 * geo.pixel_lat_deg;
    geo.origin_lon += x as f64 * geo.pixel_lon_deg;
    Raster::new(w, h, bands, r.nodata()).expect("crop keeps plane sizes").with_geo(geo).with_metadata(r.metadata().clone())
}

/// Patches in row-major order.
pub fn extract_patches(img: &PngImage, grid: &PatchGrid) -> Vec<(usize, usize, PngImage)> {
    let mut out = Vec::with_capacity(grid.count());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (x, y) = grid.origin(row, col);
            out.push((row, col, crop(img, x, y, grid.patch_px, grid.patch_px)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchName {
    pub scene_id: u32,
    pub month: YearMonth,
    pub row: usize,
    pub col: usize,
}

/// `scene_0003_2020-01_r02_c05.png`
pub fn patch_filename(scene_id: u32, month: YearMonth, row: usize, col: usize) -> String {
    patch_stem(scene_id, month, row, col) + ".png"
}

fn patch_stem(scene_id: u32, month: YearMonth, row: usize, col: usize) -> String {
    format!("scene_{scene_id:04}_{month}_r{row:02}_c{col:02}")
}

pub fn parse_patch_filename(name: &str) -> Option<PatchName> {
    let stem = name.strip_suffix(".png")?;
    let rest = stem.strip_prefix("scene_")?;
    let mut parts = rest.split('_');
    let scene_id: u32 = parts.next()?.parse().ok()?;
    let month: YearMonth = parts.next()?.parse().ok()?;
    let row: usize = parts.next()?.strip_prefix('r')?.parse().ok()?;
    let col: usize = parts.next()?.strip_prefix('c')?.parse().ok()?;
    if parts.next().is_some() || patch_filename(scene_id, month, row, col) != name {
        return None;
    }
    Some(PatchName { scene_id, month, row, col })
}

/// Mosaic with one row per month (chronological, top-down) and one column
/// per patch in row-major grid order.
pub fn build_preview(series: &[(YearMonth, PngImage)], grid: &PatchGrid) -> Result<PngImage, PatchError> {
    let Some((_, first)) = series.first() else {
        return Err(PatchError::InconsistentSeries("no images".into()));
    };
    for (m, img) in series {
        if (img.width, img.height, img.channels) != (first.width, first.height, first.channels) {
            return Err(PatchError::InconsistentSeries(format!(
                "{m} is {}x{}x{}, expected {}x{}x{}",
                img.width, img.height, img.channels, first.width, first.height, first.channels
            )));
        }
    }
    let expected = PatchGrid::new(first.width, first.height, grid.patch_px, grid.stride_px)?;
    if expected != *grid {
        return Err(PatchError::InconsistentSeries("grid does not match the images".into()));
    }
    let mut ordered: Vec<&(YearMonth, PngImage)> = series.iter().collect();
    ordered.sort_by_key(|(m, _)| *m);
    let p = grid.patch_px;
    let c = first.channels;
    let width = grid.count() * p;
    let mut data = vec![0u8; width * ordered.len() * p * c];
    for (d, (_, img)) in ordered.iter().enumerate() {
        for (k, (_, _, patch)) in extract_patches(img, grid).into_iter().enumerate() {
            for y in 0..p {
                let dst = ((d * p + y) * width + k * p) * c;
                data[dst..dst + p * c].copy_from_slice(&patch.data[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    Ok(PngImage { width, height: ordered.len() * p, channels: c, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub patch_px: usize,
    /// Defaults to the patch size.
    pub stride_px: Option<usize>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { patch_px: 250, stride_px: None }
    }
}

impl ExtractConfig {
    pub fn stride(&self) -> usize {
        self.stride_px.unwrap_or(self.patch_px)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExtractReport {
    pub images: usize,
    pub patches: usize,
    pub previews: usize,
}

pub fn preview_relative_path(scene_id: u32, satellite: Satellite) -> String {
    format!("{PREVIEWS_DIR}/scene_{scene_id:04}_{}.png", satellite.short())
}

pub fn patch_dir_relative(scene_id: u32, satellite: Satellite) -> String {
    format!("{PATCHES_DIR}/{}/scene_{scene_id:04}", satellite.folder())
}

/// Loads a kept image as 8-bit (for previews) plus its raster form when it
/// is a passthrough TIFF.
fn load_selected(store: &DatasetStore, rel: &str, satellite: Satellite) -> Result<(PngImage, Option<Raster>), PatchError> {
    let kind = parse_relative(rel).map(|(c, _)| c.kind);
    match kind {
        Some(FileKind::Converted) => Ok((read_png(store.path(rel))?, None)),
        _ => {
            let r = read_geotiff(store.path(rel))?;
            let img = render_u8(&r, satellite, NormalizationMode::MinMax, StatsScope::default_for(satellite))?;
            Ok((img, Some(r)))
        }
    }
}

fn extract_scene(
    store: &DatasetStore,
    scene_id: u32,
    satellite: Satellite,
    selected: &[(YearMonth, String)],
    cfg: &ExtractConfig,
) -> Result<ExtractReport, PatchError> {
    let dir = store.path(&patch_dir_relative(scene_id, satellite));
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let preview_path = store.path(&preview_relative_path(scene_id, satellite));
    let mut report = ExtractReport::default();
    if selected.is_empty() {
        if preview_path.exists() {
            fs::remove_file(&preview_path)?;
        }
        return Ok(report);
    }
    fs::create_dir_all(&dir)?;
    let mut series = Vec::with_capacity(selected.len());
    let mut grid = None;
    for (month, rel) in selected {
        let (img, raster) = load_selected(store, rel, satellite)?;
        let g = PatchGrid::new(img.width, img.height, cfg.patch_px, cfg.stride())?;
        for (row, col, patch) in extract_patches(&img, &g) {
            match &raster {
                None => write_png(dir.join(patch_filename(scene_id, *month, row, col)), &patch)?,
                Some(r) => {
                    let (x, y) = g.origin(row, col);
                    let name = patch_stem(scene_id, *month, row, col) + ".tif";
                    write_geotiff(&crop_raster(r, x, y, g.patch_px, g.patch_px), dir.join(name))?
                }
            }
            report.patches += 1;
        }
        report.images += 1;
        grid = Some(g);
        series.push((*month, img));
    }
    let preview = build_preview(&series, &grid.expect("non-empty series"))?;
    write_png_atomic(&preview_path, &preview)?;
    report.previews = 1;
    Ok(report)
}

fn write_png_atomic(path: &Path, img: &PngImage) -> Result<(), PatchError> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("png.tmp");
    write_png(&tmp, img)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Cuts every selected image into patches and renders one preview per
/// (scene, satellite). Previous outputs for each scene are replaced.
pub fn extract_store(store: &DatasetStore, cfg: &ExtractConfig, progress: &dyn Progress) -> Result<ExtractReport, PatchError> {
    if cfg.patch_px == 0 || cfg.stride() == 0 {
        return Err(PatchError::ZeroSize);
    }
    let manifest = store.load()?;
    // (scene, satellite, selected files by month)
    type Job = (u32, Satellite, Vec<(YearMonth, String)>);
    let mut jobs: Vec<Job> = Vec::new();
    for r in &manifest.regions {
        let mut sats: Vec<Satellite> = r.months.iter().flat_map(|m| m.satellites.keys().copied()).collect();
        sats.sort();
        sats.dedup();
        for sat in sats {
            let mut selected: Vec<(YearMonth, String)> = r
                .months
                .iter()
                .filter_map(|m| m.satellites.get(&sat)?.selected.clone().map(|s| (m.month, s)))
                .collect();
            selected.sort();
            jobs.push((r.scene_id, sat, selected));
        }
    }
    progress.set_total(Stage::Extract, jobs.len() as u64);
    let results: Vec<Result<ExtractReport, PatchError>> = jobs
        .par_iter()
        .map(|(scene, sat, selected)| {
            let out = extract_scene(store, *scene, *sat, selected, cfg);
            progress.advance(Stage::Extract, 1);
            out
        })
        .collect();
    let mut total = ExtractReport::default();
    for r in results {
        let r = r?;
        total.images += r.images;
        total.patches += r.patches;
        total.previews += r.previews;
    }
    store.update(|m: &mut DatasetManifest| {
        for region in &mut m.regions {
            region.previews.clear();
            for (scene, sat, selected) in &jobs {
                if *scene == region.scene_id && !selected.is_empty() {
                    region.previews.insert(*sat, preview_relative_path(*scene, *sat));
                }
            }
        }
        Ok::<_, PatchError>(())
    })?;
    Ok(total)
}
