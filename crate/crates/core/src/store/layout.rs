//! Path codec for the hierarchical dataset layout:
//! `<root>/Sentinel-N/scene_XXXX/YYYY-MM/{raw|img}_R.{tif|png}`.

use std::path::{Path, PathBuf};

use crate::month::YearMonth;
use crate::satellite::Satellite;

/// Folder that holds candidates the cleaner rejected, next to the kept ones.
pub const DISCARDED_DIR: &str = "discarded";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileKind {
    /// Downloaded GeoTIFF, `raw_R.tif`.
    Raw,
    /// Normalized 8-bit image, `img_R.png`.
    Converted,
    /// Unnormalized passthrough copy, `img_R.tif`.
    ConvertedTiff,
}

impl FileKind {
    fn parts(self) -> (&'static str, &'static str) {
        match self {
            FileKind::Raw => ("raw", "tif"),
            FileKind::Converted => ("img", "png"),
            FileKind::ConvertedTiff => ("img", "tif"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutCoord {
    pub satellite: Satellite,
    pub scene_id: u32,
    pub month: YearMonth,
    pub rank: u32,
    pub kind: FileKind,
}

pub fn scene_dir_name(scene_id: u32) -> String {
    format!("scene_{scene_id:04}")
}

pub fn file_name(rank: u32, kind: FileKind) -> String {
    let (stem, ext) = kind.parts();
    format!("{stem}_{rank}.{ext}")
}

/// Root-relative path with `/` separators.
pub fn relative_path(c: &LayoutCoord) -> String {
    format!("{}/{}", month_dir(c.satellite, c.scene_id, c.month), file_name(c.rank, c.kind))
}

/// Root-relative path of the same file inside the month's `discarded/` folder.
pub fn discarded_relative_path(c: &LayoutCoord) -> String {
    format!("{}/{DISCARDED_DIR}/{}", month_dir(c.satellite, c.scene_id, c.month), file_name(c.rank, c.kind))
}

/// Root-relative month folder, `Sentinel-N/scene_XXXX/YYYY-MM`.
pub fn month_dir(satellite: Satellite, scene_id: u32, month: YearMonth) -> String {
    format!("{}/{}/{}", satellite.folder(), scene_dir_name(scene_id), month)
}

pub fn layout_path(root: &Path, c: &LayoutCoord) -> PathBuf {
    root.join(relative_path(c))
}

/// Inverse of [`relative_path`] and [`discarded_relative_path`]; the flag
/// reports whether the path is inside `discarded/`. Only canonical spellings
/// are accepted.
pub fn parse_relative(path: &str) -> Option<(LayoutCoord, bool)> {
    let parts: Vec<&str> = path.split('/').collect();
    let (sat, scene, month, discarded, file) = match parts.as_slice() {
        [sat, scene, month, file] => (sat, scene, month, false, file),
        [sat, scene, month, d, file] if *d == DISCARDED_DIR => (sat, scene, month, true, file),
        _ => return None,
    };
    let satellite = Satellite::from_folder(sat)?;
    let scene_id: u32 = scene.strip_prefix("scene_")?.parse().ok()?;
    let month: YearMonth = month.parse().ok()?;
    let (stem, ext) = file.split_once('.')?;
    let (prefix, rank) = stem.split_once('_')?;
    let rank: u32 = rank.parse().ok()?;
    let kind = match (prefix, ext) {
        ("raw", "tif") => FileKind::Raw,
        ("img", "png") => FileKind::Converted,
        ("img", "tif") => FileKind::ConvertedTiff,
        _ => return None,
    };
    let coord = LayoutCoord { satellite, scene_id, month, rank, kind };
    let canonical = if discarded { discarded_relative_path(&coord) } else { relative_path(&coord) };
    (canonical == path).then_some((coord, discarded))
}

/// Parses a path below `root` back to its coordinates.
pub fn parse_layout_path(root: &Path, path: &Path) -> Option<(LayoutCoord, bool)> {
    let rel = path.strip_prefix(root).ok()?;
    let parts: Vec<&str> = rel.components().map(|c| c.as_os_str().to_str()).collect::<Option<_>>()?;
    parse_relative(&parts.join("/"))
}
