//! Deterministic synthetic catalog for tests and offline runs.
//!
//! Every month offers `products_per_month` products per satellite, acquired
//! from mid-month onward at 47-hour spacing. Pixels are a pseudorandom field
//! seeded from `(seed, product_id, band)`. A [`Scenario`] injects defects
//! per scene, satellite, month or product index:
//!
//! * clouds: bright blobs with QA60 bit 10 or 11 set (Sentinel-2 only),
//!   covering exactly `round(cloud_fraction * pixels)` pixels;
//! * missing data: the top `round(missing_fraction * height)` rows are nodata;
//! * gray fill: the leftmost `round(gray_fraction * width)` columns are
//!   constant;
//! * absent: the product (or whole month) is not listed.

use chrono::{Datelike, Duration};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{footprint_geo, CatalogError, CatalogProvider, ProductDescriptor, ProductQuery};
use crate::month::YearMonth;
use crate::raster::Raster;
use crate::sampler::{GeoPoint, SceneFootprint};
use crate::satellite::{Satellite, QA60};

const SPACING_HOURS: i64 = 47;
const MAX_PRODUCTS_PER_MONTH: usize = 6;
const S2_GRAY_LEVEL: f32 = 1500.0;
const S1_GRAY_LEVEL: f32 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Defect {
    pub cloud_fraction: f64,
    pub missing_fraction: f64,
    pub gray_fraction: f64,
    pub absent: bool,
}

/// Applies `defect` to every product matching all of the given selectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rule {
    pub scene: Option<u32>,
    pub satellite: Option<Satellite>,
    pub month: Option<YearMonth>,
    /// Product index within the month, in acquisition order.
    pub candidate: Option<usize>,
    #[serde(flatten)]
    pub defect: Defect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub products_per_month: usize,
    /// Later rules override earlier ones.
    pub rules: Vec<Rule>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self { products_per_month: 3, rules: Vec::new() }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.products_per_month > MAX_PRODUCTS_PER_MONTH {
            return Err(format!("products_per_month is at most {MAX_PRODUCTS_PER_MONTH}"));
        }
        for r in &self.rules {
            let d = &r.defect;
            for (name, v) in [("cloud", d.cloud_fraction), ("missing", d.missing_fraction), ("gray", d.gray_fraction)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} fraction {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// FNV-1a over the parts followed by a splitmix64 finalizer.
fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
    scenario: Scenario,
    scenes: Vec<GeoPoint>,
}

struct ProductKey {
    satellite: Satellite,
    month: YearMonth,
    index: usize,
}

/// Where defects land in one product's pixel grid.
struct DefectLayout {
    missing_rows: usize,
    gray_cols: usize,
    /// 0 clear, otherwise the QA60 value of the cloud covering the pixel.
    cloud: Vec<u16>,
}

impl MockProvider {
    pub fn new(seed: u64, scenario: Scenario) -> Self {
        Self { seed, scenario, scenes: Vec::new() }
    }

    /// Scene centers used to resolve scene-specific rules; a footprint whose
    /// center matches entry `i` belongs to scene `i`.
    pub fn with_scenes(mut self, centers: Vec<GeoPoint>) -> Self {
        self.scenes = centers;
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn scene_of(&self, fp: &SceneFootprint) -> Option<u32> {
        let c = fp.bbox.center();
        self.scenes
            .iter()
            .position(|s| (s.lat - c.lat).abs() < 1e-7 && (s.lon - c.lon).abs() < 1e-7)
            .map(|i| i as u32)
    }

    fn defect_for(&self, scene: Option<u32>, key: &ProductKey) -> Defect {
        self.scenario
            .rules
            .iter()
            .rev()
            .find(|r| {
                r.scene.map_or(true, |s| Some(s) == scene)
                    && r.satellite.map_or(true, |s| s == key.satellite)
                    && r.month.map_or(true, |m| m == key.month)
                    && r.candidate.map_or(true, |c| c == key.index)
            })
            .map(|r| r.defect)
            .unwrap_or_default()
    }

    fn location_tag(&self, fp: &SceneFootprint) -> u32 {
        let c = fp.bbox.center();
        let (lat, lon) = ((c.lat * 1e6).round() as i64, (c.lon * 1e6).round() as i64);
        stable_hash(&[&self.seed.to_le_bytes(), &lat.to_le_bytes(), &lon.to_le_bytes()]) as u32
    }

    fn product_id(&self, key: &ProductKey, fp: &SceneFootprint) -> String {
        format!(
            "{}_{:04}{:02}_{:08x}_{}",
            key.satellite.short().to_uppercase(),
            key.month.year(),
            key.month.month(),
            self.location_tag(fp),
            key.index
        )
    }

    fn parse_id(id: &str) -> Option<ProductKey> {
        let mut parts = id.split('_');
        let satellite: Satellite = parts.next()?.parse().ok()?;
        let ym = parts.next()?;
        if ym.len() != 6 {
            return None;
        }
        let month = YearMonth::new(ym[..4].parse().ok()?, ym[4..].parse().ok()?).ok()?;
        let _tag = parts.next()?;
        let index = parts.next()?.parse().ok()?;
        parts.next().is_none().then_some(ProductKey { satellite, month, index })
    }

    fn available_bands(satellite: Satellite) -> Vec<String> {
        let bands: &[&str] = match satellite {
            Satellite::S1 => &["VV", "VH"],
            Satellite::S2 => &["B2", "B3", "B4", "B8", QA60],
        };
        bands.iter().map(|b| b.to_string()).collect()
    }

    fn layout(&self, id: &str, size: usize, satellite: Satellite, d: &Defect) -> DefectLayout {
        let n = size * size;
        let missing_rows = ((d.missing_fraction * size as f64).round() as usize).min(size);
        let gray_cols = ((d.gray_fraction * size as f64).round() as usize).min(size);
        let mut cloud = vec![0u16; n];
        if satellite == Satellite::S2 && d.cloud_fraction > 0.0 {
            let eligible = |i: usize| i / size >= missing_rows && i % size >= gray_cols;
            let available = (size - missing_rows) * (size - gray_cols);
            let target = ((d.cloud_fraction * n as f64).round() as usize).min(available);
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), id.as_bytes(), b"clouds"]));
            let radius = (size / 20).max(2) as i64;
            let blob_area = (std::f64::consts::PI * (radius * radius) as f64) as usize;
            let max_blobs = 8 * target.div_ceil(blob_area.max(1)) + 8;
            let mut count = 0;
            let mut blobs = 0;
            while count < target && blobs < max_blobs && available > 0 {
                let value = if blobs % 3 == 2 { 2048 } else { 1024 };
                let cy = rng.random_range(missing_rows..size) as i64;
                let cx = rng.random_range(gray_cols..size) as i64;
                for y in (cy - radius).max(0)..(cy + radius + 1).min(size as i64) {
                    for x in (cx - radius).max(0)..(cx + radius + 1).min(size as i64) {
                        let i = y as usize * size + x as usize;
                        let inside = (y - cy).pow(2) + (x - cx).pow(2) <= radius * radius;
                        if inside && count < target && cloud[i] == 0 && eligible(i) {
                            cloud[i] = value;
                            count += 1;
                        }
                    }
                }
                blobs += 1;
            }
            for (i, c) in cloud.iter_mut().enumerate() {
                if count >= target {
                    break;
                }
                if *c == 0 && eligible(i) {
                    *c = 1024;
                    count += 1;
                }
            }
        }
        DefectLayout { missing_rows, gray_cols, cloud }
    }
}

impl CatalogProvider for MockProvider {
    fn search(&self, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError> {
        q.validate()?;
        let scene = self.scene_of(&q.footprint);
        let first = YearMonth::new(q.start.year(), q.start.month())
            .map_err(|e| CatalogError::InvalidQuery(e.to_string()))?;
        let mut out = Vec::new();
        let mut month = first;
        while month.start() < q.end {
            for index in 0..self.scenario.products_per_month {
                let key = ProductKey { satellite: q.satellite, month, index };
                let defect = self.defect_for(scene, &key);
                let acquired_at = month.midpoint() + Duration::hours(SPACING_HOURS * index as i64);
                if defect.absent || acquired_at < q.start || acquired_at >= q.end {
                    continue;
                }
                out.push(ProductDescriptor {
                    product_id: self.product_id(&key, &q.footprint),
                    satellite: q.satellite,
                    acquired_at,
                    cloud_pct_meta: (q.satellite == Satellite::S2).then_some(defect.cloud_fraction * 100.0),
                    available_bands: Self::available_bands(q.satellite),
                });
            }
            month = month.plus(1);
        }
        Ok(out)
    }

    fn fetch_band(&self, product_id: &str, band: &str, footprint: &SceneFootprint) -> Result<Raster, CatalogError> {
        let key = Self::parse_id(product_id)
            .ok_or_else(|| CatalogError::InvalidQuery(format!("unknown product `{product_id}`")))?;
        if !Self::available_bands(key.satellite).iter().any(|b| b == band) {
            return Err(CatalogError::BandUnavailable { product_id: product_id.into(), band: band.into() });
        }
        let size = footprint.size_px as usize;
        if size == 0 {
            return Err(CatalogError::InvalidQuery("footprint has no pixels".into()));
        }
        let defect = self.defect_for(self.scene_of(footprint), &key);
        let layout = self.layout(product_id, size, key.satellite, &defect);
        let n = size * size;
        let mut rng =
            ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), product_id.as_bytes(), band.as_bytes()]));
        let is_qa = band == QA60;
        let mut plane: Vec<f32> = match (key.satellite, is_qa) {
            (_, true) => vec![0.0; n],
            (Satellite::S2, false) => (0..n).map(|_| rng.random_range(300u16..2500) as f32).collect(),
            (Satellite::S1, false) => (0..n).map(|_| rng.random_range(0.02f32..0.5)).collect(),
        };
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = (i / size, i % size);
            if y < layout.missing_rows {
                *v = f32::NAN;
            } else if x < layout.gray_cols {
                *v = match (key.satellite, is_qa) {
                    (_, true) => 0.0,
                    (Satellite::S2, false) => S2_GRAY_LEVEL,
                    (Satellite::S1, false) => S1_GRAY_LEVEL,
                };
            } else if layout.cloud[i] != 0 {
                *v = if is_qa { layout.cloud[i] as f32 } else { 9000.0 + rng.random_range(0u16..800) as f32 };
            }
        }
        Ok(Raster::new(size, size, vec![(band.to_string(), plane)], f32::NAN)
            .expect("square plane")
            .with_geo(footprint_geo(footprint)))
    }
}
