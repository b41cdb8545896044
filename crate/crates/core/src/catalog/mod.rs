//! Catalog providers and the monthly time-series downloader.
//!
//! A [`CatalogProvider`] answers two requests: a search for products over a
//! footprint and time window, and a single-band raster fetch clipped to a
//! footprint. [`query`] ranks and truncates search results; [`fetch`]
//! assembles the requested bands into one raster.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::raster::{GeoTransform, Raster, RasterError};
use crate::sampler::SceneFootprint;
use crate::satellite::Satellite;

pub mod http;
pub mod mock;
mod plan;
mod runner;

pub use plan::{plan_downloads, DownloadPlan, DownloadTask, PlanConfig, PlanError};
pub use runner::{run_plan, DownloadReport, RetryPolicy, RunOptions, TaskOutcome, TaskReport};

#[derive(Debug, Clone, thiserror::Error)]
pub enum CatalogError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("band `{band}` not available for product `{product_id}`")]
    BandUnavailable { product_id: String, band: String },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
}

impl CatalogError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, CatalogError::ProviderUnavailable(_) | CatalogError::TruncatedPayload(_))
    }
}

impl From<RasterError> for CatalogError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::CorruptFile(m) => CatalogError::TruncatedPayload(m),
            other => CatalogError::MalformedResponse(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductQuery {
    pub footprint: SceneFootprint,
    pub satellite: Satellite,
    /// Half-open acquisition window `[start, end)`.
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub bands: Vec<String>,
    pub max_candidates: usize,
}

impl ProductQuery {
    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.start >= self.end {
            return Err(CatalogError::InvalidQuery(format!("window {} .. {} is empty", self.start, self.end)));
        }
        if self.bands.is_empty() {
            return Err(CatalogError::InvalidQuery("no bands requested".into()));
        }
        if self.max_candidates == 0 {
            return Err(CatalogError::InvalidQuery("max_candidates must be at least 1".into()));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> DateTime<Utc> {
        self.start + (self.end - self.start) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDescriptor {
    pub product_id: String,
    pub satellite: Satellite,
    pub acquired_at: DateTime<Utc>,
    /// Scene-level cloud cover percentage from the catalog (optical only).
    #[serde(default)]
    pub cloud_pct_meta: Option<f64>,
    pub available_bands: Vec<String>,
}

/// A catalog that can be shared across download workers.
pub trait CatalogProvider: Send + Sync {
    /// Products of `q.satellite` intersecting the footprint within the window,
    /// in any order.
    fn search(&self, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError>;

    /// One band of a product, clipped to the footprint, as a single-band
    /// `size_px` square raster.
    fn fetch_band(&self, product_id: &str, band: &str, footprint: &SceneFootprint) -> Result<Raster, CatalogError>;
}

impl<P: CatalogProvider + ?Sized> CatalogProvider for std::sync::Arc<P> {
    fn search(&self, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError> {
        (**self).search(q)
    }

    fn fetch_band(&self, product_id: &str, band: &str, footprint: &SceneFootprint) -> Result<Raster, CatalogError> {
        (**self).fetch_band(product_id, band, footprint)
    }
}

/// Orders descriptors best first: Sentinel-2 by catalog cloud cover, then
/// distance from mid-window; Sentinel-1 by distance from mid-window. Product
/// id breaks remaining ties.
pub fn rank_descriptors(descriptors: &mut [ProductDescriptor], q: &ProductQuery) {
    let mid = q.midpoint();
    let distance = |d: &ProductDescriptor| (d.acquired_at - mid).abs();
    let cloud = |d: &ProductDescriptor| d.cloud_pct_meta.unwrap_or(100.0);
    descriptors.sort_by(|a, b| {
        let by_cloud = match q.satellite {
            Satellite::S2 => cloud(a).total_cmp(&cloud(b)),
            Satellite::S1 => std::cmp::Ordering::Equal,
        };
        by_cloud.then(distance(a).cmp(&distance(b))).then(a.product_id.cmp(&b.product_id))
    });
}

/// Up to `max_candidates` best-ranked products acquired inside the window.
pub fn query(provider: &dyn CatalogProvider, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError> {
    q.validate()?;
    let mut found: Vec<ProductDescriptor> = provider
        .search(q)?
        .into_iter()
        .filter(|d| d.satellite == q.satellite && d.acquired_at >= q.start && d.acquired_at < q.end)
        .collect();
    rank_descriptors(&mut found, q);
    found.truncate(q.max_candidates);
    Ok(found)
}

/// Geo-transform of a footprint's pixel grid.
pub fn footprint_geo(fp: &SceneFootprint) -> GeoTransform {
    let (pixel_lat_deg, pixel_lon_deg) = fp.pixel_deg();
    GeoTransform { origin_lat: fp.bbox.lat_max, origin_lon: fp.bbox.lon_min, pixel_lat_deg, pixel_lon_deg }
}

/// Fetches `bands` of `d` into one raster, in the requested band order.
pub fn fetch(
    provider: &dyn CatalogProvider,
    d: &ProductDescriptor,
    bands: &[String],
    footprint: &SceneFootprint,
) -> Result<Raster, CatalogError> {
    if let Some(b) = bands.iter().find(|b| !d.available_bands.contains(b)) {
        return Err(CatalogError::BandUnavailable { product_id: d.product_id.clone(), band: b.clone() });
    }
    let size = footprint.size_px as usize;
    let mut planes = Vec::with_capacity(bands.len());
    let mut nodata = f32::NAN;
    for band in bands {
        let r = provider.fetch_band(&d.product_id, band, footprint)?;
        if r.width() != size || r.height() != size || r.bands().len() != 1 {
            return Err(CatalogError::MalformedResponse(format!(
                "band {band} of {} is {}x{} with {} planes, expected {size}x{size}",
                d.product_id,
                r.width(),
                r.height(),
                r.bands().len()
            )));
        }
        nodata = r.nodata();
        planes.push((band.clone(), r.into_bands().remove(0).data));
    }
    Ok(Raster::new(size, size, planes, nodata)
        .map_err(|e| CatalogError::MalformedResponse(e.to_string()))?
        .with_geo(footprint_geo(footprint)))
}
