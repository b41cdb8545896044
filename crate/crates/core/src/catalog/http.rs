//! JSON/GeoTIFF catalog protocol: a blocking client and an axum router that
//! serves any [`CatalogProvider`] over the same contract.
//!
//! * `POST {base}/search` with `{"bbox": [lon_min, lat_min, lon_max, lat_max],
//!   "datetime": "start/end", "collection": "sentinel-2", "limit": n}` returns
//!   a JSON array of product descriptors.
//! * `GET {base}/products/{id}/bands/{band}?bbox=lon_min,lat_min,lon_max,lat_max&size=n`
//!   returns a single-band GeoTIFF.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{CatalogError, CatalogProvider, ProductDescriptor, ProductQuery};
use crate::raster::{decode_geotiff, encode_geotiff, Raster};
use crate::sampler::{BBox, SceneFootprint, METERS_PER_DEGREE};
use crate::satellite::Satellite;

/// Page size requested from remote catalogs; ranking happens client-side.
pub const SEARCH_LIMIT: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub bbox: [f64; 4],
    pub datetime: String,
    pub collection: String,
    pub limit: usize,
}

fn bbox_array(b: &BBox) -> [f64; 4] {
    [b.lon_min, b.lat_min, b.lon_max, b.lat_max]
}

fn bbox_from_array(a: [f64; 4]) -> Result<BBox, CatalogError> {
    let b = BBox { lon_min: a[0], lat_min: a[1], lon_max: a[2], lat_max: a[3] };
    if a.iter().all(|v| v.is_finite()) && b.lat_min <= b.lat_max && b.lon_min <= b.lon_max {
        Ok(b)
    } else {
        Err(CatalogError::InvalidQuery(format!("bad bbox {a:?}")))
    }
}

/// Footprint implied by a bbox and a pixel count.
fn footprint_from(bbox: BBox, size_px: u32) -> SceneFootprint {
    let gsd_m = if size_px == 0 { 1.0 } else { (bbox.lat_max - bbox.lat_min) * METERS_PER_DEGREE / size_px as f64 };
    SceneFootprint { center: bbox.center(), size_px, gsd_m: if gsd_m > 0.0 { gsd_m } else { 1.0 }, bbox }
}

/// Blocking client for a remote catalog.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base: reqwest::Url,
    client: reqwest::blocking::Client,
}

fn transport(e: reqwest::Error) -> CatalogError {
    CatalogError::ProviderUnavailable(e.to_string())
}

impl HttpProvider {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, CatalogError> {
        let mut base = reqwest::Url::parse(base).map_err(|e| CatalogError::InvalidQuery(format!("{base}: {e}")))?;
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(transport)?;
        Ok(Self { base, client })
    }

    fn url(&self, segments: &[&str]) -> reqwest::Url {
        let mut url = self.base.clone();
        url.path_segments_mut().expect("http base url").pop_if_empty().extend(segments);
        url
    }

    fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, (StatusCode, String)> {
        let status = resp.status();
        if status.is_success() {
            Ok(resp)
        } else {
            let body = resp.text().unwrap_or_default();
            Err((StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY), body))
        }
    }
}

fn status_error(status: StatusCode, body: String) -> CatalogError {
    if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
        CatalogError::ProviderUnavailable(format!("{status}: {body}"))
    } else {
        CatalogError::InvalidQuery(format!("{status}: {body}"))
    }
}

impl CatalogProvider for HttpProvider {
    fn search(&self, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError> {
        let body = SearchRequest {
            bbox: bbox_array(&q.footprint.bbox),
            datetime: format!(
                "{}/{}",
                q.start.to_rfc3339_opts(SecondsFormat::Secs, true),
                q.end.to_rfc3339_opts(SecondsFormat::Secs, true)
            ),
            collection: q.satellite.collection().into(),
            limit: SEARCH_LIMIT,
        };
        let resp = self.client.post(self.url(&["search"])).json(&body).send().map_err(transport)?;
        let resp = Self::check(resp).map_err(|(s, b)| status_error(s, b))?;
        let text = resp.text().map_err(transport)?;
        serde_json::from_str(&text).map_err(|e| CatalogError::MalformedResponse(e.to_string()))
    }

    fn fetch_band(&self, product_id: &str, band: &str, footprint: &SceneFootprint) -> Result<Raster, CatalogError> {
        let b = bbox_array(&footprint.bbox);
        let mut url = self.url(&["products", product_id, "bands", band]);
        url.query_pairs_mut()
            .append_pair("bbox", &format!("{},{},{},{}", b[0], b[1], b[2], b[3]))
            .append_pair("size", &footprint.size_px.to_string());
        let resp = self.client.get(url).send().map_err(transport)?;
        let resp = Self::check(resp).map_err(|(status, body)| {
            if status == StatusCode::NOT_FOUND {
                CatalogError::BandUnavailable { product_id: product_id.into(), band: band.into() }
            } else {
                status_error(status, body)
            }
        })?;
        let expected = resp.content_length();
        let bytes = resp.bytes().map_err(|e| CatalogError::TruncatedPayload(e.to_string()))?;
        if expected.is_some_and(|n| n != bytes.len() as u64) {
            return Err(CatalogError::TruncatedPayload(format!("{} of {:?} bytes", bytes.len(), expected)));
        }
        Ok(decode_geotiff(&bytes)?)
    }
}

struct ApiError(CatalogError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            CatalogError::InvalidQuery(_) | CatalogError::MalformedResponse(_) => StatusCode::BAD_REQUEST,
            CatalogError::BandUnavailable { .. } => StatusCode::NOT_FOUND,
            CatalogError::ProviderUnavailable(_) | CatalogError::TruncatedPayload(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type Shared = Arc<dyn CatalogProvider>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, CatalogError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(CatalogError::ProviderUnavailable(e.to_string())))?
        .map_err(ApiError)
}

async fn search(State(p): State<Shared>, Json(req): Json<SearchRequest>) -> Result<Json<Vec<ProductDescriptor>>, ApiError> {
    let bbox = bbox_from_array(req.bbox).map_err(ApiError)?;
    let satellite: Satellite =
        req.collection.parse().map_err(|e: crate::satellite::ParseSatelliteError| ApiError(CatalogError::InvalidQuery(e.to_string())))?;
    let (start, end) = req
        .datetime
        .split_once('/')
        .and_then(|(a, b)| Some((a.parse::<DateTime<Utc>>().ok()?, b.parse::<DateTime<Utc>>().ok()?)))
        .ok_or_else(|| ApiError(CatalogError::InvalidQuery(format!("bad datetime `{}`", req.datetime))))?;
    let q = ProductQuery {
        footprint: footprint_from(bbox, 0),
        satellite,
        start,
        end,
        bands: satellite.default_bands(),
        max_candidates: req.limit.max(1),
    };
    let limit = req.limit;
    let mut found = blocking(move || p.search(&q)).await?;
    found.sort_by(|a, b| a.acquired_at.cmp(&b.acquired_at).then(a.product_id.cmp(&b.product_id)));
    found.truncate(limit);
    Ok(Json(found))
}

#[derive(Debug, Deserialize)]
struct BandParams {
    bbox: String,
    size: u32,
}

async fn band(
    State(p): State<Shared>,
    UrlPath((id, band)): UrlPath<(String, String)>,
    Query(params): Query<BandParams>,
) -> Result<Response, ApiError> {
    let values: Vec<f64> = params.bbox.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(
        |_| ApiError(CatalogError::InvalidQuery(format!("bad bbox `{}`", params.bbox))),
    )?;
    let arr: [f64; 4] =
        values.try_into().map_err(|_| ApiError(CatalogError::InvalidQuery("bbox needs four numbers".into())))?;
    let footprint = footprint_from(bbox_from_array(arr).map_err(ApiError)?, params.size);
    let bytes = blocking(move || {
        let r = p.fetch_band(&id, &band, &footprint)?;
        encode_geotiff(&r).map_err(|e| CatalogError::MalformedResponse(e.to_string()))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/tiff")], bytes).into_response())
}

/// Serves `provider` over the catalog protocol.
pub fn router(provider: Arc<dyn CatalogProvider>) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/products/{id}/bands/{band}", get(band))
        .with_state(provider)
}
