use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use forge_core::catalog::http::{router, HttpProvider};
use forge_core::catalog::mock::{Defect, MockProvider, Rule, Scenario};
use forge_core::catalog::{query, CatalogError, CatalogProvider, ProductDescriptor, ProductQuery};
use forge_core::pipeline::{run_full_auto, PipelineConfig};
use forge_core::raster::Raster;
use forge_core::sampler::{footprint_of, GeoPoint, SceneFootprint};
use forge_core::service::spawn;
use forge_core::stage::NoProgress;
use forge_core::{DatasetStore, Satellite, YearMonth};

fn q(satellite: Satellite, month: &str, size: u32) -> ProductQuery {
    let m: YearMonth = month.parse().unwrap();
    ProductQuery {
        footprint: footprint_of(GeoPoint { lat: 45.07, lon: 7.68 }, size, 10.0).unwrap(),
        satellite,
        start: m.start(),
        end: m.end(),
        bands: satellite.default_bands(),
        max_candidates: 3,
    }
}

#[test]
fn remote_catalog_matches_the_local_provider() {
    let scenario = Scenario {
        products_per_month: 4,
        rules: vec![Rule { candidate: Some(1), defect: Defect { cloud_fraction: 0.4, ..Default::default() }, ..Default::default() }],
    };
    let local = MockProvider::new(8, scenario);
    let server = spawn(router(Arc::new(local.clone())), "127.0.0.1:0").unwrap();
    let remote = HttpProvider::new(&server.url(), Duration::from_secs(10)).unwrap();
    for sat in Satellite::ALL {
        let query_ = q(sat, "2020-05", 48);
        let a = query(&local, &query_).unwrap();
        let b = query(&remote, &query_).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for d in &a {
            for band in &query_.bands {
                let x = local.fetch_band(&d.product_id, band, &query_.footprint).unwrap();
                let y = remote.fetch_band(&d.product_id, band, &query_.footprint).unwrap();
                assert_eq!(x.band(band).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                           y.band(band).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                assert_eq!(x.geo(), y.geo());
            }
        }
    }
}

#[test]
fn remote_errors_map_to_catalog_errors() {
    let server = spawn(router(Arc::new(MockProvider::new(1, Scenario::default()))), "127.0.0.1:0").unwrap();
    let remote = HttpProvider::new(&server.url(), Duration::from_secs(10)).unwrap();
    let d = &query(&remote, &q(Satellite::S2, "2020-01", 16)).unwrap()[0];
    let err = remote.fetch_band(&d.product_id, "B11", &q(Satellite::S2, "2020-01", 16).footprint).unwrap_err();
    assert!(matches!(err, CatalogError::BandUnavailable { .. }), "{err}");

    drop(server);
    let err = query(&remote, &q(Satellite::S2, "2020-01", 16)).unwrap_err();
    assert!(err.is_retryable(), "{err}");
}

/// Fails the first `n` band fetches with a retryable error.
struct Flaky {
    inner: MockProvider,
    failures: AtomicU32,
}

impl CatalogProvider for Flaky {
    fn search(&self, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError> {
        self.inner.search(q)
    }

    fn fetch_band(&self, id: &str, band: &str, fp: &SceneFootprint) -> Result<Raster, CatalogError> {
        if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
            return Err(CatalogError::ProviderUnavailable("try again".into()));
        }
        self.inner.fetch_band(id, band, fp)
    }
}

#[test]
fn pipeline_runs_against_a_remote_catalog() {
    let flaky = Flaky { inner: MockProvider::new(0, Scenario::default()), failures: AtomicU32::new(5) };
    let server = spawn(router(Arc::new(flaky)), "127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.apply([
        ("output.root", dir.path().to_str().unwrap()),
        ("download.provider", server.url().as_str()),
        ("download.backoff_ms", "1"),
        ("download.months", "3"),
        ("sampler.scene_px", "64"),
        ("extract.patch", "32"),
    ])
    .unwrap();
    run_full_auto(&cfg, &NoProgress).unwrap();
    let m = DatasetStore::open(dir.path()).unwrap().load().unwrap();
    assert_eq!(m.selected_count(), 2 * 3);

    let local = tempfile::tempdir().unwrap();
    cfg.set("output.root", local.path().to_str().unwrap()).unwrap();
    cfg.set("download.provider", "mock").unwrap();
    run_full_auto(&cfg, &NoProgress).unwrap();
    assert_eq!(DatasetStore::open(local.path()).unwrap().load().unwrap(), m);
}
