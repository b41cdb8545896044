//! Input fixtures shared by the benchmarks.

use forge_core::catalog::mock::{MockProvider, Scenario};
use forge_core::catalog::{fetch, query, ProductQuery};
use forge_core::raster::Raster;
use forge_core::sampler::{footprint_of, GeoPoint};
use forge_core::{Satellite, YearMonth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A single-band raster of uniform noise.
pub fn noise_raster(size: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = (0..size * size).map(|_| rng.random_range(0.0..10_000.0f32)).collect();
    Raster::new(size, size, vec![("B4".into(), plane)], f32::NAN).expect("square raster")
}

/// One mock Sentinel product with all default bands.
pub fn mock_product(satellite: Satellite, size: u32) -> Raster {
    let provider = MockProvider::new(1, Scenario::default());
    let month: YearMonth = "2020-06".parse().expect("month");
    let q = ProductQuery {
        footprint: footprint_of(GeoPoint { lat: 45.0, lon: 7.0 }, size, 10.0).expect("footprint"),
        satellite,
        start: month.start(),
        end: month.end(),
        bands: satellite.default_bands(),
        max_candidates: 1,
    };
    let d = query(&provider, &q).expect("search").remove(0);
    fetch(&provider, &d, &q.bands, &q.footprint).expect("fetch")
}
