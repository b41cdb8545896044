//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every check compares the library against an oracle written here.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use forge_core::catalog::mock::{Defect, MockProvider, Rule, Scenario};
use forge_core::catalog::{fetch, plan_downloads, query, PlanConfig, ProductQuery};
use forge_core::clean::{
    parse_review_item_id, review_item_id, score_candidate, select_best, CleanerConfig, QualityReport, Thresholds,
    Verdict,
};
use forge_core::convert::{
    normalize_max, normalize_minmax, normalize_std, render_u8, stats_of, NormalizationMode, StatsScope,
};
use forge_core::patches::{build_preview, extract_patches, parse_patch_filename, patch_filename, PatchGrid};
use forge_core::pipeline::{run_full_auto, run_stages, PipelineConfig};
use forge_core::raster::{PngImage, Raster};
use forge_core::sampler::{footprint_of, generate_points, GeoPoint, SamplerConfig, WaterMask};
use forge_core::stage::{NoProgress, Stage, StageStatus};
use forge_core::store::{discarded_relative_path, parse_relative, relative_path, FileKind, LayoutCoord};
use forge_core::{DatasetManifest, DatasetStore, Satellite, YearMonth};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("end-to-end default run selects 24 images", end_to_end_default_run),
        ("download plan has 72 tasks per region", plan_arithmetic),
        ("generator stays on land and is uniform", generator),
        ("normalization matches the reference evaluation", normalization),
        ("cleaner selection and defect measurement", cleaner),
        ("patches reassemble the source", patch_reassembly),
        ("layout and filename codecs round-trip", codecs),
        ("interrupted runs resume to the same manifest", resumability),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({secs:.1}s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn config(root: &Path, overrides: &[(&str, &str)]) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.set("output.root", root.to_str().unwrap()).unwrap();
    cfg.set("download.backoff_ms", "1").unwrap();
    cfg.apply(overrides.iter().copied()).unwrap();
    cfg
}

fn manifest(root: &Path) -> DatasetManifest {
    DatasetStore::open(root).unwrap().load().unwrap()
}

fn end_to_end_default_run() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    run_full_auto(&config(dir.path(), &[]), &NoProgress).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let m = manifest(dir.path());
    ensure!(m.regions.len() == 1, "{} regions", m.regions.len());
    ensure!(Stage::ALL.iter().all(|s| m.status(*s) == StageStatus::Done), "not every stage is done");
    for sat in Satellite::ALL {
        let n = m.slots().filter(|(.., s, sm)| *s == sat && sm.selected.is_some()).count();
        ensure!(n == 12, "{sat:?} has {n} selected images");
    }
    ensure!(m.selected_count() == 24, "{} selected", m.selected_count());
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("24 selected in {:.1}s", elapsed.as_secs_f64()))
}

fn plan_arithmetic() -> Result<String, String> {
    let cfg = PlanConfig::default();
    for n in 1..=20usize {
        let points: Vec<GeoPoint> = (0..n).map(|i| GeoPoint { lat: -40.0 + 4.0 * i as f64, lon: 10.0 * i as f64 - 90.0 }).collect();
        let plan = plan_downloads(&points, &cfg).map_err(|e| e.to_string())?;
        ensure!(plan.tasks.len() == 72 * n, "{n} regions gave {} tasks", plan.tasks.len());
        let distinct: BTreeSet<_> = plan.tasks.iter().map(|t| (t.scene_id, t.satellite, t.month, t.rank)).collect();
        ensure!(distinct.len() == plan.tasks.len(), "duplicate tasks for {n} regions");
    }
    Ok("N = 1..20".into())
}

/// Reads the bundled mask file directly: 16-byte header (magic, rows, cols as
/// little-endian u32), then MSB-first rows padded to whole bytes.
struct MaskOracle {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl MaskOracle {
    fn load() -> Self {
        let data = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/land_1deg.wmsk")).unwrap();
        assert_eq!(&data[..4], b"WMSK");
        let rows = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
        Self { rows, cols, bits: data[16..].to_vec() }
    }

    fn is_water(&self, lat: f64, lon: f64) -> bool {
        let deg = 180.0 / self.rows as f64;
        let r = (((90.0 - lat) / deg).floor() as usize).min(self.rows - 1);
        let c = (((lon + 180.0) / deg).floor() as usize).min(self.cols - 1);
        let stride = self.cols.div_ceil(8);
        self.bits[r * stride + c / 8] & (0x80 >> (c % 8)) != 0
    }
}

fn generator() -> Result<String, String> {
    let n = 10_000;
    let cfg = SamplerConfig { n_points: n, seed: 2024, ..Default::default() };
    let points = generate_points(&cfg, &WaterMask::builtin()).map_err(|e| e.to_string())?;
    ensure!(points.len() == n, "{} points", points.len());
    let oracle = MaskOracle::load();
    let wet = points.iter().filter(|p| oracle.is_water(p.lat, p.lon)).count();
    ensure!(wet == 0, "{wet} points on water cells");
    ensure!(points.iter().all(|p| (-56.0..=84.0).contains(&p.lat)), "latitude out of range");

    let uniform = generate_points(&SamplerConfig { seed: 7, ..cfg }, &WaterMask::all_land(180)).map_err(|e| e.to_string())?;
    let bin = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * 8.0).floor() as usize).min(7);
    let mut counts = [[0u32; 8]; 8];
    for p in &uniform {
        counts[bin(p.lat, -56.0, 84.0)][bin(p.lon, -180.0, 180.0)] += 1;
    }
    let expected = n as f64 / 64.0;
    let chi2: f64 = counts.iter().flatten().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2);
    ensure!(p.is_finite() && p > 0.01, "chi-square {chi2:.1}, p = {p:.4}");
    Ok(format!("0 water points, chi-square p = {p:.3}"))
}

/// Compensated sum, so the reference mean does not depend on summation order.
fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

struct Reference {
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
}

fn reference_stats(values: &[f64]) -> Reference {
    let n = values.len() as f64;
    let mean = neumaier(values.iter().copied()) / n;
    let var = neumaier(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    Reference {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
    }
}

fn reference_u8(unit: f64) -> u8 {
    (unit.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn random_raster(rng: &mut ChaCha8Rng) -> Raster {
    let (w, h) = (rng.random_range(1..40usize), rng.random_range(1..40usize));
    let (offset, scale) = (rng.random_range(-50.0..50.0f32), rng.random_range(0.01..5000.0f32));
    let with_nodata = rng.random_bool(0.3);
    let plane: Vec<f32> = (0..w * h)
        .map(|i| if with_nodata && i % 7 == 3 { -9999.0 } else { offset.abs() + scale * rng.random::<f32>() })
        .collect();
    Raster::new(w, h, vec![("VV".into(), plane)], -9999.0).unwrap()
}

fn normalization() -> Result<String, String> {
    // Worked examples first.
    let one = |v: Vec<f32>| Raster::new(v.len(), 1, vec![("VV".into(), v)], f32::NAN).unwrap();
    let plane = |r: &Raster| r.band("VV").unwrap().to_vec();
    let s = stats_of(&one(vec![0.0, 2.0]), &["VV"]).unwrap();
    ensure!(s.mean == 1.0 && s.std == 1.0, "stats of [0, 2]: {s:?}");
    let r = one(vec![0.0, 5.0, 10.0, 20.0]);
    ensure!(plane(&normalize_minmax(&r, &stats_of(&r, &["VV"]).unwrap())) == [0.0, 0.25, 0.5, 1.0], "min-max example");
    let r = one(vec![0.0, 2.0]);
    ensure!(plane(&normalize_std(&r, &stats_of(&r, &["VV"]).unwrap())) == [-1.0, 1.0], "standardization example");
    let r = one(vec![0.0, 5.0, 10.0]);
    ensure!(plane(&normalize_max(&r, &stats_of(&r, &["VV"]).unwrap())) == [0.0, 0.5, 1.0], "max example");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let modes = [NormalizationMode::MinMax, NormalizationMode::Standardize, NormalizationMode::MaxDiv];
    let mut worst = 0.0f64;
    for mode in modes {
        for case in 0..200 {
            let r = random_raster(&mut rng);
            let data = r.band("VV").unwrap();
            let valid: Vec<f64> = data.iter().filter(|v| **v != -9999.0).map(|v| *v as f64).collect();
            if valid.is_empty() {
                continue;
            }
            let rs = reference_stats(&valid);
            let reference = |x: f64| -> Option<(f64, f64)> {
                match mode {
                    NormalizationMode::MinMax if rs.max > rs.min => {
                        let y = (x - rs.min) / (rs.max - rs.min);
                        Some((y, y))
                    }
                    NormalizationMode::Standardize if rs.std > 0.0 => {
                        let y = (x - rs.mean) / rs.std;
                        Some((y, (y.clamp(-3.0, 3.0) + 3.0) / 6.0))
                    }
                    NormalizationMode::MaxDiv if rs.max != 0.0 => {
                        let y = x / rs.max;
                        Some((y, y))
                    }
                    _ => None,
                }
            };
            let stats = stats_of(&r, &["VV"]).unwrap();
            let out = match mode {
                NormalizationMode::MinMax => normalize_minmax(&r, &stats),
                NormalizationMode::Standardize => normalize_std(&r, &stats),
                _ => normalize_max(&r, &stats),
            };
            let img = render_u8(&r, Satellite::S1, mode, StatsScope::Image).map_err(|e| e.to_string())?;
            for (i, (&x, &y)) in data.iter().zip(out.band("VV").unwrap()).enumerate() {
                if x == -9999.0 {
                    ensure!(y == -9999.0 && img.data[i] == 0, "{mode:?} case {case}: nodata not preserved");
                    continue;
                }
                let (expect, unit) = reference(x as f64).unwrap_or((0.0, 0.0));
                let err = (y as f64 - expect).abs() / expect.abs().max(1.0);
                worst = worst.max(err);
                ensure!(err.is_finite() && err <= 1e-6, "{mode:?} case {case} pixel {i}: {y} vs {expect}");
                if mode != NormalizationMode::Standardize {
                    ensure!((0.0..=1.0).contains(&y), "{mode:?} case {case}: {y} outside [0, 1]");
                }
                ensure!(
                    img.data[i] == reference_u8(unit),
                    "{mode:?} case {case} pixel {i}: u8 {} vs {}",
                    img.data[i],
                    reference_u8(unit)
                );
            }
        }
    }
    Ok(format!("600 rasters, worst relative error {worst:.1e}"))
}

fn brute_force_best(reports: &[(QualityReport, chrono::DateTime<Utc>)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..reports.len() {
        if reports[i].0.verdict != Verdict::Pass {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (a, ta) = (&reports[i].0, reports[i].1);
                let (c, tc) = (&reports[b].0, reports[b].1);
                a.score < c.score || (a.score == c.score && ta < tc)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn scored_mock_product(satellite: Satellite, defect: Defect) -> Result<f64, String> {
    let provider = MockProvider::new(3, Scenario { products_per_month: 3, rules: vec![Rule { defect, ..Default::default() }] });
    let month: YearMonth = "2020-04".parse().unwrap();
    let q = ProductQuery {
        footprint: footprint_of(GeoPoint { lat: 45.0, lon: 7.0 }, 200, 10.0).unwrap(),
        satellite,
        start: month.start(),
        end: month.end(),
        bands: satellite.default_bands(),
        max_candidates: 3,
    };
    let found = query(&provider, &q).map_err(|e| e.to_string())?;
    let r = fetch(&provider, &found[0], &q.bands, &q.footprint).map_err(|e| e.to_string())?;
    let report = score_candidate(&r, satellite, &CleanerConfig::default());
    let (measured, injected) = if defect.cloud_fraction > 0.0 {
        (report.cloud_fraction, defect.cloud_fraction)
    } else {
        (report.missing_fraction, defect.missing_fraction)
    };
    if report.verdict != Verdict::Fail {
        return Err(format!("{satellite:?} product with {defect:?} was not rejected"));
    }
    if (measured - injected).abs() > 0.02 {
        return Err(format!("{satellite:?}: measured {measured:.4}, injected {injected}"));
    }
    Ok(measured)
}

fn cleaner() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    for case in 0..1000 {
        let thresholds = Thresholds { missing_max: rng.random_range(0.0..0.2), cloud_max: rng.random_range(0.0..0.5) };
        let len = rng.random_range(0..6);
        let reports: Vec<_> = (0..len)
            .map(|_| {
                // Coarse values so that score and time ties actually occur.
                let missing = rng.random_range(0..6) as f64 * 0.04;
                let cloud = rng.random_range(0..6) as f64 * 0.1;
                let t = base + chrono::Duration::hours(rng.random_range(0..3) * 47);
                (QualityReport::new(missing, cloud, thresholds), t)
            })
            .collect();
        let got = select_best(&reports);
        let want = brute_force_best(&reports);
        ensure!(got == want, "case {case}: selected {got:?}, expected {want:?}");
    }
    let cloud = scored_mock_product(Satellite::S2, Defect { cloud_fraction: 0.9, ..Default::default() })?;
    let s2_missing = scored_mock_product(Satellite::S2, Defect { missing_fraction: 0.25, ..Default::default() })?;
    let s1_missing = scored_mock_product(Satellite::S1, Defect { missing_fraction: 0.25, ..Default::default() })?;
    Ok(format!("1000 lists; cloud {cloud:.3}, missing {s2_missing:.3}/{s1_missing:.3}"))
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> PngImage {
    PngImage { width: w, height: h, channels, data: (0..w * h * channels).map(|_| rng.random()).collect() }
}

fn patch_reassembly() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..200 {
        let (w, h) = (rng.random_range(1..120usize), rng.random_range(1..120usize));
        let p = rng.random_range(1..=w.min(h));
        let c = if rng.random_bool(0.5) { 1 } else { 3 };
        let img = random_image(&mut rng, w, h, c);
        let grid = PatchGrid::new(w, h, p, p).map_err(|e| e.to_string())?;
        let (cols, rows) = (w / p, h / p);
        ensure!(grid.count() == rows * cols, "case {case}: {} patches, expected {}", grid.count(), rows * cols);
        let patches = extract_patches(&img, &grid);
        let (sw, sh) = (cols * p, rows * p);
        let mut stitched = vec![0u8; sw * sh * c];
        for (r, col, patch) in &patches {
            for y in 0..p {
                let dst = ((r * p + y) * sw + col * p) * c;
                stitched[dst..dst + p * c].copy_from_slice(&patch.data[y * p * c..(y + 1) * p * c]);
            }
        }
        let expected: Vec<u8> = (0..sh).flat_map(|y| img.data[y * w * c..(y * w + sw) * c].to_vec()).collect();
        ensure!(stitched == expected, "case {case}: {w}x{h} patch {p} does not reassemble");
    }
    let full = PatchGrid::new(1000, 1000, 250, 250).map_err(|e| e.to_string())?;
    ensure!(full.count() == 16, "1000x1000 at 250 gave {}", full.count());

    let grid = PatchGrid::new(100, 60, 20, 20).unwrap();
    let months: Vec<YearMonth> = ["2020-03", "2020-01", "2020-02"].iter().map(|m| m.parse().unwrap()).collect();
    let series: Vec<(YearMonth, PngImage)> = months.iter().map(|m| (*m, random_image(&mut rng, 100, 60, 3))).collect();
    let preview = build_preview(&series, &grid).map_err(|e| e.to_string())?;
    let mut chronological = series.clone();
    chronological.sort_by_key(|(m, _)| *m);
    for (row, (_, img)) in chronological.iter().enumerate() {
        for (k, (gr, gc, _)) in extract_patches(img, &grid).iter().enumerate() {
            for y in 0..20 {
                let src = ((gr * 20 + y) * 100 + gc * 20) * 3;
                let dst = ((row * 20 + y) * preview.width + k * 20) * 3;
                ensure!(
                    preview.data[dst..dst + 60] == img.data[src..src + 60],
                    "preview cell ({row}, {k}) differs from the source patch"
                );
            }
        }
    }
    Ok("200 random grids, 16 patches at 1000/250, preview cells exact".into())
}

fn codecs() -> Result<String, String> {
    let ym = |s: &str| s.parse::<YearMonth>().unwrap();
    let examples = [
        (LayoutCoord { satellite: Satellite::S2, scene_id: 0, month: ym("2020-01"), rank: 0, kind: FileKind::Raw }, "Sentinel-2/scene_0000/2020-01/raw_0.tif"),
        (LayoutCoord { satellite: Satellite::S1, scene_id: 3, month: ym("2020-07"), rank: 2, kind: FileKind::Converted }, "Sentinel-1/scene_0003/2020-07/img_2.png"),
    ];
    for (c, text) in &examples {
        ensure!(relative_path(c) == *text, "{} != {text}", relative_path(c));
    }
    for (args, text) in [((3, "2020-01", 2, 5), "scene_0003_2020-01_r02_c05.png"), ((0, "2020-12", 0, 0), "scene_0000_2020-12_r00_c00.png")] {
        let got = patch_filename(args.0, ym(args.1), args.2, args.3);
        ensure!(got == text, "{got} != {text}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let kinds = [FileKind::Raw, FileKind::Converted, FileKind::ConvertedTiff];
    for _ in 0..2000 {
        let c = LayoutCoord {
            satellite: Satellite::ALL[rng.random_range(0..2)],
            scene_id: rng.random_range(0..10_000),
            month: YearMonth::new(rng.random_range(1970..2100), rng.random_range(1..=12)).unwrap(),
            rank: rng.random_range(0..10),
            kind: kinds[rng.random_range(0..3)],
        };
        ensure!(parse_relative(&relative_path(&c)) == Some((c, false)), "layout {c:?}");
        ensure!(parse_relative(&discarded_relative_path(&c)) == Some((c, true)), "discarded layout {c:?}");
        let id = review_item_id(c.scene_id, c.satellite, c.month, c.rank);
        ensure!(parse_review_item_id(&id) == Some((c.scene_id, c.satellite, c.month, c.rank)), "review id {id}");
        let (row, col) = (rng.random_range(0..100), rng.random_range(0..100));
        let name = parse_patch_filename(&patch_filename(c.scene_id, c.month, row, col))
            .ok_or_else(|| format!("patch name for {c:?} did not parse"))?;
        ensure!((name.scene_id, name.month, name.row, name.col) == (c.scene_id, c.month, row, col), "patch name {c:?}");
    }
    Ok("2000 random coordinates, 4 template examples".into())
}

fn resumability() -> Result<String, String> {
    let small = |root: &Path| {
        config(root, &[("sampler.n_points", "2"), ("sampler.seed", "31"), ("sampler.scene_px", "100"), ("extract.patch", "50")])
    };
    let reference_dir = tempfile::tempdir().unwrap();
    run_full_auto(&small(reference_dir.path()), &NoProgress).map_err(|e| e.to_string())?;
    let reference = manifest(reference_dir.path());
    for k in 0..Stage::ALL.len() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        run_stages(&cfg, &Stage::ALL[..=k], false, &NoProgress).map_err(|e| e.to_string())?;
        run_full_auto(&cfg, &NoProgress).map_err(|e| e.to_string())?;
        ensure!(manifest(dir.path()) == reference, "resuming after {} diverged", Stage::ALL[k]);
    }
    Ok(format!("{} interruption points", Stage::ALL.len()))
}
