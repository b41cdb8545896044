use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};

use super::config::{ConfigError, PipelineConfig, ProviderConfig};
use crate::catalog::{http::HttpProvider, mock::MockProvider, plan_downloads, run_plan, CatalogProvider};
use crate::clean::{clean_auto, Decision};
use crate::convert::convert_store;
use crate::month::YearMonth;
use crate::patches::extract_store;
use crate::raster::read_geotiff_header;
use crate::sampler::{footprint_of, generate_points, load_points, points_csv, GeoPoint, WaterMask};
use crate::stage::{Progress, Stage, StageStatus};
use crate::store::{
    discarded_relative_path, relative_path, write_atomic, Candidate, DatasetManifest, DatasetStore, FileKind,
    LayoutCoord, MonthEntry, Region, SatelliteMonth, StoreError, POINTS_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot run {stage}: {requires} has not completed")]
    MissingPrerequisite { stage: Stage, requires: Stage },
    #[error("{stage} failed: {message}")]
    StageFailed { stage: Stage, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::MissingPrerequisite { stage, .. } | PipelineError::StageFailed { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    /// False when a full-auto run found the stage already done.
    pub ran: bool,
    pub summary: String,
}

pub fn open_store(cfg: &PipelineConfig) -> Result<DatasetStore, PipelineError> {
    std::fs::create_dir_all(&cfg.output_root).map_err(|e| {
        ConfigError::Invalid(format!("cannot create output root {}: {e}", cfg.output_root.display()))
    })?;
    Ok(DatasetStore::open(&cfg.output_root)?)
}

/// The configured catalog; mock providers learn the scene centers so
/// scene-specific scenario rules apply.
pub fn build_provider(cfg: &PipelineConfig, scenes: Vec<GeoPoint>) -> Result<Arc<dyn CatalogProvider>, ConfigError> {
    Ok(match &cfg.provider {
        ProviderConfig::Mock { seed, .. } => Arc::new(MockProvider::new(*seed, cfg.mock_scenario()?).with_scenes(scenes)),
        ProviderConfig::Url(url) => Arc::new(
            HttpProvider::new(url, cfg.timeout).map_err(|e| ConfigError::Invalid(format!("provider: {e}")))?,
        ),
    })
}

/// Runs exactly one stage after checking its prerequisite. Downstream stages
/// are marked not run since their outputs may now be stale.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, progress: &dyn Progress) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let store = open_store(cfg)?;
    run_stage_in(&store, cfg, stage, progress)
}

fn run_stage_in(
    store: &DatasetStore,
    cfg: &PipelineConfig,
    stage: Stage,
    progress: &dyn Progress,
) -> Result<StageOutcome, PipelineError> {
    store.update(|m: &mut DatasetManifest| {
        if let Some(requires) = stage.prerequisite() {
            if m.status(requires) != StageStatus::Done {
                return Err(PipelineError::MissingPrerequisite { stage, requires });
            }
        }
        m.set_status(stage, StageStatus::Running);
        m.invalidate_after(stage);
        Ok(())
    })?;
    log::info!("running {stage}");
    let result = match stage {
        Stage::Generate => generate(store, cfg),
        Stage::Download => download(store, cfg, progress),
        Stage::Convert => convert_store(store, cfg.convert_mode, cfg.stats_scope, progress)
            .map(|r| {
                for (path, e) in &r.errors {
                    log::warn!("{path}: {e}");
                }
                format!("converted {} images, {} errors", r.converted, r.errors.len())
            })
            .map_err(|e| e.to_string()),
        Stage::Clean => clean_auto(store, &cfg.clean, progress)
            .map(|r| {
                format!(
                    "scored {}, kept {}, discarded {}, pending {}, unfavorable slots {}, errors {}",
                    r.scored,
                    r.kept,
                    r.discarded,
                    r.pending,
                    r.unfavorable,
                    r.errors.len()
                )
            })
            .map_err(|e| e.to_string()),
        Stage::Extract => extract_store(store, &cfg.extract, progress)
            .map(|r| format!("{} patches from {} images, {} previews", r.patches, r.images, r.previews))
            .map_err(|e| e.to_string()),
    };
    let status = if result.is_ok() { StageStatus::Done } else { StageStatus::Failed };
    store.update(|m: &mut DatasetManifest| {
        m.set_status(stage, status);
        Ok::<_, StoreError>(())
    })?;
    match result {
        Ok(summary) => {
            progress.log(&format!("{stage}: {summary}"));
            Ok(StageOutcome { stage, ran: true, summary })
        }
        Err(message) => {
            progress.log(&format!("{stage} failed: {message}"));
            Err(PipelineError::StageFailed { stage, message })
        }
    }
}

/// Runs every stage in order, skipping those already done.
pub fn run_full_auto(cfg: &PipelineConfig, progress: &dyn Progress) -> Result<Vec<StageOutcome>, PipelineError> {
    run_stages(cfg, &Stage::ALL, true, progress)
}

/// Runs `stages` in order. With `skip_done`, stages whose status is already
/// done are left alone.
pub fn run_stages(
    cfg: &PipelineConfig,
    stages: &[Stage],
    skip_done: bool,
    progress: &dyn Progress,
) -> Result<Vec<StageOutcome>, PipelineError> {
    cfg.validate()?;
    let store = open_store(cfg)?;
    let mut out = Vec::with_capacity(stages.len());
    for &stage in stages {
        if skip_done && store.load_or_default()?.status(stage) == StageStatus::Done {
            progress.log(&format!("{stage}: already done"));
            out.push(StageOutcome { stage, ran: false, summary: "already done".into() });
            continue;
        }
        out.push(run_stage_in(&store, cfg, stage, progress)?);
    }
    Ok(out)
}

fn generate(store: &DatasetStore, cfg: &PipelineConfig) -> Result<String, String> {
    let points = match &cfg.points {
        Some(path) => load_points(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => {
            let mask = match &cfg.mask {
                Some(path) => WaterMask::read(path).map_err(|e| format!("{}: {e}", path.display()))?,
                None => WaterMask::builtin(),
            };
            // Recorded at the precision of points.csv so a re-import is identical.
            let round = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted float");
            generate_points(&cfg.sampler, &mask)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|p| GeoPoint { lat: round(p.lat), lon: round(p.lon) })
                .collect()
        }
    };
    write_atomic(&store.path(POINTS_FILE), points_csv(&points).as_bytes()).map_err(|e| e.to_string())?;
    let footprints = points
        .iter()
        .map(|p| footprint_of(*p, cfg.sampler.scene_size_px, cfg.sampler.gsd_m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    store
        .update(|m: &mut DatasetManifest| {
            let old = std::mem::take(&mut m.regions);
            for (i, (p, fp)) in points.iter().zip(&footprints).enumerate() {
                let overlaps = footprints
                    .iter()
                    .enumerate()
                    .filter(|(j, other)| *j != i && fp.bbox.intersects(&other.bbox))
                    .map(|(j, _)| j as u32)
                    .collect();
                let mut region =
                    Region { scene_id: i as u32, center: *p, bbox: fp.bbox, overlaps, months: vec![], previews: BTreeMap::new() };
                // An unchanged region keeps what later stages recorded for it.
                if let Some(prev) = old.iter().find(|r| r.scene_id == region.scene_id && r.center == *p && r.bbox == fp.bbox) {
                    region.months = prev.months.clone();
                    region.previews = prev.previews.clone();
                }
                m.regions.push(region);
            }
            Ok::<_, StoreError>(())
        })
        .map_err(|e| e.to_string())?;
    let overlapping = store.load().map_err(|e| e.to_string())?.regions.iter().filter(|r| !r.overlaps.is_empty()).count();
    Ok(format!("{} points, {overlapping} with overlapping footprints", points.len()))
}

fn download(store: &DatasetStore, cfg: &PipelineConfig, progress: &dyn Progress) -> Result<String, String> {
    let manifest = store.load().map_err(|e| e.to_string())?;
    let points: Vec<GeoPoint> = manifest.regions.iter().map(|r| r.center).collect();
    let plan = plan_downloads(&points, &cfg.plan).map_err(|e| e.to_string())?;
    let provider = build_provider(cfg, points).map_err(|e| e.to_string())?;
    progress.set_total(Stage::Download, plan.tasks.len() as u64);
    let report = run_plan(&plan, provider.as_ref(), store.root(), &cfg.run, progress);
    let months = cfg.plan.from.series(cfg.plan.months);
    store
        .update(|m: &mut DatasetManifest| {
            for region in &mut m.regions {
                region.months = rebuild_months(store.root(), region, &months, cfg);
                region.previews.clear();
            }
            Ok::<_, StoreError>(())
        })
        .map_err(|e| e.to_string())?;
    let summary = format!(
        "{} tasks: {} downloaded, {} already present, {} not offered, {} failed",
        report.tasks.len(),
        report.ok(),
        report.skipped(),
        report.empty(),
        report.failed()
    );
    if report.failed() > 0 {
        return Err(summary);
    }
    Ok(summary)
}

/// Candidates found on disk for each planned slot. Decisions and reports
/// recorded earlier for the same product are kept; selections are left to
/// the cleaner.
fn rebuild_months(root: &Path, region: &Region, months: &[YearMonth], cfg: &PipelineConfig) -> Vec<MonthEntry> {
    months
        .iter()
        .map(|&month| {
            let previous = region.month(month);
            let satellites = cfg
                .plan
                .satellites
                .iter()
                .map(|&satellite| {
                    let old = previous.and_then(|p| p.satellites.get(&satellite));
                    let candidates = (0..cfg.plan.max_candidates as u32)
                        .filter_map(|rank| {
                            let coord = LayoutCoord { satellite, scene_id: region.scene_id, month, rank, kind: FileKind::Raw };
                            found_candidate(root, &coord, old)
                        })
                        .collect();
                    (satellite, SatelliteMonth { candidates, selected: None, unfavorable: false })
                })
                .collect();
            MonthEntry { month, satellites }
        })
        .collect()
}

fn found_candidate(root: &Path, coord: &LayoutCoord, old: Option<&SatelliteMonth>) -> Option<Candidate> {
    let main = relative_path(coord);
    let discarded = discarded_relative_path(coord);
    let raw_path = [main, discarded].into_iter().find(|p| root.join(p).is_file())?;
    let header = match read_geotiff_header(root.join(&raw_path)) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("skipping unreadable {raw_path}: {e}");
            return None;
        }
    };
    let product_id = header.metadata.get("product_id").cloned().unwrap_or_default();
    let acquired_at = header
        .metadata
        .get("acquired_at")
        .and_then(|t| t.parse::<DateTime<Utc>>().ok())
        .unwrap_or_else(|| coord.month.midpoint());
    let fresh = Candidate {
        rank: coord.rank,
        product_id,
        acquired_at,
        raw_path: raw_path.clone(),
        converted_path: None,
        report: None,
        decision: Decision::Pending,
        decided_by: None,
    };
    let kept = old
        .and_then(|sm| sm.candidates.iter().find(|c| c.rank == coord.rank && c.product_id == fresh.product_id))
        .map(|c| Candidate {
            raw_path: raw_path.clone(),
            converted_path: c.converted_path.clone().filter(|p| root.join(p).is_file()),
            ..c.clone()
        });
    Some(kept.unwrap_or(fresh))
}
