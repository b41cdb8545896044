//! Candidate quality scoring, best-of-month selection and the manual review
//! queue.
//!
//! A candidate is scored on its raw raster: the fraction of missing pixels
//! (nodata, black, or border gray-fill) plus, for Sentinel-2, the fraction of
//! cloudy pixels from the QA60 band. The lowest-scoring passing candidate of
//! each (scene, month, satellite) is kept; the others move to `discarded/`.

use std::cmp::Ordering;
use std::fs;
use std::io;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::month::YearMonth;
use crate::raster::{read_geotiff, Raster, RasterError};
use crate::satellite::{Satellite, QA60};
use crate::stage::{Progress, Stage, StageStatus};
use crate::store::{
    discarded_relative_path, parse_relative, relative_path, Candidate, DatasetManifest, DatasetStore, SatelliteMonth,
    StoreError,
};

const OPAQUE_CLOUD_BIT: u32 = 1 << 10;
const CIRRUS_BIT: u32 = 1 << 11;
const BRIGHT_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub missing_max: f64,
    pub cloud_max: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { missing_max: 0.05, cloud_max: 0.30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerConfig {
    pub thresholds: Thresholds,
    /// Black level as a fraction of the satellite's full scale.
    pub black_threshold: f64,
    /// Minimum area of a border gray-fill rectangle, as a fraction of the image.
    pub gray_min_area: f64,
    /// Leave every non-human decision pending for review.
    pub manual: bool,
}

impl Default for CleanerConfig {
    fn default() -> Self {
        Self { thresholds: Thresholds::default(), black_threshold: 1e-4, gray_min_area: 0.01, manual: false }
    }
}

impl CleanerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must be within [0, 1], got {v}"))
            }
        };
        unit("missing_max", self.thresholds.missing_max)?;
        unit("cloud_max", self.thresholds.cloud_max)?;
        unit("black_threshold", self.black_threshold)?;
        unit("gray_min_area", self.gray_min_area)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub missing_fraction: f64,
    pub cloud_fraction: f64,
    pub score: f64,
    pub verdict: Verdict,
    pub thresholds_used: Thresholds,
    /// Cloud fraction came from the brightness fallback, not QA60.
    #[serde(default)]
    pub cloud_low_confidence: bool,
}

impl QualityReport {
    pub fn new(missing_fraction: f64, cloud_fraction: f64, thresholds: Thresholds) -> Self {
        let pass = missing_fraction <= thresholds.missing_max && cloud_fraction <= thresholds.cloud_max;
        Self {
            missing_fraction,
            cloud_fraction,
            score: missing_fraction + cloud_fraction,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            thresholds_used: thresholds,
            cloud_low_confidence: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Pending,
    Keep,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecidedBy {
    Auto,
    Human,
}

/// Per-pixel missing-data rule for one satellite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingRule {
    /// Absolute sample level below which a band counts as black.
    pub black_level: f64,
    pub gray_min_area: f64,
}

impl MissingRule {
    pub fn for_satellite(satellite: Satellite, cfg: &CleanerConfig) -> Self {
        Self { black_level: cfg.black_threshold * satellite.full_scale(), gray_min_area: cfg.gray_min_area }
    }
}

fn data_planes(r: &Raster) -> Vec<&[f32]> {
    let planes: Vec<&[f32]> = r.bands().iter().filter(|b| b.name != QA60).map(|b| b.data.as_slice()).collect();
    if planes.is_empty() {
        r.bands().iter().map(|b| b.data.as_slice()).collect()
    } else {
        planes
    }
}

/// Flags missing pixels: every data band is nodata or below the black level,
/// or the pixel lies in a border-touching constant rectangle of at least
/// `gray_min_area` of the image.
pub fn missing_mask(r: &Raster, rule: &MissingRule) -> Vec<bool> {
    let planes = data_planes(r);
    let n = r.pixel_count();
    let mut mask: Vec<bool> = (0..n)
        .map(|i| planes.iter().all(|p| r.is_nodata(p[i]) || (p[i] as f64) < rule.black_level))
        .collect();
    let min_area = rule.gray_min_area * n as f64;
    mark_gray_fill(&planes, r.width(), r.height(), min_area, &mut mask);
    mask
}

pub fn missing_fraction(r: &Raster, rule: &MissingRule) -> f64 {
    let mask = missing_mask(r, rule);
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

fn same_pixel(planes: &[&[f32]], a: usize, b: usize) -> bool {
    planes.iter().all(|p| p[a].to_bits() == p[b].to_bits())
}

/// Marks the union of all maximal constant rectangles anchored on each image
/// side whose area reaches `min_area`.
fn mark_gray_fill(planes: &[&[f32]], w: usize, h: usize, min_area: f64, mask: &mut [bool]) {
    type Index = fn(usize, usize, usize, usize) -> usize;
    let sides: [(usize, usize, Index); 4] = [
        (h, w, |i, d, w, _| i * w + d),
        (h, w, |i, d, w, _| i * w + (w - 1 - d)),
        (w, h, |i, d, w, _| d * w + i),
        (w, h, |i, d, w, h| (h - 1 - d) * w + i),
    ];
    for (lines, depth, idx) in sides {
        let at = |i: usize, d: usize| idx(i, d, w, h);
        let run: Vec<usize> = (0..lines)
            .map(|i| {
                let anchor = at(i, 0);
                (1..depth).take_while(|&d| same_pixel(planes, anchor, at(i, d))).count() + 1
            })
            .collect();
        let mut cover = vec![0usize; lines];
        let mut start = 0;
        while start < lines {
            let mut end = start + 1;
            while end < lines && same_pixel(planes, at(end - 1, 0), at(end, 0)) {
                end += 1;
            }
            cover_segment(&run[start..end], min_area, &mut cover[start..end]);
            start = end;
        }
        for (i, &c) in cover.iter().enumerate() {
            for d in 0..c {
                mask[at(i, d)] = true;
            }
        }
    }
}

/// Largest-rectangle-in-histogram sweep: for every bar, the widest span in
/// which it is the minimum; spans reaching `min_area` raise `cover`.
fn cover_segment(heights: &[usize], min_area: f64, cover: &mut [usize]) {
    let n = heights.len();
    let mut left = vec![0usize; n];
    let mut right = vec![n - 1; n];
    let mut stack: Vec<usize> = Vec::new();
    for j in 0..n {
        while let Some(&top) = stack.last() {
            if heights[top] >= heights[j] {
                stack.pop();
            } else {
                break;
            }
        }
        left[j] = stack.last().map_or(0, |&t| t + 1);
        stack.push(j);
    }
    stack.clear();
    for j in (0..n).rev() {
        while let Some(&top) = stack.last() {
            if heights[top] >= heights[j] {
                stack.pop();
            } else {
                break;
            }
        }
        right[j] = stack.last().map_or(n - 1, |&t| t - 1);
        stack.push(j);
    }
    for j in 0..n {
        let area = heights[j] * (right[j] - left[j] + 1);
        if area as f64 >= min_area {
            for c in &mut cover[left[j]..=right[j]] {
                *c = (*c).max(heights[j]);
            }
        }
    }
}

/// Fraction of pixels with the opaque-cloud or cirrus bit set.
pub fn cloud_fraction(qa60: &[f32]) -> f64 {
    if qa60.is_empty() {
        return 0.0;
    }
    let cloudy = qa60
        .iter()
        .filter(|&&v| v.is_finite() && v >= 0.0 && (v as u32) & (OPAQUE_CLOUD_BIT | CIRRUS_BIT) != 0)
        .count();
    cloudy as f64 / qa60.len() as f64
}

/// Fraction of pixels whose visible bands all exceed 90% of full scale.
pub fn brightness_cloud_fraction(r: &Raster, satellite: Satellite) -> f64 {
    let planes: Vec<&[f32]> = satellite.render_bands().iter().filter_map(|b| r.band(b)).collect();
    if planes.is_empty() {
        return 0.0;
    }
    let level = BRIGHT_FRACTION * satellite.full_scale();
    let bright = (0..r.pixel_count()).filter(|&i| planes.iter().all(|p| p[i] as f64 > level)).count();
    bright as f64 / r.pixel_count() as f64
}

pub fn score_candidate(r: &Raster, satellite: Satellite, cfg: &CleanerConfig) -> QualityReport {
    let missing = missing_fraction(r, &MissingRule::for_satellite(satellite, cfg));
    let (cloud, low_confidence) = match satellite {
        Satellite::S1 => (0.0, false),
        Satellite::S2 => match r.band(QA60) {
            Some(qa) => (cloud_fraction(qa), false),
            None => (brightness_cloud_fraction(r, satellite), true),
        },
    };
    let mut report = QualityReport::new(missing, cloud, cfg.thresholds);
    report.cloud_low_confidence = low_confidence;
    report
}

/// Index of the lowest-score passing report; ties go to the earliest
/// acquisition, then the lower index.
pub fn select_best(reports: &[(QualityReport, DateTime<Utc>)]) -> Option<usize> {
    reports
        .iter()
        .enumerate()
        .filter(|(_, (r, _))| r.verdict == Verdict::Pass)
        .min_by(|(ia, (ra, ta)), (ib, (rb, tb))| {
            ra.score.total_cmp(&rb.score).then(ta.cmp(tb)).then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
}

/// Recomputes decisions, the selection and the unfavorable flag of one slot.
/// Human decisions are never changed.
pub fn decide_slot(sm: &mut SatelliteMonth, manual: bool) {
    let is_human = |c: &Candidate| c.decided_by == Some(DecidedBy::Human);
    if manual {
        for c in sm.candidates.iter_mut().filter(|c| !is_human(c)) {
            c.decision = Decision::Pending;
            c.decided_by = None;
        }
    } else {
        let human_keep = sm.candidates.iter().any(|c| is_human(c) && c.decision == Decision::Keep);
        let pool: Vec<usize> = (0..sm.candidates.len()).filter(|&i| !is_human(&sm.candidates[i])).collect();
        let scored: Vec<(usize, (QualityReport, DateTime<Utc>))> = pool
            .iter()
            .filter_map(|&i| sm.candidates[i].report.map(|r| (i, (r, sm.candidates[i].acquired_at))))
            .collect();
        let best = if human_keep {
            None
        } else {
            let reports: Vec<_> = scored.iter().map(|(_, r)| *r).collect();
            select_best(&reports).map(|k| scored[k].0)
        };
        for i in pool {
            let c = &mut sm.candidates[i];
            c.decision = if Some(i) == best { Decision::Keep } else { Decision::Discard };
            c.decided_by = Some(DecidedBy::Auto);
        }
    }
    sm.selected = selection(sm);
    sm.unfavorable = sm.selected.is_none() && !sm.candidates.iter().any(|c| c.decision == Decision::Pending);
}

/// The kept candidate to publish: human keeps first, then lowest score,
/// earliest acquisition, lowest rank.
fn selection(sm: &SatelliteMonth) -> Option<String> {
    sm.candidates
        .iter()
        .filter(|c| c.decision == Decision::Keep)
        .min_by(|a, b| keep_order(a, b))
        .map(|c| c.image_path().to_string())
}

fn keep_order(a: &Candidate, b: &Candidate) -> Ordering {
    let human = |c: &Candidate| c.decided_by != Some(DecidedBy::Human);
    let score = |c: &Candidate| c.report.map_or(f64::INFINITY, |r| r.score);
    human(a)
        .cmp(&human(b))
        .then(score(a).total_cmp(&score(b)))
        .then(a.acquired_at.cmp(&b.acquired_at))
        .then(a.rank.cmp(&b.rank))
}

fn move_to(store: &DatasetStore, path: &mut String, discarded: bool) -> io::Result<()> {
    let Some((coord, is_discarded)) = parse_relative(path) else { return Ok(()) };
    if is_discarded == discarded {
        return Ok(());
    }
    let target = if discarded { discarded_relative_path(&coord) } else { relative_path(&coord) };
    let (from, to) = (store.path(path), store.path(&target));
    if from.exists() {
        if let Some(dir) = to.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::rename(&from, &to)?;
    }
    *path = target;
    Ok(())
}

/// Moves discarded candidates' files into `discarded/` and everything else
/// back into the month folder, updating the recorded paths.
pub fn relocate_slot(store: &DatasetStore, sm: &mut SatelliteMonth) -> io::Result<()> {
    for c in &mut sm.candidates {
        let discard = c.decision == Decision::Discard;
        move_to(store, &mut c.raw_path, discard)?;
        if let Some(p) = &mut c.converted_path {
            move_to(store, p, discard)?;
        }
    }
    sm.selected = selection(sm);
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum CleanError {
    #[error("unknown review item `{0}`")]
    UnknownItem(String),
    #[error("review item `{0}` was already resolved by a human")]
    AlreadyResolved(String),
    #[error("a review decision must be Keep or Discard")]
    InvalidDecision,
    #[error("invalid cleaner configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CleanReport {
    pub scored: usize,
    pub kept: usize,
    pub discarded: usize,
    pub pending: usize,
    pub unfavorable: usize,
    /// (raw path, error) for candidates that could not be scored.
    pub errors: Vec<(String, String)>,
}

type SlotKey = (u32, YearMonth, Satellite, u32);

/// Scores every candidate in the manifest and records decisions. Rerunning
/// with the same inputs reproduces the same manifest.
pub fn clean_auto(store: &DatasetStore, cfg: &CleanerConfig, progress: &dyn Progress) -> Result<CleanReport, CleanError> {
    cfg.validate().map_err(CleanError::InvalidConfig)?;
    let manifest = store.load()?;
    let jobs: Vec<(SlotKey, String)> = manifest
        .slots()
        .flat_map(|(r, m, sat, sm)| {
            sm.candidates.iter().map(move |c| ((r.scene_id, m.month, sat, c.rank), c.raw_path.clone()))
        })
        .collect();
    progress.set_total(Stage::Clean, jobs.len() as u64);
    let scored: Vec<(SlotKey, Result<QualityReport, RasterError>)> = jobs
        .par_iter()
        .map(|(key, raw)| {
            let out = read_geotiff(store.path(raw)).map(|r| score_candidate(&r, key.2, cfg));
            progress.advance(Stage::Clean, 1);
            (*key, out)
        })
        .collect();

    store.update(|m: &mut DatasetManifest| {
        let mut report = CleanReport::default();
        for ((scene, month, sat, rank), result) in &scored {
            let Some(c) = candidate_mut(m, *scene, *month, *sat, *rank) else { continue };
            match result {
                Ok(q) => {
                    c.report = Some(*q);
                    report.scored += 1;
                }
                Err(e) => {
                    c.report = None;
                    report.errors.push((c.raw_path.clone(), e.to_string()));
                    progress.log(&format!("cannot score {}: {e}", c.raw_path));
                }
            }
        }
        for region in &mut m.regions {
            for me in &mut region.months {
                for sm in me.satellites.values_mut() {
                    decide_slot(sm, cfg.manual);
                    relocate_slot(store, sm)?;
                    for c in &sm.candidates {
                        match c.decision {
                            Decision::Keep => report.kept += 1,
                            Decision::Discard => report.discarded += 1,
                            Decision::Pending => report.pending += 1,
                        }
                    }
                    report.unfavorable += sm.unfavorable as usize;
                }
            }
        }
        Ok::<_, CleanError>(report)
    })
}

fn candidate_mut(
    m: &mut DatasetManifest,
    scene: u32,
    month: YearMonth,
    sat: Satellite,
    rank: u32,
) -> Option<&mut Candidate> {
    slot_mut(m, scene, month, sat)?.candidates.iter_mut().find(|c| c.rank == rank)
}

fn slot_mut(m: &mut DatasetManifest, scene: u32, month: YearMonth, sat: Satellite) -> Option<&mut SatelliteMonth> {
    m.regions
        .iter_mut()
        .find(|r| r.scene_id == scene)?
        .months
        .iter_mut()
        .find(|me| me.month == month)?
        .satellites
        .get_mut(&sat)
}

/// One candidate as presented for manual review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub scene_id: u32,
    pub satellite: Satellite,
    pub month: YearMonth,
    pub rank: u32,
    pub product_id: String,
    pub path: String,
    pub report: Option<QualityReport>,
    pub decision: Decision,
    pub decided_by: Option<DecidedBy>,
}

/// Stable review id, e.g. `0000-s2-2020-01-1`.
pub fn review_item_id(scene_id: u32, satellite: Satellite, month: YearMonth, rank: u32) -> String {
    format!("{scene_id:04}-{}-{month}-{rank}", satellite.short())
}

pub fn parse_review_item_id(id: &str) -> Option<(u32, Satellite, YearMonth, u32)> {
    let mut parts = id.splitn(3, '-');
    let scene: u32 = parts.next()?.parse().ok()?;
    let sat: Satellite = parts.next()?.parse().ok()?;
    let rest = parts.next()?;
    let (month, rank) = rest.rsplit_once('-')?;
    let month: YearMonth = month.parse().ok()?;
    let rank: u32 = rank.parse().ok()?;
    (review_item_id(scene, sat, month, rank) == id).then_some((scene, sat, month, rank))
}

fn review_item(scene_id: u32, month: YearMonth, sat: Satellite, c: &Candidate) -> ReviewItem {
    ReviewItem {
        id: review_item_id(scene_id, sat, month, c.rank),
        scene_id,
        satellite: sat,
        month,
        rank: c.rank,
        product_id: c.product_id.clone(),
        path: c.image_path().to_string(),
        report: c.report,
        decision: c.decision,
        decided_by: c.decided_by,
    }
}

/// Scored candidates still awaiting a decision.
pub fn list_pending(m: &DatasetManifest) -> Vec<ReviewItem> {
    m.slots()
        .flat_map(|(r, me, sat, sm)| {
            sm.candidates
                .iter()
                .filter(|c| c.decision == Decision::Pending && c.report.is_some())
                .map(move |c| review_item(r.scene_id, me.month, sat, c))
        })
        .collect()
}

/// Records a human decision and re-derives the month's selection. Any
/// earlier patch extraction is marked stale.
pub fn resolve_review(
    store: &DatasetStore,
    item_id: &str,
    decision: Decision,
    manual: bool,
) -> Result<ReviewItem, CleanError> {
    if decision == Decision::Pending {
        return Err(CleanError::InvalidDecision);
    }
    let (scene, sat, month, rank) =
        parse_review_item_id(item_id).ok_or_else(|| CleanError::UnknownItem(item_id.to_string()))?;
    store.update(|m: &mut DatasetManifest| {
        let sm = slot_mut(m, scene, month, sat).ok_or_else(|| CleanError::UnknownItem(item_id.to_string()))?;
        let c = sm
            .candidates
            .iter_mut()
            .find(|c| c.rank == rank)
            .ok_or_else(|| CleanError::UnknownItem(item_id.to_string()))?;
        if c.decided_by == Some(DecidedBy::Human) {
            return Err(CleanError::AlreadyResolved(item_id.to_string()));
        }
        c.decision = decision;
        c.decided_by = Some(DecidedBy::Human);
        decide_slot(sm, manual);
        relocate_slot(store, sm)?;
        let item = sm.candidates.iter().find(|c| c.rank == rank).map(|c| review_item(scene, month, sat, c));
        if m.status(Stage::Extract) == StageStatus::Done {
            m.set_status(Stage::Extract, StageStatus::NotRun);
        }
        Ok(item.expect("candidate still present"))
    })
}
