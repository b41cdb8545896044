use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clean::{DecidedBy, Decision, QualityReport};
use crate::month::YearMonth;
use crate::sampler::{BBox, GeoPoint};
use crate::satellite::Satellite;
use crate::stage::{Stage, StageStatus};

pub const MANIFEST_VERSION: u32 = 1;

/// The authoritative record of regions, candidates, decisions and stage status.
///
/// All paths are relative to the dataset root with `/` separators. Maps are
/// ordered so the serialized form is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub regions: Vec<Region>,
    pub stage_status: BTreeMap<Stage, StageStatus>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            regions: Vec::new(),
            stage_status: Stage::ALL.into_iter().map(|s| (s, StageStatus::NotRun)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub scene_id: u32,
    pub center: GeoPoint,
    pub bbox: BBox,
    /// Scenes whose footprints intersect this one.
    pub overlaps: Vec<u32>,
    pub months: Vec<MonthEntry>,
    /// Preview mosaic per satellite.
    pub previews: BTreeMap<Satellite, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthEntry {
    pub month: YearMonth,
    pub satellites: BTreeMap<Satellite, SatelliteMonth>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SatelliteMonth {
    pub candidates: Vec<Candidate>,
    pub selected: Option<String>,
    /// No candidate passed the quality thresholds (set by the cleaner).
    pub unfavorable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub rank: u32,
    pub product_id: String,
    pub acquired_at: DateTime<Utc>,
    pub raw_path: String,
    pub converted_path: Option<String>,
    pub report: Option<QualityReport>,
    pub decision: Decision,
    pub decided_by: Option<DecidedBy>,
}

impl Candidate {
    /// The file a selection refers to: the converted image when present.
    pub fn image_path(&self) -> &str {
        self.converted_path.as_deref().unwrap_or(&self.raw_path)
    }
}

impl DatasetManifest {
    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_status.get(&stage).copied().unwrap_or_default()
    }

    pub fn set_status(&mut self, stage: Stage, status: StageStatus) {
        self.stage_status.insert(stage, status);
    }

    /// Marks every stage after `stage` as not run.
    pub fn invalidate_after(&mut self, stage: Stage) {
        for s in stage.downstream() {
            self.set_status(s, StageStatus::NotRun);
        }
    }

    pub fn region(&self, scene_id: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.scene_id == scene_id)
    }

    /// Every (region, month, satellite) slot.
    pub fn slots(&self) -> impl Iterator<Item = (&Region, &MonthEntry, Satellite, &SatelliteMonth)> {
        self.regions.iter().flat_map(|r| {
            r.months.iter().flat_map(move |m| m.satellites.iter().map(move |(s, sm)| (r, m, *s, sm)))
        })
    }

    pub fn selected_count(&self) -> usize {
        self.slots().filter(|(.., sm)| sm.selected.is_some()).count()
    }
}

impl Region {
    pub fn month(&self, month: YearMonth) -> Option<&MonthEntry> {
        self.months.iter().find(|m| m.month == month)
    }

    /// Months in which every recorded satellite has a selected image.
    pub fn months_done(&self) -> usize {
        self.months
            .iter()
            .filter(|m| !m.satellites.is_empty() && m.satellites.values().all(|sm| sm.selected.is_some()))
            .count()
    }

    /// (month, satellite) slots marked unfavorable.
    pub fn unfavorable_count(&self) -> usize {
        self.months.iter().flat_map(|m| m.satellites.values()).filter(|sm| sm.unfavorable).count()
    }
}
