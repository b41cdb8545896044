use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ProductQuery;
use crate::month::YearMonth;
use crate::sampler::{footprint_of, GeoPoint, SamplerError};
use crate::satellite::Satellite;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("the date range covers no months")]
    EmptyDateRange,
    #[error("no points to plan downloads for")]
    NoPoints,
    #[error("invalid plan configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Footprint(#[from] SamplerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub from: YearMonth,
    pub months: u32,
    pub satellites: Vec<Satellite>,
    /// Bands per satellite; satellites missing here use their defaults.
    pub bands: BTreeMap<Satellite, Vec<String>>,
    pub max_candidates: usize,
    pub scene_px: u32,
    pub gsd_m: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            from: YearMonth::new(2020, 1).expect("valid month"),
            months: 12,
            satellites: Satellite::ALL.to_vec(),
            bands: BTreeMap::new(),
            max_candidates: 3,
            scene_px: 1000,
            gsd_m: 10.0,
        }
    }
}

impl PlanConfig {
    pub fn bands_for(&self, satellite: Satellite) -> Vec<String> {
        self.bands.get(&satellite).cloned().unwrap_or_else(|| satellite.default_bands())
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.months == 0 {
            return Err(PlanError::EmptyDateRange);
        }
        if self.satellites.is_empty() {
            return Err(PlanError::InvalidConfig("no satellites selected".into()));
        }
        if self.max_candidates == 0 {
            return Err(PlanError::InvalidConfig("candidates must be at least 1".into()));
        }
        if let Some(s) = self.satellites.iter().find(|s| self.bands_for(**s).is_empty()) {
            return Err(PlanError::InvalidConfig(format!("no bands selected for {s}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownloadTask {
    pub scene_id: u32,
    pub satellite: Satellite,
    pub month: YearMonth,
    pub rank: u32,
    pub query: ProductQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownloadPlan {
    pub tasks: Vec<DownloadTask>,
    pub months: u32,
}

/// One task per (scene, satellite, month, candidate rank), ordered in that
/// nesting. Scene ids are positions in `points`.
pub fn plan_downloads(points: &[GeoPoint], cfg: &PlanConfig) -> Result<DownloadPlan, PlanError> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(PlanError::NoPoints);
    }
    let mut tasks = Vec::with_capacity(points.len() * cfg.satellites.len() * cfg.months as usize * cfg.max_candidates);
    for (scene_id, p) in points.iter().enumerate() {
        let footprint = footprint_of(*p, cfg.scene_px, cfg.gsd_m)?;
        for &satellite in &cfg.satellites {
            let bands = cfg.bands_for(satellite);
            for month in cfg.from.series(cfg.months) {
                let query = ProductQuery {
                    footprint,
                    satellite,
                    start: month.start(),
                    end: month.end(),
                    bands: bands.clone(),
                    max_candidates: cfg.max_candidates,
                };
                for rank in 0..cfg.max_candidates as u32 {
                    tasks.push(DownloadTask { scene_id: scene_id as u32, satellite, month, rank, query: query.clone() });
                }
            }
        }
    }
    Ok(DownloadPlan { tasks, months: cfg.months })
}
