//! Pipeline configuration: built-in defaults, INI files and `section.key`
//! overrides share one key namespace.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::catalog::mock::Scenario;
use crate::catalog::{PlanConfig, RetryPolicy, RunOptions};
use crate::clean::CleanerConfig;
use crate::convert::{NormalizationMode, StatsScope};
use crate::month::YearMonth;
use crate::patches::ExtractConfig;
use crate::sampler::SamplerConfig;
use crate::satellite::Satellite;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {reason}")]
    File { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProviderConfig {
    /// Synthetic in-process catalog.
    Mock { seed: u64, scenario: Option<PathBuf> },
    /// Base URL of a catalog speaking the HTTP protocol.
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub output_root: PathBuf,
    pub sampler: SamplerConfig,
    /// Water mask file; the built-in 1° mask when absent.
    pub mask: Option<PathBuf>,
    /// Imports regions from a points CSV instead of sampling.
    pub points: Option<PathBuf>,
    pub plan: PlanConfig,
    pub provider: ProviderConfig,
    pub timeout: Duration,
    pub run: RunOptions,
    pub convert_mode: NormalizationMode,
    /// Per-satellite default when absent.
    pub stats_scope: Option<StatsScope>,
    pub clean: CleanerConfig,
    pub extract: ExtractConfig,
    pub bind: String,
    pub static_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("dataset"),
            sampler: SamplerConfig::default(),
            mask: None,
            points: None,
            plan: PlanConfig::default(),
            provider: ProviderConfig::Mock { seed: 0, scenario: None },
            timeout: Duration::from_secs(60),
            run: RunOptions::default(),
            convert_mode: NormalizationMode::MinMax,
            stats_scope: None,
            clean: CleanerConfig::default(),
            extract: ExtractConfig::default(),
            bind: "127.0.0.1:8080".into(),
            static_dir: None,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "output.root",
    "sampler.n_points",
    "sampler.seed",
    "sampler.lat_min",
    "sampler.lat_max",
    "sampler.lon_min",
    "sampler.lon_max",
    "sampler.max_rejections",
    "sampler.scene_px",
    "sampler.gsd",
    "sampler.mask",
    "sampler.points",
    "download.provider",
    "download.mock_seed",
    "download.mock_scenario",
    "download.from",
    "download.months",
    "download.satellites",
    "download.candidates",
    "download.s1_bands",
    "download.s2_bands",
    "download.workers",
    "download.max_attempts",
    "download.backoff_ms",
    "download.backoff_multiplier",
    "download.rate_limit",
    "download.timeout_s",
    "convert.mode",
    "convert.stats_scope",
    "clean.missing_max",
    "clean.cloud_max",
    "clean.black_threshold",
    "clean.gray_min_area",
    "clean.manual",
    "extract.patch",
    "extract.stride",
    "service.bind",
    "service.static_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), reason: "expected a boolean".into() }),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    /// Sets one `section.key` from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.trim();
        match k {
            "output.root" => self.output_root = PathBuf::from(value.trim()),
            "sampler.n_points" => self.sampler.n_points = parse(k, value)?,
            "sampler.seed" => self.sampler.seed = parse(k, value)?,
            "sampler.lat_min" => self.sampler.lat_range[0] = parse(k, value)?,
            "sampler.lat_max" => self.sampler.lat_range[1] = parse(k, value)?,
            "sampler.lon_min" => self.sampler.lon_range[0] = parse(k, value)?,
            "sampler.lon_max" => self.sampler.lon_range[1] = parse(k, value)?,
            "sampler.max_rejections" => self.sampler.max_rejections = parse(k, value)?,
            "sampler.scene_px" => {
                self.sampler.scene_size_px = parse(k, value)?;
                self.plan.scene_px = self.sampler.scene_size_px;
            }
            "sampler.gsd" => {
                self.sampler.gsd_m = parse(k, value)?;
                self.plan.gsd_m = self.sampler.gsd_m;
            }
            "sampler.mask" => self.mask = optional_path(value),
            "sampler.points" => self.points = optional_path(value),
            "download.provider" => {
                let v = value.trim();
                self.provider = if v.eq_ignore_ascii_case("mock") {
                    match &self.provider {
                        ProviderConfig::Mock { .. } => self.provider.clone(),
                        ProviderConfig::Url(_) => ProviderConfig::Mock { seed: 0, scenario: None },
                    }
                } else if v.starts_with("http://") || v.starts_with("https://") {
                    ProviderConfig::Url(v.into())
                } else {
                    return Err(ConfigError::BadValue {
                        key: k.into(),
                        value: value.into(),
                        reason: "expected `mock` or an http(s) URL".into(),
                    });
                };
            }
            "download.mock_seed" | "download.mock_scenario" => {
                let ProviderConfig::Mock { seed, scenario } = &mut self.provider else {
                    return Err(ConfigError::BadValue {
                        key: k.into(),
                        value: value.into(),
                        reason: "only applies to the mock provider".into(),
                    });
                };
                if k == "download.mock_seed" {
                    *seed = parse(k, value)?;
                } else {
                    *scenario = optional_path(value);
                }
            }
            "download.from" => self.plan.from = parse::<YearMonth>(k, value)?,
            "download.months" => self.plan.months = parse(k, value)?,
            "download.satellites" => {
                self.plan.satellites =
                    list(value).iter().map(|s| parse::<Satellite>(k, s)).collect::<Result<_, _>>()?;
            }
            "download.candidates" => self.plan.max_candidates = parse(k, value)?,
            "download.s1_bands" => self.set_bands(Satellite::S1, value),
            "download.s2_bands" => self.set_bands(Satellite::S2, value),
            "download.workers" => self.run.workers = parse(k, value)?,
            "download.max_attempts" => self.run.policy.max_attempts = parse(k, value)?,
            "download.backoff_ms" => self.run.policy.initial_backoff = Duration::from_millis(parse(k, value)?),
            "download.backoff_multiplier" => self.run.policy.multiplier = parse(k, value)?,
            "download.rate_limit" => self.run.policy.rate_limit = parse(k, value)?,
            "download.timeout_s" => self.timeout = Duration::from_secs_f64(parse::<f64>(k, value)?.max(0.0)),
            "convert.mode" => self.convert_mode = parse(k, value)?,
            "convert.stats_scope" => {
                self.stats_scope = match value.trim() {
                    "" | "auto" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "clean.missing_max" => self.clean.thresholds.missing_max = parse(k, value)?,
            "clean.cloud_max" => self.clean.thresholds.cloud_max = parse(k, value)?,
            "clean.black_threshold" => self.clean.black_threshold = parse(k, value)?,
            "clean.gray_min_area" => self.clean.gray_min_area = parse(k, value)?,
            "clean.manual" => self.clean.manual = parse_bool(k, value)?,
            "extract.patch" => self.extract.patch_px = parse(k, value)?,
            "extract.stride" => {
                self.extract.stride_px = match value.trim() {
                    "" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "service.bind" => self.bind = value.trim().into(),
            "service.static_dir" => self.static_dir = optional_path(value),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Band lists equal to the satellite default are not stored.
    fn set_bands(&mut self, satellite: Satellite, value: &str) {
        let bands = list(value);
        if bands == satellite.default_bands() {
            self.plan.bands.remove(&satellite);
        } else {
            self.plan.bands.insert(satellite, bands);
        }
    }

    /// Current value of a key in the form `set` accepts.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let join = |v: &[String]| v.join(",");
        Ok(match key {
            "output.root" => self.output_root.display().to_string(),
            "sampler.n_points" => self.sampler.n_points.to_string(),
            "sampler.seed" => self.sampler.seed.to_string(),
            "sampler.lat_min" => self.sampler.lat_range[0].to_string(),
            "sampler.lat_max" => self.sampler.lat_range[1].to_string(),
            "sampler.lon_min" => self.sampler.lon_range[0].to_string(),
            "sampler.lon_max" => self.sampler.lon_range[1].to_string(),
            "sampler.max_rejections" => self.sampler.max_rejections.to_string(),
            "sampler.scene_px" => self.sampler.scene_size_px.to_string(),
            "sampler.gsd" => self.sampler.gsd_m.to_string(),
            "sampler.mask" => path_str(&self.mask),
            "sampler.points" => path_str(&self.points),
            "download.provider" => match &self.provider {
                ProviderConfig::Mock { .. } => "mock".into(),
                ProviderConfig::Url(u) => u.clone(),
            },
            "download.mock_seed" => match &self.provider {
                ProviderConfig::Mock { seed, .. } => seed.to_string(),
                ProviderConfig::Url(_) => String::new(),
            },
            "download.mock_scenario" => match &self.provider {
                ProviderConfig::Mock { scenario, .. } => path_str(scenario),
                ProviderConfig::Url(_) => String::new(),
            },
            "download.from" => self.plan.from.to_string(),
            "download.months" => self.plan.months.to_string(),
            "download.satellites" => self.plan.satellites.iter().map(|s| s.short()).collect::<Vec<_>>().join(","),
            "download.candidates" => self.plan.max_candidates.to_string(),
            "download.s1_bands" => join(&self.plan.bands_for(Satellite::S1)),
            "download.s2_bands" => join(&self.plan.bands_for(Satellite::S2)),
            "download.workers" => self.run.workers.to_string(),
            "download.max_attempts" => self.run.policy.max_attempts.to_string(),
            "download.backoff_ms" => self.run.policy.initial_backoff.as_millis().to_string(),
            "download.backoff_multiplier" => self.run.policy.multiplier.to_string(),
            "download.rate_limit" => self.run.policy.rate_limit.to_string(),
            "download.timeout_s" => self.timeout.as_secs_f64().to_string(),
            "convert.mode" => self.convert_mode.name().into(),
            "convert.stats_scope" => self.stats_scope.map_or_else(|| "auto".into(), |s| s.to_string()),
            "clean.missing_max" => self.clean.thresholds.missing_max.to_string(),
            "clean.cloud_max" => self.clean.thresholds.cloud_max.to_string(),
            "clean.black_threshold" => self.clean.black_threshold.to_string(),
            "clean.gray_min_area" => self.clean.gray_min_area.to_string(),
            "clean.manual" => self.clean.manual.to_string(),
            "extract.patch" => self.extract.patch_px.to_string(),
            "extract.stride" => self.extract.stride_px.map(|s| s.to_string()).unwrap_or_default(),
            "service.bind" => self.bind.clone(),
            "service.static_dir" => path_str(&self.static_dir),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        })
    }

    /// All keys with their current values.
    pub fn entries(&self) -> BTreeMap<String, String> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    /// Applies overrides in order, stopping at the first bad one.
    pub fn apply<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), ConfigError> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses `key=value` with the key in `section.key` form.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("expected section.key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    pub fn from_ini_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_ini_str(text)?;
        Ok(cfg)
    }

    /// Applies every key of an INI document on top of the current values.
    pub fn merge_ini_str(&mut self, text: &str) -> Result<(), ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(ConfigError::UnknownKey(k.into()));
                }
                continue;
            };
            // Mock keys depend on the provider, so apply it first.
            let mut entries: Vec<(&str, &str)> = props.iter().collect();
            entries.sort_by_key(|(k, _)| *k != "provider");
            for (k, v) in entries {
                self.set(&format!("{section}.{k}"), v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::File { path: path.into(), reason: e.to_string() })?;
        Self::from_ini_str(&text)
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for key in KEYS {
            let (section, name) = key.split_once('.').expect("dotted key");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            let value = self.get(key).expect("listed key");
            if value.is_empty() && matches!(*key, "download.mock_seed" | "download.mock_scenario") {
                continue;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| Err(ConfigError::Invalid(e));
        if self.output_root.as_os_str().is_empty() {
            return invalid("output.root is empty".into());
        }
        if let Err(e) = self.sampler.validate() {
            return invalid(e.to_string());
        }
        if self.sampler.scene_size_px == 0 {
            return invalid("sampler.scene_px must be at least 1".into());
        }
        if self.plan.scene_px != self.sampler.scene_size_px || self.plan.gsd_m != self.sampler.gsd_m {
            return invalid("scene size differs between sampler and download plan".into());
        }
        if let Err(e) = self.plan.validate() {
            return invalid(e.to_string());
        }
        if self.run.workers == 0 {
            return invalid("download.workers must be at least 1".into());
        }
        if let Err(e) = self.run.policy.validate() {
            return invalid(e);
        }
        if self.timeout.is_zero() {
            return invalid("download.timeout_s must be positive".into());
        }
        if let Err(e) = self.clean.validate() {
            return invalid(e);
        }
        if self.extract.patch_px == 0 || self.extract.stride() == 0 {
            return invalid("extract.patch and extract.stride must be at least 1".into());
        }
        if self.extract.patch_px > self.sampler.scene_size_px as usize {
            return invalid(format!(
                "extract.patch {} exceeds the {} px scene",
                self.extract.patch_px, self.sampler.scene_size_px
            ));
        }
        if let ProviderConfig::Url(u) = &self.provider {
            if let Err(e) = reqwest::Url::parse(u) {
                return invalid(format!("download.provider `{u}`: {e}"));
            }
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.run.policy
    }

    /// Scenario of the mock provider, read from its file when configured.
    pub fn mock_scenario(&self) -> Result<Scenario, ConfigError> {
        let ProviderConfig::Mock { scenario: Some(path), .. } = &self.provider else {
            return Ok(Scenario::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::File { path: path.clone(), reason: e.to_string() })?;
        let s: Scenario = serde_json::from_str(&text)
            .map_err(|e| ConfigError::File { path: path.clone(), reason: e.to_string() })?;
        s.validate().map_err(ConfigError::Invalid)?;
        Ok(s)
    }
}
