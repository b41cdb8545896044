use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Name of the Sentinel-2 cloud-mask band.
pub const QA60: &str = "QA60";

/// The two supported missions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Satellite {
    S1,
    S2,
}

impl Satellite {
    pub const ALL: [Satellite; 2] = [Satellite::S1, Satellite::S2];

    /// Top-level folder name in the dataset layout.
    pub fn folder(self) -> &'static str {
        match self {
            Satellite::S1 => "Sentinel-1",
            Satellite::S2 => "Sentinel-2",
        }
    }

    pub fn from_folder(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.folder() == name)
    }

    pub fn short(self) -> &'static str {
        match self {
            Satellite::S1 => "s1",
            Satellite::S2 => "s2",
        }
    }

    /// Catalog collection identifier used by the HTTP provider.
    pub fn collection(self) -> &'static str {
        match self {
            Satellite::S1 => "sentinel-1",
            Satellite::S2 => "sentinel-2",
        }
    }

    /// Bands downloaded when the user does not choose any.
    pub fn default_bands(self) -> Vec<String> {
        let bands: &[&str] = match self {
            Satellite::S1 => &["VV"],
            Satellite::S2 => &["B4", "B3", "B2", QA60],
        };
        bands.iter().map(|b| b.to_string()).collect()
    }

    /// Bands rendered into converted images, in output channel order.
    pub fn render_bands(self) -> &'static [&'static str] {
        match self {
            Satellite::S1 => &["VV"],
            Satellite::S2 => &["B4", "B3", "B2"],
        }
    }

    /// Nominal full-scale sample value: linear backscatter for S1,
    /// scaled reflectance (DN) for S2.
    pub fn full_scale(self) -> f64 {
        match self {
            Satellite::S1 => 1.0,
            Satellite::S2 => 10_000.0,
        }
    }
}

impl fmt::Display for Satellite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("unknown satellite `{0}` (expected s1 or s2)")]
pub struct ParseSatelliteError(pub String);

impl FromStr for Satellite {
    type Err = ParseSatelliteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s1" | "sentinel-1" | "sentinel1" => Ok(Satellite::S1),
            "s2" | "sentinel-2" | "sentinel2" => Ok(Satellite::S2),
            _ => Err(ParseSatelliteError(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bands_match_mission_defaults() {
        assert_eq!(Satellite::S2.default_bands(), ["B4", "B3", "B2", "QA60"]);
        assert_eq!(Satellite::S1.default_bands(), ["VV"]);
    }

    #[test]
    fn names_round_trip() {
        for s in Satellite::ALL {
            assert_eq!(s.short().parse::<Satellite>().unwrap(), s);
            assert_eq!(Satellite::from_folder(s.folder()), Some(s));
        }
        assert!("s3".parse::<Satellite>().is_err());
    }
}
