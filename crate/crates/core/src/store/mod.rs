//! On-disk dataset: layout codec, manifest persistence and exports.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

mod geojson;
pub mod layout;
mod manifest;

pub use geojson::export_points_geojson;
pub use layout::{
    discarded_relative_path, layout_path, parse_layout_path, parse_relative, relative_path, FileKind, LayoutCoord,
};
pub use manifest::{Candidate, DatasetManifest, MonthEntry, Region, SatelliteMonth, MANIFEST_VERSION};

use crate::clean::Decision;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const POINTS_FILE: &str = "points.csv";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("manifest schema version {found}, expected {expected}")]
    SchemaMismatch { found: u64, expected: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("manifest invariant violated: {0}")]
    Invalid(String),
    #[error("no manifest at {0}")]
    NotFound(PathBuf),
    #[error("path `{0}` escapes the dataset root")]
    OutsideRoot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Handle on a dataset root directory.
///
/// Manifest commits replace the file atomically; read-modify-write cycles
/// through [`DatasetStore::update`] are serialized process-wide per root.
#[derive(Debug, Clone)]
pub struct DatasetStore {
    root: PathBuf,
    lock: Arc<Mutex<()>>,
}

fn root_lock(root: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = fs::canonicalize(root).unwrap_or_else(|_| root.to_path_buf());
    LOCKS.get_or_init(Default::default).lock().unwrap().entry(key).or_default().clone()
}

/// Writes `bytes` to a unique sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

impl DatasetStore {
    /// Opens (creating if needed) the dataset root.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let lock = root_lock(&root);
        Ok(Self { root, lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Absolute path for a root-relative `/`-separated path.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Like [`DatasetStore::path`] but rejects absolute paths and `..`.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, StoreError> {
        let rel_path = Path::new(rel);
        if rel_path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
            Ok(self.root.join(rel_path))
        } else {
            Err(StoreError::OutsideRoot(rel.to_string()))
        }
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().is_file()
    }

    /// Loads and validates the manifest.
    pub fn load(&self) -> Result<DatasetManifest, StoreError> {
        let path = self.manifest_path();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(path)),
            Err(e) => return Err(e.into()),
        };
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MANIFEST_VERSION as u64 => {}
            Some(found) => return Err(StoreError::SchemaMismatch { found, expected: MANIFEST_VERSION }),
            None => return Err(StoreError::CorruptManifest("missing version".into())),
        }
        let m: DatasetManifest =
            serde_json::from_value(value).map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
        self.validate(&m)?;
        Ok(m)
    }

    /// The stored manifest, or an empty one when none has been committed.
    pub fn load_or_default(&self) -> Result<DatasetManifest, StoreError> {
        match self.load() {
            Err(StoreError::NotFound(_)) => Ok(DatasetManifest::default()),
            other => other,
        }
    }

    /// Atomically replaces the manifest.
    pub fn commit(&self, m: &DatasetManifest) -> Result<(), StoreError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.commit_unlocked(m)
    }

    fn commit_unlocked(&self, m: &DatasetManifest) -> Result<(), StoreError> {
        let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.manifest_path(), text.as_bytes())?;
        Ok(())
    }

    /// Load-modify-commit under the store lock. Nothing is written when `f`
    /// fails.
    pub fn update<T, E>(&self, f: impl FnOnce(&mut DatasetManifest) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut m = self.load_or_default()?;
        let out = f(&mut m)?;
        self.commit_unlocked(&m)?;
        Ok(out)
    }

    /// Checks the manifest invariants against the files on disk.
    pub fn validate(&self, m: &DatasetManifest) -> Result<(), StoreError> {
        let mut scenes = HashSet::new();
        for r in &m.regions {
            if !scenes.insert(r.scene_id) {
                return Err(StoreError::Invalid(format!("duplicate scene {}", r.scene_id)));
            }
            let mut months = HashSet::new();
            for me in &r.months {
                if !months.insert(me.month) {
                    return Err(StoreError::Invalid(format!("scene {} lists {} twice", r.scene_id, me.month)));
                }
                for (sat, sm) in &me.satellites {
                    let Some(sel) = &sm.selected else { continue };
                    let owner = sm.candidates.iter().find(|c| c.image_path() == sel || c.raw_path == *sel);
                    match owner {
                        Some(c) if c.decision == Decision::Keep => {}
                        _ => {
                            return Err(StoreError::Invalid(format!(
                                "selected `{sel}` ({sat}, scene {}, {}) is not a kept candidate",
                                r.scene_id, me.month
                            )))
                        }
                    }
                    if !self.path(sel).is_file() {
                        return Err(StoreError::Invalid(format!("selected file `{sel}` does not exist")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::clean::DecidedBy;
    use crate::sampler::{footprint_of, GeoPoint};
    use crate::satellite::Satellite;
    use crate::stage::{Stage, StageStatus};

    fn sample_manifest(store: &DatasetStore) -> DatasetManifest {
        let center = GeoPoint { lat: 45.0, lon: 7.0 };
        let rel = "Sentinel-2/scene_0000/2020-01/img_0.png";
        fs::create_dir_all(store.path(rel).parent().unwrap()).unwrap();
        fs::write(store.path(rel), b"x").unwrap();
        let candidate = Candidate {
            rank: 0,
            product_id: "p0".into(),
            acquired_at: "2020-01-16T00:00:00Z".parse().unwrap(),
            raw_path: "Sentinel-2/scene_0000/2020-01/raw_0.tif".into(),
            converted_path: Some(rel.into()),
            report: None,
            decision: Decision::Keep,
            decided_by: Some(DecidedBy::Auto),
        };
        let mut satellites = BTreeMap::new();
        satellites.insert(
            Satellite::S2,
            SatelliteMonth { candidates: vec![candidate], selected: Some(rel.into()), unfavorable: false },
        );
        let mut m = DatasetManifest::default();
        m.set_status(Stage::Generate, StageStatus::Done);
        m.regions.push(Region {
            scene_id: 0,
            center,
            bbox: footprint_of(center, 100, 10.0).unwrap().bbox,
            overlaps: vec![],
            months: vec![MonthEntry { month: "2020-01".parse().unwrap(), satellites }],
            previews: BTreeMap::new(),
        });
        m
    }

    #[test]
    fn commit_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = DatasetStore::open(dir.path()).unwrap();
        assert!(matches!(store.load(), Err(StoreError::NotFound(_))));
        let m = sample_manifest(&store);
        store.commit(&m).unwrap();
        assert_eq!(store.load().unwrap(), m);
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let store = DatasetStore::open(dir.path()).unwrap();
        let m = sample_manifest(&store);
        store.commit(&m).unwrap();

        fs::remove_file(store.path(m.regions[0].months[0].satellites[&Satellite::S2].selected.as_ref().unwrap()))
            .unwrap();
        assert!(matches!(store.load(), Err(StoreError::Invalid(_))));

        fs::write(store.manifest_path(), "{\"version\": 2, \"regions\": []}").unwrap();
        assert!(matches!(store.load(), Err(StoreError::SchemaMismatch { found: 2, .. })));

        fs::write(store.manifest_path(), "{\"version\": 1, \"regions\": [").unwrap();
        assert!(matches!(store.load(), Err(StoreError::CorruptManifest(_))));
    }

    #[test]
    fn selection_must_be_a_kept_candidate() {
        let dir = tempfile::tempdir().unwrap();
        let store = DatasetStore::open(dir.path()).unwrap();
        let mut m = sample_manifest(&store);
        let sm = m.regions[0].months[0].satellites.get_mut(&Satellite::S2).unwrap();
        sm.candidates[0].decision = Decision::Discard;
        assert!(matches!(store.validate(&m), Err(StoreError::Invalid(_))));
    }

    #[test]
    fn concurrent_commits_leave_one_whole_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let store = DatasetStore::open(dir.path()).unwrap();
        let variants: Vec<DatasetManifest> = (0..8)
            .map(|i| {
                let mut m = DatasetManifest::default();
                for s in 0..50 {
                    let c = GeoPoint { lat: i as f64, lon: s as f64 };
                    m.regions.push(Region {
                        scene_id: s,
                        center: c,
                        bbox: footprint_of(c, 10, 10.0).unwrap().bbox,
                        overlaps: vec![],
                        months: vec![],
                        previews: BTreeMap::new(),
                    });
                }
                m
            })
            .collect();
        std::thread::scope(|scope| {
            for m in &variants {
                let store = store.clone();
                scope.spawn(move || {
                    for _ in 0..20 {
                        store.commit(m).unwrap();
                    }
                });
            }
        });
        let loaded = store.load().unwrap();
        assert!(variants.contains(&loaded));
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
    }

    #[test]
    fn resolve_rejects_escapes() {
        let dir = tempfile::tempdir().unwrap();
        let store = DatasetStore::open(dir.path()).unwrap();
        assert!(store.resolve("Sentinel-2/scene_0000").is_ok());
        assert!(store.resolve("../etc/passwd").is_err());
        assert!(store.resolve("/etc/passwd").is_err());
        assert!(store.resolve("a/../../b").is_err());
    }
}
