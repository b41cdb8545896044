use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use chrono::SecondsFormat;
use serde::{Deserialize, Serialize};

use super::{fetch, query, CatalogError, CatalogProvider, ProductDescriptor, ProductQuery};
use super::plan::{DownloadPlan, DownloadTask};
use crate::month::YearMonth;
use crate::raster::{encode_geotiff, Raster};
use crate::sampler::SceneFootprint;
use crate::satellite::Satellite;
use crate::stage::{Progress, Stage};
use crate::store::{discarded_relative_path, relative_path, write_atomic, FileKind, LayoutCoord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    /// Maximum concurrent provider requests.
    pub rate_limit: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, initial_backoff: Duration::from_millis(500), multiplier: 2.0, rate_limit: 4 }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.initial_backoff.is_zero() || self.multiplier.is_nan() || self.multiplier < 1.0 {
            return Err("backoff must be positive with a multiplier of at least 1".into());
        }
        if self.rate_limit == 0 {
            return Err("rate_limit must be at least 1".into());
        }
        Ok(())
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(attempt as i32 - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub workers: usize,
    pub policy: RetryPolicy,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 4, policy: RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TaskOutcome {
    Ok { attempts: u32 },
    /// The file was already present.
    Skipped,
    /// The catalog had fewer products than this rank.
    Empty,
    Failed { attempts: u32, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub scene_id: u32,
    pub satellite: Satellite,
    pub month: YearMonth,
    pub rank: u32,
    pub path: String,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DownloadReport {
    /// One entry per plan task, in plan order.
    pub tasks: Vec<TaskReport>,
    /// Product fetch attempts made, including retries.
    pub fetch_attempts: u64,
}

impl DownloadReport {
    fn count(&self, f: impl Fn(&TaskOutcome) -> bool) -> usize {
        self.tasks.iter().filter(|t| f(&t.outcome)).count()
    }

    pub fn ok(&self) -> usize {
        self.count(|o| matches!(o, TaskOutcome::Ok { .. }))
    }

    pub fn skipped(&self) -> usize {
        self.count(|o| matches!(o, TaskOutcome::Skipped))
    }

    pub fn empty(&self) -> usize {
        self.count(|o| matches!(o, TaskOutcome::Empty))
    }

    pub fn failed(&self) -> usize {
        self.count(|o| matches!(o, TaskOutcome::Failed { .. }))
    }
}

/// Counting semaphore bounding in-flight provider requests.
struct Gate {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let out = f();
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        out
    }
}

/// Routes every provider call through the gate.
struct Gated<'a> {
    inner: &'a dyn CatalogProvider,
    gate: &'a Gate,
}

impl CatalogProvider for Gated<'_> {
    fn search(&self, q: &ProductQuery) -> Result<Vec<ProductDescriptor>, CatalogError> {
        self.gate.run(|| self.inner.search(q))
    }

    fn fetch_band(&self, product_id: &str, band: &str, footprint: &SceneFootprint) -> Result<Raster, CatalogError> {
        self.gate.run(|| self.inner.fetch_band(product_id, band, footprint))
    }
}

fn with_retry<T>(policy: &RetryPolicy, mut f: impl FnMut() -> Result<T, CatalogError>) -> (Result<T, CatalogError>, u32) {
    let mut attempt = 1;
    loop {
        match f() {
            Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                log::debug!("attempt {attempt} failed: {e}; retrying");
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            out => return (out, attempt),
        }
    }
}

fn raw_coord(t: &DownloadTask) -> LayoutCoord {
    LayoutCoord { satellite: t.satellite, scene_id: t.scene_id, month: t.month, rank: t.rank, kind: FileKind::Raw }
}

fn already_present(root: &Path, t: &DownloadTask) -> bool {
    let c = raw_coord(t);
    root.join(relative_path(&c)).is_file() || root.join(discarded_relative_path(&c)).is_file()
}

fn with_provenance(r: Raster, t: &DownloadTask, d: &ProductDescriptor) -> Raster {
    let mut meta = r.metadata().clone();
    meta.insert("product_id".into(), d.product_id.clone());
    meta.insert("acquired_at".into(), d.acquired_at.to_rfc3339_opts(SecondsFormat::Secs, true));
    meta.insert("satellite".into(), t.satellite.short().into());
    if let Some(c) = d.cloud_pct_meta {
        meta.insert("cloud_pct_meta".into(), c.to_string());
    }
    meta.insert("scene".into(), t.scene_id.to_string());
    meta.insert("month".into(), t.month.to_string());
    meta.insert("rank".into(), t.rank.to_string());
    r.with_metadata(meta)
}

struct Runner<'a> {
    plan: &'a DownloadPlan,
    provider: Gated<'a>,
    root: &'a Path,
    policy: &'a RetryPolicy,
    progress: &'a dyn Progress,
    fetch_attempts: AtomicU64,
}

impl Runner<'_> {
    fn report(&self, t: &DownloadTask, outcome: TaskOutcome) -> TaskReport {
        self.progress.advance(Stage::Download, 1);
        TaskReport {
            scene_id: t.scene_id,
            satellite: t.satellite,
            month: t.month,
            rank: t.rank,
            path: relative_path(&raw_coord(t)),
            outcome,
        }
    }

    /// Handles all ranks of one (scene, satellite, month) with a single query.
    fn run_group(&self, indices: &[usize]) -> Vec<(usize, TaskReport)> {
        let tasks: Vec<&DownloadTask> = indices.iter().map(|&i| &self.plan.tasks[i]).collect();
        let todo: Vec<bool> = tasks.iter().map(|t| !already_present(self.root, t)).collect();
        if !todo.contains(&true) {
            return indices.iter().zip(&tasks).map(|(&i, t)| (i, self.report(t, TaskOutcome::Skipped))).collect();
        }
        let (found, query_attempts) = with_retry(self.policy, || query(&self.provider, &tasks[0].query));
        let mut out = Vec::with_capacity(tasks.len());
        for ((&i, t), todo) in indices.iter().zip(&tasks).zip(todo) {
            let outcome = if !todo {
                TaskOutcome::Skipped
            } else {
                match &found {
                    Err(e) => TaskOutcome::Failed { attempts: query_attempts, error: e.to_string() },
                    Ok(list) => match list.get(t.rank as usize) {
                        None => TaskOutcome::Empty,
                        Some(d) => self.download(t, d),
                    },
                }
            };
            if let TaskOutcome::Failed { error, .. } = &outcome {
                self.progress.log(&format!("{}: {error}", relative_path(&raw_coord(t))));
            }
            out.push((i, self.report(t, outcome)));
        }
        out
    }

    fn download(&self, t: &DownloadTask, d: &ProductDescriptor) -> TaskOutcome {
        let (result, attempts) = with_retry(self.policy, || {
            self.fetch_attempts.fetch_add(1, Ordering::Relaxed);
            fetch(&self.provider, d, &t.query.bands, &t.query.footprint)
        });
        let written = result.and_then(|r| {
            let bytes = encode_geotiff(&with_provenance(r, t, d))
                .map_err(|e| CatalogError::MalformedResponse(e.to_string()))?;
            write_atomic(&self.root.join(relative_path(&raw_coord(t))), &bytes)
                .map_err(|e| CatalogError::ProviderUnavailable(format!("cannot write raw file: {e}")))
        });
        match written {
            Ok(()) => TaskOutcome::Ok { attempts },
            Err(e) => TaskOutcome::Failed { attempts, error: e.to_string() },
        }
    }
}

/// Executes a plan into the raw layout under `root`. Files already present
/// (including ones the cleaner moved to `discarded/`) are skipped, so reruns
/// only fetch what is missing. Failures are reported per task.
pub fn run_plan(
    plan: &DownloadPlan,
    provider: &dyn CatalogProvider,
    root: &Path,
    opts: &RunOptions,
    progress: &dyn Progress,
) -> DownloadReport {
    let gate = Gate::new(opts.policy.rate_limit);
    let runner = Runner {
        plan,
        provider: Gated { inner: provider, gate: &gate },
        root,
        policy: &opts.policy,
        progress,
        fetch_attempts: AtomicU64::new(0),
    };
    let mut groups: BTreeMap<(u32, Satellite, YearMonth), Vec<usize>> = BTreeMap::new();
    for (i, t) in plan.tasks.iter().enumerate() {
        groups.entry((t.scene_id, t.satellite, t.month)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    progress.set_total(Stage::Download, plan.tasks.len() as u64);

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(plan.tasks.len()));
    std::thread::scope(|scope| {
        for _ in 0..opts.workers.clamp(1, groups.len().max(1)) {
            scope.spawn(|| loop {
                let g = next.fetch_add(1, Ordering::Relaxed);
                let Some(indices) = groups.get(g) else { break };
                let done = runner.run_group(indices);
                results.lock().unwrap().extend(done);
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    DownloadReport {
        tasks: results.into_iter().map(|(_, r)| r).collect(),
        fetch_attempts: runner.fetch_attempts.into_inner(),
    }
}
