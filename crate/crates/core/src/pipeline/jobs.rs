//! FIFO job queue with a single worker thread.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::stages::{run_stages, PipelineError};
use crate::stage::{Progress, Stage, StageStatus};

/// Log lines kept per job.
pub const LOG_TAIL: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn can_become(self, next: JobState) -> bool {
        matches!((self, next), (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed))
    }
}

/// What a job runs: the full pipeline with resume, or one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobTarget {
    All,
    #[serde(untagged)]
    Stage(Stage),
}

impl std::str::FromStr for JobTarget {
    type Err = crate::stage::ParseStageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            Ok(JobTarget::All)
        } else {
            s.parse().map(JobTarget::Stage)
        }
    }
}

impl JobTarget {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            JobTarget::All => Stage::ALL.to_vec(),
            JobTarget::Stage(s) => vec![s],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageProgress {
    pub status: StageStatus,
    pub done: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub target: JobTarget,
    pub stages: Vec<Stage>,
    pub state: JobState,
    pub progress: BTreeMap<Stage, StageProgress>,
    pub log: Vec<String>,
    pub error: Option<String>,
    pub failed_stage: Option<Stage>,
}

struct Shared {
    jobs: RwLock<BTreeMap<u64, Job>>,
    queue: Mutex<VecDeque<(u64, PipelineConfig)>>,
    wake: Condvar,
    next_id: AtomicU64,
}

impl Shared {
    fn with_job(&self, id: u64, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.write().unwrap().get_mut(&id) {
            f(job);
        }
    }

    fn transition(&self, id: u64, next: JobState) {
        self.with_job(id, |job| {
            debug_assert!(job.state.can_become(next), "{:?} -> {next:?}", job.state);
            job.state = next;
        });
    }
}

struct JobProgress<'a> {
    shared: &'a Shared,
    id: u64,
}

impl Progress for JobProgress<'_> {
    fn set_total(&self, stage: Stage, total: u64) {
        self.shared.with_job(self.id, |job| {
            let p = job.progress.entry(stage).or_default();
            p.total = total;
            p.done = 0;
        });
    }

    fn advance(&self, stage: Stage, n: u64) {
        self.shared.with_job(self.id, |job| job.progress.entry(stage).or_default().done += n);
    }

    fn log(&self, line: &str) {
        log::info!("job {}: {line}", self.id);
        self.shared.with_job(self.id, |job| {
            job.log.push(line.to_string());
            if job.log.len() > LOG_TAIL {
                let extra = job.log.len() - LOG_TAIL;
                job.log.drain(..extra);
            }
        });
    }
}

/// Per-stage progress that also tracks stage status from the outcome.
struct StageTracker<'a> {
    inner: JobProgress<'a>,
}

impl Progress for StageTracker<'_> {
    fn set_total(&self, stage: Stage, total: u64) {
        self.inner.shared.with_job(self.inner.id, |job| {
            job.progress.entry(stage).or_default().status = StageStatus::Running;
        });
        self.inner.set_total(stage, total);
    }

    fn advance(&self, stage: Stage, n: u64) {
        self.inner.advance(stage, n)
    }

    fn log(&self, line: &str) {
        self.inner.log(line)
    }
}

/// Accepts pipeline jobs and runs them one at a time in submission order.
#[derive(Clone)]
pub struct JobQueue {
    shared: Arc<Shared>,
}

impl Default for JobQueue {
    fn default() -> Self {
        Self::start()
    }
}

impl JobQueue {
    pub fn start() -> Self {
        let shared = Arc::new(Shared {
            jobs: RwLock::new(BTreeMap::new()),
            queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            next_id: AtomicU64::new(1),
        });
        let worker_shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("forge-jobs".into())
            .spawn(move || worker(&worker_shared))
            .expect("spawn job worker");
        Self { shared }
    }

    /// Queues a job and returns its id. `cfg` should already be validated.
    pub fn submit(&self, target: JobTarget, cfg: PipelineConfig) -> u64 {
        let id = self.shared.next_id.fetch_add(1, Ordering::Relaxed);
        let stages = target.stages();
        let job = Job {
            id,
            target,
            progress: stages.iter().map(|s| (*s, StageProgress::default())).collect(),
            stages,
            state: JobState::Queued,
            log: Vec::new(),
            error: None,
            failed_stage: None,
        };
        self.shared.jobs.write().unwrap().insert(id, job);
        self.shared.queue.lock().unwrap().push_back((id, cfg));
        self.shared.wake.notify_one();
        id
    }

    pub fn get(&self, id: u64) -> Option<Job> {
        self.shared.jobs.read().unwrap().get(&id).cloned()
    }

    pub fn list(&self) -> Vec<Job> {
        self.shared.jobs.read().unwrap().values().cloned().collect()
    }

    /// Whether a job is queued or running.
    pub fn busy(&self) -> bool {
        self.shared.jobs.read().unwrap().values().any(|j| !j.state.is_terminal())
    }

    /// Blocks until the job finishes. Returns `None` for unknown ids.
    pub fn wait(&self, id: u64) -> Option<Job> {
        loop {
            let job = self.get(id)?;
            if job.state.is_terminal() {
                return Some(job);
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
    }
}

fn worker(shared: &Shared) {
    loop {
        let (id, cfg) = {
            let mut q = shared.queue.lock().unwrap();
            loop {
                if let Some(next) = q.pop_front() {
                    break next;
                }
                q = shared.wake.wait(q).unwrap();
            }
        };
        shared.transition(id, JobState::Running);
        let target = shared.jobs.read().unwrap()[&id].target;
        let tracker = StageTracker { inner: JobProgress { shared, id } };
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_stages(&cfg, &target.stages(), target == JobTarget::All, &tracker)
        }));
        let result = result.unwrap_or_else(|_| {
            Err(PipelineError::Config(super::config::ConfigError::Invalid("pipeline worker panicked".into())))
        });
        match result {
            Ok(outcomes) => {
                shared.with_job(id, |job| {
                    for o in &outcomes {
                        job.progress.entry(o.stage).or_default().status = StageStatus::Done;
                    }
                });
                shared.transition(id, JobState::Done);
            }
            Err(e) => {
                shared.with_job(id, |job| {
                    let failed = e.stage();
                    if let Some(s) = failed {
                        job.progress.entry(s).or_default().status = StageStatus::Failed;
                    }
                    for p in job.progress.values_mut() {
                        if p.status == StageStatus::Running {
                            p.status = StageStatus::Failed;
                        }
                    }
                    job.failed_stage = failed;
                    job.error = Some(e.to_string());
                    job.log.push(format!("failed: {e}"));
                });
                shared.transition(id, JobState::Failed);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions() {
        use JobState::*;
        assert!(Queued.can_become(Running));
        assert!(Running.can_become(Done) && Running.can_become(Failed));
        assert!(!Queued.can_become(Done) && !Done.can_become(Running) && !Failed.can_become(Queued));
    }

    #[test]
    fn target_parsing_and_serde() {
        assert_eq!("all".parse::<JobTarget>().unwrap(), JobTarget::All);
        assert_eq!("clean".parse::<JobTarget>().unwrap(), JobTarget::Stage(Stage::Clean));
        assert!("everything".parse::<JobTarget>().is_err());
        assert_eq!(serde_json::to_string(&JobTarget::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::to_string(&JobTarget::Stage(Stage::Extract)).unwrap(), "\"extract\"");
        assert_eq!(serde_json::from_str::<JobTarget>("\"download\"").unwrap(), JobTarget::Stage(Stage::Download));
    }

    #[test]
    fn jobs_run_in_order_and_fail_with_their_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.set("output.root", dir.path().to_str().unwrap()).unwrap();
        cfg.set("sampler.scene_px", "32").unwrap();
        cfg.set("extract.patch", "32").unwrap();
        let q = JobQueue::start();
        let bad = q.submit(JobTarget::Stage(Stage::Convert), cfg.clone());
        let good = q.submit(JobTarget::Stage(Stage::Generate), cfg);
        let bad = q.wait(bad).unwrap();
        assert_eq!(bad.state, JobState::Failed);
        assert_eq!(bad.failed_stage, Some(Stage::Convert));
        let good = q.wait(good).unwrap();
        assert_eq!(good.state, JobState::Done);
        assert_eq!(good.progress[&Stage::Generate].status, StageStatus::Done);
        assert!(q.get(999).is_none());
        assert!(!q.busy());
    }
}
