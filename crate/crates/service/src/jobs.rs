//! Session registry and asynchronous jobs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ServiceError, ServiceResult};
use crate::pipeline::Monitor;
use crate::store::{SessionDir, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Map,
    Propagate,
    Bench,
    Transitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct JobEntry {
    job: Mutex<Job>,
    cancel: AtomicBool,
}

impl JobEntry {
    pub fn snapshot(&self) -> Job {
        self.job.lock().clone()
    }

    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::Relaxed);
    }

    fn set_running(&self) {
        let mut job = self.job.lock();
        if job.status == JobStatus::Queued {
            job.status = JobStatus::Running;
        }
    }

    fn finish(&self, outcome: ServiceResult<Value>) {
        let mut job = self.job.lock();
        if job.status.is_terminal() {
            return;
        }
        match outcome {
            Ok(v) => {
                job.status = JobStatus::Done;
                job.progress = 1.0;
                job.result = Some(v);
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(e.to_string());
            }
        }
    }
}

impl Monitor for JobEntry {
    fn progress(&self, fraction: f64) {
        let mut job = self.job.lock();
        if !job.status.is_terminal() && fraction > job.progress {
            job.progress = fraction.min(1.0);
        }
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }
}

/// One session: its directory, the current immutable snapshot, and the
/// writer slot that serializes state-advancing operations.
pub struct Session {
    pub dir: SessionDir,
    snapshot: ArcSwap<Snapshot>,
    writer: Mutex<Option<String>>,
}

/// Holds the writer slot until dropped.
pub struct WriterGuard {
    session: Arc<Session>,
}

impl Drop for WriterGuard {
    fn drop(&mut self) {
        *self.session.writer.lock() = None;
    }
}

impl Session {
    pub fn new(dir: SessionDir, snapshot: Snapshot) -> Self {
        Self {
            dir,
            snapshot: ArcSwap::from_pointee(snapshot),
            writer: Mutex::new(None),
        }
    }

    pub fn id(&self) -> String {
        self.snapshot.load().descriptor.id.clone()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }

    pub fn publish(&self, snap: Snapshot) {
        self.snapshot.store(Arc::new(snap));
    }

    /// Claim the writer slot for `what`, or fail with `Busy`.
    pub fn begin(self: &Arc<Self>, what: &str) -> ServiceResult<WriterGuard> {
        let mut slot = self.writer.lock();
        if let Some(holder) = slot.as_ref() {
            return Err(ServiceError::Busy(holder.clone()));
        }
        *slot = Some(what.to_string());
        Ok(WriterGuard { session: self.clone() })
    }
}

pub struct Registry {
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    jobs: RwLock<HashMap<String, Arc<JobEntry>>>,
    next_job: AtomicU64,
}

impl Registry {
    /// Open `data_dir`, loading every session directory already present.
    pub fn open(data_dir: impl Into<PathBuf>) -> ServiceResult<Self> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(&data_dir).map_err(|e| io_error(&data_dir, e))?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&data_dir).map_err(|e| io_error(&data_dir, e))? {
            let path = entry.map_err(|e| io_error(&data_dir, e))?.path();
            let dir = SessionDir::new(&path);
            if !dir.exists() {
                continue;
            }
            match dir.load() {
                Ok(snap) => {
                    sessions.insert(snap.descriptor.id.clone(), Arc::new(Session::new(dir, snap)));
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(Self {
            data_dir,
            sessions: RwLock::new(sessions),
            jobs: RwLock::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn new_session_dir(&self) -> (String, SessionDir) {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = SessionDir::new(self.data_dir.join(&id));
        (id, dir)
    }

    pub fn insert(&self, session: Session) -> Arc<Session> {
        let session = Arc::new(session);
        self.sessions.write().insert(session.id(), session.clone());
        session
    }

    pub fn session(&self, id: &str) -> ServiceResult<Arc<Session>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn sessions(&self) -> Vec<Arc<Session>> {
        let mut all: Vec<_> = self.sessions.read().values().cloned().collect();
        all.sort_by_key(|s| s.id());
        all
    }

    pub fn job(&self, id: &str) -> ServiceResult<Arc<JobEntry>> {
        self.jobs
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    /// Run `work` on a background thread as a new job. `guard`, if any, is
    /// released when the job ends.
    pub fn spawn<F>(&self, session: &str, kind: JobKind, guard: Option<WriterGuard>, work: F) -> Job
    where
        F: FnOnce(&JobEntry) -> ServiceResult<Value> + Send + 'static,
    {
        let id = format!("job-{}", self.next_job.fetch_add(1, Ordering::Relaxed));
        let entry = Arc::new(JobEntry {
            job: Mutex::new(Job {
                id: id.clone(),
                session: session.to_string(),
                kind,
                status: JobStatus::Queued,
                progress: 0.0,
                result: None,
                error: None,
            }),
            cancel: AtomicBool::new(false),
        });
        self.jobs.write().insert(id, entry.clone());
        let job = entry.snapshot();
        std::thread::spawn(move || {
            entry.set_running();
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&entry)))
                .unwrap_or_else(|_| Err(ServiceError::Corrupt("job panicked".into())));
            drop(guard);
            entry.finish(outcome);
        });
        job
    }
}

fn io_error(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Core(fusionforge_core::Error::Io { path: path.into(), source: e })
}
