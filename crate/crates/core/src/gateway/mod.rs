//! Front-end service: job records, submissions, status and PIN-gated
//! downloads. [`http`] puts it behind the public HTTP API.
//!
//! The gateway shares nothing with the back-end but the exchange folders.
//! A submission is committed when its job record is written; publishing the
//! inbox envelope comes second, and the janitor re-publishes for any
//! `Received` job whose envelope never appeared. Results come back through
//! the outbox and are stored under `results/`.

pub mod fetch;
pub mod http;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::Serialize;

use crate::analysis::verify_bundle;
use crate::exchange::{EnvelopeState, ExchangeError, FrontEndExchange, BUNDLE_FILE, RESULTS_SUFFIX};
use crate::frameseq::sniff_zip;
use crate::model::{create_job, Job, JobError, JobId, JobState, JobStatus, MediaKind, VideoOrigin, VideoRef, MAX_VIDEO_BYTES};
use crate::notifier::{Notification, Notifier};
use crate::plugin::Registry;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub state_dir: PathBuf,
    pub max_upload_bytes: u64,
    /// Wrong PINs tolerated per job before it locks.
    pub attempt_limit: u32,
    pub cooldown: Duration,
    /// Base URL used in notification bodies.
    pub public_url: String,
    /// Age after which a `Received` job without an inbox envelope is
    /// re-published.
    pub janitor_after: Duration,
    pub sync_interval: Duration,
    /// How long consumed results envelopes are kept; `None` keeps them.
    pub retention: Option<Duration>,
}

impl GatewayConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            state_dir: state_dir.into(),
            max_upload_bytes: MAX_VIDEO_BYTES,
            attempt_limit: 10,
            cooldown: Duration::from_secs(15 * 60),
            public_url: "http://127.0.0.1:8080".into(),
            janitor_after: Duration::from_secs(30),
            sync_interval: Duration::from_millis(500),
            retention: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    Job(JobError),
    #[error("video exceeds the {limit} byte limit")]
    Oversize { limit: u64 },
    #[error("invalid-media: {0}")]
    InvalidMedia(String),
    #[error("fetch-failed: {0}")]
    FetchFailed(String),
    #[error("unsupported-scheme: {0}")]
    UnsupportedScheme(String),
    #[error("bad-request: {0}")]
    BadRequest(String),
    #[error("not-found")]
    NotFound,
    #[error("wrong-pin")]
    WrongPin { remaining: u32 },
    #[error("not-ready")]
    NotReady(JobState),
    #[error("locked-out")]
    LockedOut { retry_after: Duration },
    #[error("internal-error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Job(e) => e.code(),
            ApiError::Oversize { .. } => "oversize-video",
            ApiError::InvalidMedia(_) => "invalid-media",
            ApiError::FetchFailed(_) => "fetch-failed",
            ApiError::UnsupportedScheme(_) => "unsupported-scheme",
            ApiError::BadRequest(_) => "bad-request",
            ApiError::NotFound => "not-found",
            ApiError::WrongPin { .. } => "wrong-pin",
            ApiError::NotReady(_) => "not-ready",
            ApiError::LockedOut { .. } => "locked-out",
            ApiError::Internal(_) => "internal-error",
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::OversizeVideo { limit, .. } => ApiError::Oversize { limit },
            e => ApiError::Job(e),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

/// Job records, one JSON file each, cached in memory.
#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    jobs: Mutex<HashMap<JobId, Job>>,
}

impl JobStore {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut jobs = HashMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            match fs::read(&path).map(|b| serde_json::from_slice::<Job>(&b)) {
                Ok(Ok(job)) => {
                    jobs.insert(job.job_id.clone(), job);
                }
                _ => tracing::warn!(path = %path.display(), "skipping unreadable job record"),
            }
        }
        Ok(JobStore {
            dir: dir.to_path_buf(),
            jobs: Mutex::new(jobs),
        })
    }

    pub fn get(&self, id: &JobId) -> Option<Job> {
        self.lock().get(id).cloned()
    }

    pub fn all(&self) -> Vec<Job> {
        self.lock().values().cloned().collect()
    }

    /// Writes the record atomically, then updates the cache.
    pub fn put(&self, job: &Job) -> std::io::Result<()> {
        let mut jobs = self.lock();
        self.write(job)?;
        jobs.insert(job.job_id.clone(), job.clone());
        Ok(())
    }

    /// Applies `f` to the stored job under the store lock and persists the
    /// result. Returns `None` for unknown ids.
    pub fn update<T>(&self, id: &JobId, f: impl FnOnce(&Job) -> Option<(Job, T)>) -> std::io::Result<Option<T>> {
        let mut jobs = self.lock();
        let Some(current) = jobs.get(id) else { return Ok(None) };
        let Some((next, out)) = f(current) else { return Ok(None) };
        self.write(&next)?;
        jobs.insert(id.clone(), next);
        Ok(Some(out))
    }

    fn write(&self, job: &Job) -> std::io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&serde_json::to_vec_pretty(job).expect("job serializes"))?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.dir.join(format!("{}.json", job.job_id)))
            .map_err(|e| e.error)?;
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<JobId, Job>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Attempts {
    failures: u32,
    locked_until: Option<Instant>,
}

/// Per-job wrong-PIN counter with a cool-down lock.
#[derive(Debug)]
pub struct AttemptLimiter {
    limit: u32,
    cooldown: Duration,
    state: Mutex<HashMap<JobId, Attempts>>,
}

impl AttemptLimiter {
    pub fn new(limit: u32, cooldown: Duration) -> Self {
        AttemptLimiter {
            limit,
            cooldown,
            state: Mutex::new(HashMap::new()),
        }
    }

    /// Checks the lock and runs `verify` atomically with respect to other
    /// attempts on the same limiter.
    pub fn attempt(&self, id: &JobId, verify: impl FnOnce() -> bool) -> Result<(), ApiError> {
        let mut map = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let now = Instant::now();
        let a = map.entry(id.clone()).or_default();
        if let Some(until) = a.locked_until {
            if now < until {
                return Err(ApiError::LockedOut {
                    retry_after: until - now,
                });
            }
            *a = Attempts::default();
        }
        if verify() {
            *a = Attempts::default();
            return Ok(());
        }
        a.failures += 1;
        if a.failures >= self.limit {
            a.locked_until = Some(now + self.cooldown);
        }
        Err(ApiError::WrongPin {
            remaining: self.limit.saturating_sub(a.failures),
        })
    }
}

/// Public registry fields served by `GET /api/v1/detectors`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DetectorInfo {
    pub detector_id: String,
    pub name: String,
    pub version: String,
    pub description: String,
    pub source_repo: String,
    pub release_date: String,
}

/// A validated, size-checked video already stored on disk.
#[derive(Debug)]
pub struct StagedVideo {
    pub path: PathBuf,
    pub byte_size: u64,
    pub origin: VideoOrigin,
}

pub struct Gateway {
    config: GatewayConfig,
    store: JobStore,
    exchange: FrontEndExchange,
    limiter: AttemptLimiter,
    registry: Arc<Registry>,
    notifier: Notifier,
    sync_lock: Mutex<HashSet<String>>,
}

impl Gateway {
    pub fn new(
        config: GatewayConfig,
        exchange: FrontEndExchange,
        registry: Arc<Registry>,
        notifier: Notifier,
    ) -> std::io::Result<Self> {
        let store = JobStore::open(&config.state_dir.join("jobs"))?;
        fs::create_dir_all(config.state_dir.join("uploads"))?;
        fs::create_dir_all(config.state_dir.join("results"))?;
        Ok(Gateway {
            limiter: AttemptLimiter::new(config.attempt_limit, config.cooldown),
            config,
            store,
            exchange,
            registry,
            notifier,
            sync_lock: Mutex::new(HashSet::new()),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn notifier(&self) -> &Notifier {
        &self.notifier
    }

    /// Directory for in-progress uploads; files here are moved, not copied,
    /// once a job is created.
    pub fn upload_dir(&self) -> PathBuf {
        self.config.state_dir.join("uploads")
    }

    fn results_path(&self, id: &JobId) -> PathBuf {
        self.config.state_dir.join("results").join(format!("{id}.zip"))
    }

    pub fn detectors(&self) -> Vec<DetectorInfo> {
        self.registry
            .entries()
            .iter()
            .map(|d| DetectorInfo {
                detector_id: d.detector_id.clone(),
                name: d.display_name.clone(),
                version: d.version.clone(),
                description: d.description.clone(),
                source_repo: d.source_repo.clone(),
                release_date: d.release_date.clone(),
            })
            .collect()
    }

    /// Creates the job for a staged video, records it, publishes it and
    /// queues the receipt. The staged file is consumed either way.
    pub fn submit(
        &self,
        video: StagedVideo,
        detectors: Vec<String>,
        email: &str,
        pin: &str,
    ) -> Result<JobId, ApiError> {
        let result = self.submit_inner(&video, detectors, email, pin);
        if result.is_err() {
            let _ = fs::remove_file(&video.path);
        }
        result
    }

    fn submit_inner(
        &self,
        video: &StagedVideo,
        detectors: Vec<String>,
        email: &str,
        pin: &str,
    ) -> Result<JobId, ApiError> {
        if video.byte_size > self.config.max_upload_bytes {
            return Err(ApiError::Oversize {
                limit: self.config.max_upload_bytes,
            });
        }
        let media_kind = sniff_media(&video.path)?;
        let mut job = create_job(
            VideoRef {
                origin: video.origin,
                content_path: PathBuf::new(),
                byte_size: video.byte_size,
                media_kind,
            },
            detectors,
            email,
            pin,
        )?;
        let stored = self.upload_dir().join(format!("{}.{}", job.job_id, extension(media_kind)));
        fs::rename(&video.path, &stored).map_err(internal)?;
        job.video.content_path = stored.clone();

        if let Err(e) = self.store.put(&job) {
            let _ = fs::remove_file(&stored);
            return Err(internal(e));
        }
        if let Err(e) = self.exchange.publish_submission(&job, &stored) {
            tracing::warn!(job = %job.job_id, error = %e, "publish failed; janitor will retry");
        }
        self.notifier.enqueue(Notification::received(
            &job.email,
            &job.job_id,
            &job.detectors,
            &self.status_url(&job.job_id),
        ));
        tracing::info!(job = %job.job_id, size = video.byte_size, kind = %media_kind, "submitted");
        Ok(job.job_id)
    }

    fn status_url(&self, id: &JobId) -> String {
        format!("{}/api/v1/jobs/{id}", self.config.public_url.trim_end_matches('/'))
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus, ApiError> {
        let id = JobId::parse(job_id).ok_or(ApiError::NotFound)?;
        if self.store.get(&id).is_none() {
            return Err(ApiError::NotFound);
        }
        if self.exchange.results_state(&id) == EnvelopeState::Published {
            self.sync_outbox();
        }
        Ok(self.store.get(&id).ok_or(ApiError::NotFound)?.status)
    }

    /// Returns the bundle bytes. Order of checks: unknown job, lock, PIN,
    /// readiness.
    pub fn download(&self, job_id: &str, pin: &str) -> Result<Vec<u8>, ApiError> {
        let id = JobId::parse(job_id).ok_or(ApiError::NotFound)?;
        let job = self.store.get(&id).ok_or(ApiError::NotFound)?;
        self.limiter.attempt(&id, || job.verify_pin(pin))?;
        if !job.state().is_terminal() && self.exchange.results_state(&id) == EnvelopeState::Published {
            self.sync_outbox();
        }
        let job = self.store.get(&id).ok_or(ApiError::NotFound)?;
        if !job.state().is_terminal() {
            return Err(ApiError::NotReady(job.state()));
        }
        fs::read(self.results_path(&id)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ApiError::NotReady(job.state()),
            _ => internal(e),
        })
    }

    /// Ingests every results envelope in the outbox. Returns the number of
    /// jobs that reached a terminal state.
    pub fn sync_outbox(&self) -> usize {
        let mut skip = self.sync_lock.lock().unwrap_or_else(|p| p.into_inner());
        let outcome = match self.exchange.poll_outbox(&skip) {
            Ok(o) => o,
            Err(e) => {
                tracing::warn!(error = %e, "outbox poll failed");
                return 0;
            }
        };
        for bad in outcome.corrupt {
            tracing::warn!(envelope = %bad.id, reason = %bad.reason, "corrupt results envelope");
            skip.insert(bad.id);
        }
        let mut finished = 0;
        for env in outcome.envelopes {
            match self.ingest(&env.id, env.payload(BUNDLE_FILE)) {
                Ok(true) => finished += 1,
                Ok(false) => {}
                Err(e) => {
                    tracing::warn!(envelope = %env.id, error = %e, "cannot ingest results");
                    skip.insert(env.id.clone());
                    continue;
                }
            }
            match self.exchange.consume_results(&env.id) {
                Ok(_) | Err(ExchangeError::NotFound(_)) => {}
                Err(e) => tracing::warn!(envelope = %env.id, error = %e, "consume failed"),
            }
        }
        if let Some(retention) = self.config.retention {
            let _ = self.exchange.purge_consumed_results(retention);
        }
        finished
    }

    fn ingest(&self, envelope_id: &str, bundle: Option<PathBuf>) -> Result<bool, String> {
        let id = envelope_id
            .strip_suffix(RESULTS_SUFFIX)
            .and_then(JobId::parse)
            .ok_or("not a results envelope")?;
        let bundle = bundle.ok_or("missing bundle.zip")?;
        let bytes = fs::read(&bundle).map_err(|e| e.to_string())?;
        let summary = verify_bundle(&bytes).map_err(|e| e.to_string())?;
        if summary.job_id != id {
            return Err(format!("bundle belongs to {}", summary.job_id));
        }
        if !summary.state.is_terminal() {
            return Err(format!("bundle state {} is not terminal", summary.state.as_str()));
        }
        let Some(job) = self.store.get(&id) else {
            return Err("unknown job".into());
        };
        if job.state().is_terminal() {
            // delivered again after a crash before consume; already handled
            return Ok(false);
        }
        let target = self.results_path(&id);
        let mut tmp = tempfile::NamedTempFile::new_in(target.parent().unwrap()).map_err(|e| e.to_string())?;
        tmp.write_all(&bytes).map_err(|e| e.to_string())?;
        tmp.persist(&target).map_err(|e| e.error.to_string())?;

        let failures: Vec<(String, String)> = summary
            .failures()
            .map(|d| (d.detector_id.clone(), d.error_note.clone().unwrap_or_else(|| d.outcome.clone())))
            .collect();
        let detail = (!failures.is_empty()).then(|| {
            failures
                .iter()
                .map(|(d, n)| format!("{d}: {n}"))
                .collect::<Vec<_>>()
                .join("; ")
        });
        let updated = self
            .store
            .update(&id, |job| {
                if job.state().is_terminal() {
                    return None;
                }
                let mut next = job.advance_to(summary.state).ok()?;
                next.status.detail = detail.clone();
                Some((next.clone(), next))
            })
            .map_err(|e| e.to_string())?;
        let Some(job) = updated else { return Ok(false) };
        let _ = fs::remove_file(&job.video.content_path);
        self.notifier.enqueue(Notification::terminal(
            &job.email,
            &job.job_id,
            summary.state,
            &failures,
            &format!("{}/download", self.status_url(&job.job_id)),
        ));
        tracing::info!(job = %id, state = summary.state.as_str(), "results ingested");
        Ok(true)
    }

    /// Re-publishes `Received` jobs older than `janitor_after` whose inbox
    /// envelope is missing. Returns how many were published.
    pub fn janitor(&self) -> usize {
        let now = Utc::now();
        let mut published = 0;
        for job in self.store.all() {
            if job.state() != JobState::Received {
                continue;
            }
            let age = (now - job.created_at).to_std().unwrap_or_default();
            if age < self.config.janitor_after || self.exchange.submission_state(&job.job_id) != EnvelopeState::Absent {
                continue;
            }
            if self.exchange.results_state(&job.job_id) != EnvelopeState::Absent {
                continue;
            }
            let video = job.video.content_path.as_path();
            if !video.is_file() {
                continue;
            }
            match self.exchange.publish_submission(&job, video) {
                Ok(_) => {
                    published += 1;
                    tracing::info!(job = %job.job_id, "re-published submission");
                }
                Err(e) => tracing::warn!(job = %job.job_id, error = %e, "janitor publish failed"),
            }
        }
        let _ = self.exchange.purge_stale_staging(self.config.janitor_after);
        published
    }

    /// One background pass: ingest results, then repair submissions.
    pub fn tick(&self) {
        self.sync_outbox();
        self.janitor();
    }
}

fn extension(kind: MediaKind) -> &'static str {
    match kind {
        MediaKind::FrameSequence => "zip",
        MediaKind::OpaqueVideo => "bin",
    }
}

/// Frame-sequence zips are recognised by their `meta.json`; anything else
/// is stored as opaque video.
pub fn sniff_media(path: &Path) -> Result<MediaKind, ApiError> {
    let file = fs::File::open(path).map_err(internal)?;
    match sniff_zip(std::io::BufReader::new(file)) {
        Ok(Some(_)) => Ok(MediaKind::FrameSequence),
        Ok(None) => Ok(MediaKind::OpaqueVideo),
        Err(e) => Err(ApiError::InvalidMedia(e.to_string())),
    }
}
