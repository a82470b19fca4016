//! Back-end job loop.
//!
//! One consumer thread polls the inbox, records each envelope in the journal
//! and hands it to a fixed pool of job workers. Each worker fans its job out
//! to the selected detectors on a nested pool, builds the result bundle and
//! publishes it to the outbox.
//!
//! The journal (`scheduler.journal`, JSON lines) is what makes restarts safe:
//! `consumed` is written before the envelope is renamed and `answered` after
//! the results envelope is published, so on start-up every consumed but
//! unanswered job is executed again. Publishing is idempotent; an existing
//! results envelope counts as the answer.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analysis::{build_bundle, ScoreSeries};
use crate::exchange::{
    BackEndExchange, Envelope, EnvelopeState, ExchangeDirs, ExchangeError, JOB_FILE,
};
use crate::frameseq::{extract_zip, FrameSeqMeta};
use crate::model::{Job, JobId, JobState, MediaKind};
use crate::plugin::{spawn, PluginError, Registry, SandboxConfig};

pub const JOURNAL_FILE: &str = "scheduler.journal";

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Succeeded(ScoreSeries),
    Failed(String),
    TimedOut(String),
}

impl RunOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            RunOutcome::Succeeded(_) => "succeeded",
            RunOutcome::Failed(_) => "failed",
            RunOutcome::TimedOut(_) => "timed_out",
        }
    }
}

/// Result of running one detector over one job's video.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRun {
    pub job_id: JobId,
    pub detector_id: String,
    pub outcome: RunOutcome,
    /// Seconds.
    pub wall_time: f64,
}

impl DetectorRun {
    pub fn succeeded(&self) -> bool {
        matches!(self.outcome, RunOutcome::Succeeded(_))
    }

    pub fn scores(&self) -> Option<&ScoreSeries> {
        match &self.outcome {
            RunOutcome::Succeeded(s) => Some(s),
            _ => None,
        }
    }

    pub fn error_note(&self) -> Option<&str> {
        match &self.outcome {
            RunOutcome::Succeeded(_) => None,
            RunOutcome::Failed(n) | RunOutcome::TimedOut(n) => Some(n),
        }
    }
}

/// Terminal state for a finished set of runs. An empty set counts as failed.
pub fn classify_outcome(runs: &[DetectorRun]) -> JobState {
    let ok = runs.iter().filter(|r| r.succeeded()).count();
    if ok == 0 {
        JobState::Failed
    } else if ok == runs.len() {
        JobState::Completed
    } else {
        JobState::PartiallyCompleted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub max_parallel_jobs: usize,
    pub max_parallel_detectors_per_job: usize,
    pub detector_timeout: Duration,
    pub poll_interval: Duration,
    /// How long consumed submissions are kept; `None` keeps them.
    pub retention: Option<Duration>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            max_parallel_jobs: 2,
            max_parallel_detectors_per_job: 4,
            detector_timeout: Duration::from_secs(300),
            poll_interval: Duration::from_millis(500),
            retention: None,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::Config(m.to_string()));
        if self.max_parallel_jobs == 0 {
            return bad("max_parallel_jobs must be at least 1");
        }
        if self.max_parallel_detectors_per_job == 0 {
            return bad("max_parallel_detectors_per_job must be at least 1");
        }
        if self.detector_timeout.is_zero() {
            return bad("detector_timeout must be positive");
        }
        if self.poll_interval.is_zero() {
            return bad("poll_interval must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("config-error: {0}")]
    Config(String),
    #[error("journal: {0}")]
    Journal(#[from] std::io::Error),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
}

/// Runs every selected detector over the video. One run per detector, in
/// job order, at most `max_parallel_detectors_per_job` at a time.
pub fn execute_job(
    job: &Job,
    video: &Path,
    registry: &Registry,
    sandbox: &SandboxConfig,
    config: &SchedulerConfig,
    work_dir: &Path,
) -> Vec<DetectorRun> {
    let failed_all = |note: String| -> Vec<DetectorRun> {
        job.detectors
            .iter()
            .map(|d| DetectorRun {
                job_id: job.job_id.clone(),
                detector_id: d.clone(),
                outcome: RunOutcome::Failed(note.clone()),
                wall_time: 0.0,
            })
            .collect()
    };

    let frames: Option<(FrameSeqMeta, Vec<PathBuf>)> = match job.video.media_kind {
        MediaKind::FrameSequence => match extract_zip(video, &work_dir.join("frames")) {
            Ok(dir) => Some((dir.meta, dir.frame_paths())),
            Err(e) => return failed_all(format!("invalid-media: {e}")),
        },
        MediaKind::OpaqueVideo => None,
    };

    let mut sandbox = sandbox.clone();
    sandbox.handshake_timeout = sandbox.handshake_timeout.min(config.detector_timeout);

    let slots: Vec<Mutex<Option<DetectorRun>>> = job.detectors.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.max_parallel_detectors_per_job.min(job.detectors.len()).max(1);
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(detector_id) = job.detectors.get(i) else { break };
                let run = run_detector(job, detector_id, frames.as_ref(), registry, &sandbox, config);
                *slots[i].lock().unwrap() = Some(run);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn run_detector(
    job: &Job,
    detector_id: &str,
    frames: Option<&(FrameSeqMeta, Vec<PathBuf>)>,
    registry: &Registry,
    sandbox: &SandboxConfig,
    config: &SchedulerConfig,
) -> DetectorRun {
    let start = Instant::now();
    let outcome = detector_outcome(job, detector_id, frames, registry, sandbox, config, start);
    DetectorRun {
        job_id: job.job_id.clone(),
        detector_id: detector_id.to_string(),
        outcome,
        wall_time: start.elapsed().as_secs_f64(),
    }
}

fn detector_outcome(
    job: &Job,
    detector_id: &str,
    frames: Option<&(FrameSeqMeta, Vec<PathBuf>)>,
    registry: &Registry,
    sandbox: &SandboxConfig,
    config: &SchedulerConfig,
    start: Instant,
) -> RunOutcome {
    let Some(descriptor) = registry.get(detector_id) else {
        return RunOutcome::Failed(format!("unknown-detector: {detector_id}"));
    };
    let kind = job.video.media_kind;
    let (Some((_, paths)), true) = (frames, descriptor.accepts(kind)) else {
        return RunOutcome::Failed(format!("unsupported-media: {detector_id} does not accept {kind}"));
    };
    let deadline = start + config.detector_timeout;
    let classify = |e: PluginError| match e.root() {
        PluginError::TimedOut | PluginError::HandshakeTimeout(_) => {
            RunOutcome::TimedOut(format!("timed-out after {:?}: {e}", config.detector_timeout))
        }
        _ => RunOutcome::Failed(format!("{}: {e}", e.code())),
    };
    let mut session = match spawn(descriptor, sandbox) {
        Ok(s) => s,
        Err(e) => return classify(e),
    };
    match session.run_video(paths, Some(deadline)) {
        Ok(scores) => {
            session.shutdown();
            match ScoreSeries::new(detector_id, scores) {
                Ok(s) => RunOutcome::Succeeded(s),
                Err(e) => RunOutcome::Failed(format!("malformed-response: {e}")),
            }
        }
        Err(e) => {
            let mut outcome = classify(e);
            let tail = session.stderr_tail();
            if let (RunOutcome::Failed(note), false) = (&mut outcome, tail.is_empty()) {
                if !note.contains(&tail) {
                    note.push_str(&format!(" (stderr: {tail})"));
                }
            }
            outcome
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JournalEvent {
    Consumed,
    Queued,
    Running,
    Completed,
    PartiallyCompleted,
    Failed,
    Answered,
    /// Envelope could not be turned into a job; it is never answered.
    Rejected,
}

impl JournalEvent {
    fn terminal(state: JobState) -> Self {
        match state {
            JobState::Completed => JournalEvent::Completed,
            JobState::PartiallyCompleted => JournalEvent::PartiallyCompleted,
            _ => JournalEvent::Failed,
        }
    }

    fn is_terminal(self) -> bool {
        matches!(
            self,
            JournalEvent::Completed | JournalEvent::PartiallyCompleted | JournalEvent::Failed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub job_id: String,
    pub event: JournalEvent,
    pub timestamp: DateTime<Utc>,
}

/// Append-only JSON-lines journal.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, job_id: &str, event: JournalEvent) -> std::io::Result<()> {
        let entry = JournalEntry {
            job_id: job_id.to_string(),
            event,
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_string(&entry).expect("journal entry serializes");
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    pub fn entries(&self) -> std::io::Result<Vec<JournalEntry>> {
        read_journal(&self.path)
    }
}

/// Reads a journal, skipping a torn final line.
pub fn read_journal(path: &Path) -> std::io::Result<Vec<JournalEntry>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        if let Ok(entry) = serde_json::from_str(&line?) {
            out.push(entry);
        }
    }
    Ok(out)
}

/// Per-job replay of a journal.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct JournalReplay {
    pub jobs: BTreeMap<String, Vec<JournalEvent>>,
}

impl JournalReplay {
    pub fn from_entries(entries: &[JournalEntry]) -> Self {
        let mut jobs: BTreeMap<String, Vec<JournalEvent>> = BTreeMap::new();
        for e in entries {
            jobs.entry(e.job_id.clone()).or_default().push(e.event);
        }
        JournalReplay { jobs }
    }

    /// Jobs consumed but neither answered nor rejected.
    pub fn unanswered(&self) -> Vec<String> {
        self.jobs
            .iter()
            .filter(|(_, ev)| {
                ev.contains(&JournalEvent::Consumed)
                    && !ev.contains(&JournalEvent::Answered)
                    && !ev.contains(&JournalEvent::Rejected)
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn answered(&self) -> Vec<String> {
        self.jobs
            .iter()
            .filter(|(_, ev)| ev.contains(&JournalEvent::Answered))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Checks the ordering rules: every job starts with `consumed`, is
    /// answered at most once, `answered` is its last event and comes after a
    /// terminal event. Re-executions after a restart may repeat the earlier
    /// events.
    pub fn inconsistencies(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (id, ev) in &self.jobs {
            if ev.first() != Some(&JournalEvent::Consumed) {
                out.push(format!("{id}: first event is {:?}", ev.first()));
            }
            let answered: Vec<usize> = ev
                .iter()
                .enumerate()
                .filter(|(_, e)| **e == JournalEvent::Answered)
                .map(|(i, _)| i)
                .collect();
            match answered.as_slice() {
                [] => {}
                [i] => {
                    if *i != ev.len() - 1 {
                        out.push(format!("{id}: events after answered"));
                    }
                    // a recovered job whose results were already out is
                    // answered without a terminal event in this run
                    let recovered = ev[..*i].iter().filter(|e| **e == JournalEvent::Consumed).count() > 1
                        || ev[..*i].last() == Some(&JournalEvent::Consumed);
                    if !recovered && !ev[..*i].iter().any(|e| e.is_terminal()) {
                        out.push(format!("{id}: answered without a terminal state"));
                    }
                }
                _ => out.push(format!("{id}: answered {} times", answered.len())),
            }
        }
        out
    }
}

/// Counters exposed while the loop runs.
#[derive(Debug, Default)]
pub struct SchedulerStats {
    pub consumed: AtomicUsize,
    pub answered: AtomicUsize,
    pub recovered: AtomicUsize,
    pub publish_errors: AtomicUsize,
}

struct Shared {
    exchange: BackEndExchange,
    registry: Arc<Registry>,
    sandbox: SandboxConfig,
    config: SchedulerConfig,
    journal: Journal,
    work_root: PathBuf,
    stats: Arc<SchedulerStats>,
}

pub struct Scheduler {
    shared: Arc<Shared>,
}

impl Scheduler {
    /// `state_dir` holds the journal and per-job working directories.
    pub fn new(
        dirs: &ExchangeDirs,
        registry: Arc<Registry>,
        sandbox: SandboxConfig,
        config: SchedulerConfig,
        state_dir: &Path,
    ) -> Result<Self, SchedulerError> {
        Self::with_exchange(BackEndExchange::new(dirs), registry, sandbox, config, state_dir)
    }

    pub fn with_exchange(
        exchange: BackEndExchange,
        registry: Arc<Registry>,
        sandbox: SandboxConfig,
        config: SchedulerConfig,
        state_dir: &Path,
    ) -> Result<Self, SchedulerError> {
        config.validate()?;
        fs::create_dir_all(state_dir)?;
        let journal = Journal::open(&state_dir.join(JOURNAL_FILE))?;
        Ok(Scheduler {
            shared: Arc::new(Shared {
                exchange,
                registry,
                sandbox,
                config,
                journal,
                work_root: state_dir.join("work"),
                stats: Arc::new(SchedulerStats::default()),
            }),
        })
    }

    pub fn stats(&self) -> Arc<SchedulerStats> {
        self.shared.stats.clone()
    }

    pub fn journal_path(&self) -> &Path {
        self.shared.journal.path()
    }

    /// Runs until `stop` is set, then lets in-flight jobs finish.
    pub fn run_until(&self, stop: &AtomicBool) -> Result<(), SchedulerError> {
        self.run(|_| stop.load(Ordering::SeqCst))
    }

    /// Runs until the inbox is empty and every job taken so far is answered.
    pub fn drain(&self) -> Result<(), SchedulerError> {
        self.run(|idle| idle)
    }

    fn run(&self, mut should_stop: impl FnMut(bool) -> bool) -> Result<(), SchedulerError> {
        let shared = &self.shared;
        let _ = shared.exchange.purge_stale_staging(Duration::ZERO);
        let (tx, rx) = mpsc::channel::<Envelope>();
        let rx = Arc::new(Mutex::new(rx));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let workers: Vec<_> = (0..shared.config.max_parallel_jobs)
            .map(|_| {
                let rx = rx.clone();
                let shared = shared.clone();
                let in_flight = in_flight.clone();
                thread::spawn(move || loop {
                    let next = rx.lock().unwrap_or_else(|p| p.into_inner()).recv();
                    let Ok(envelope) = next else { break };
                    process_envelope(&shared, envelope);
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();

        let dispatch = |env: Envelope| {
            in_flight.fetch_add(1, Ordering::SeqCst);
            let _ = shared.journal.record(&env.id, JournalEvent::Queued);
            tx.send(env).expect("workers alive");
        };

        for env in self.recover()? {
            dispatch(env);
        }

        let mut skip: HashSet<String> = HashSet::new();
        let mut last_purge = Instant::now();
        let result = loop {
            let mut took = 0;
            match shared.exchange.poll_inbox(&skip) {
                Ok(outcome) => {
                    for bad in outcome.corrupt {
                        tracing::warn!(envelope = %bad.id, reason = %bad.reason, "corrupt submission envelope");
                        skip.insert(bad.id);
                    }
                    for env in outcome.envelopes {
                        if let Err(e) = shared.journal.record(&env.id, JournalEvent::Consumed) {
                            log_journal_error(&e);
                            skip.insert(env.id);
                            continue;
                        }
                        match shared.exchange.consume(&env.id) {
                            Ok(env) => {
                                shared.stats.consumed.fetch_add(1, Ordering::SeqCst);
                                took += 1;
                                dispatch(env);
                            }
                            Err(e) => {
                                tracing::warn!(envelope = %env.id, error = %e, "consume failed");
                                skip.insert(env.id);
                            }
                        }
                    }
                }
                Err(e) => tracing::warn!(error = %e, "inbox poll failed"),
            }
            if let Some(retention) = shared.config.retention {
                if last_purge.elapsed() > retention.min(Duration::from_secs(60)) {
                    let _ = shared.exchange.purge_consumed_submissions(retention);
                    last_purge = Instant::now();
                }
            }
            let idle = took == 0 && in_flight.load(Ordering::SeqCst) == 0;
            if should_stop(idle) {
                break Ok(());
            }
            thread::sleep(shared.config.poll_interval);
        };
        drop(tx);
        for w in workers {
            let _ = w.join();
        }
        result
    }

    /// Re-opens consumed but unanswered envelopes found in the journal.
    fn recover(&self) -> Result<Vec<Envelope>, SchedulerError> {
        let shared = &self.shared;
        let replay = JournalReplay::from_entries(&shared.journal.entries()?);
        let mut out = Vec::new();
        for id in replay.unanswered() {
            let Some(job_id) = JobId::parse(&id) else { continue };
            if shared.exchange.results_state(&job_id) != EnvelopeState::Absent {
                shared.journal.record(&id, JournalEvent::Answered)?;
                continue;
            }
            match shared.exchange.submission_state(&id) {
                // never renamed; the next poll picks it up
                EnvelopeState::Published => continue,
                EnvelopeState::Absent => {
                    tracing::warn!(job = %id, "journaled job has no envelope left");
                    shared.journal.record(&id, JournalEvent::Rejected)?;
                }
                EnvelopeState::Consumed => match shared.exchange.reopen_consumed(&id) {
                    Ok(env) => {
                        tracing::info!(job = %id, "re-executing unanswered job");
                        shared.stats.recovered.fetch_add(1, Ordering::SeqCst);
                        out.push(env);
                    }
                    Err(e) => {
                        tracing::warn!(job = %id, error = %e, "cannot reopen consumed envelope");
                        shared.journal.record(&id, JournalEvent::Rejected)?;
                    }
                },
            }
        }
        Ok(out)
    }
}

fn log_journal_error(e: &std::io::Error) {
    tracing::error!(error = %e, "journal write failed; envelope left in the inbox");
}

fn load_job(envelope: &Envelope) -> Result<(Job, PathBuf), String> {
    let job_path = envelope.payload(JOB_FILE).ok_or("missing job.json")?;
    let raw = fs::read(&job_path).map_err(|e| e.to_string())?;
    let job: Job = serde_json::from_slice(&raw).map_err(|e| format!("job.json: {e}"))?;
    if job.job_id.as_str() != envelope.id {
        return Err(format!("job.json names {} inside envelope {}", job.job_id, envelope.id));
    }
    let video = envelope
        .payload(crate::exchange::video_payload_name(&job))
        .ok_or("missing video payload")?;
    Ok((job, video))
}

fn process_envelope(shared: &Shared, envelope: Envelope) {
    let id = envelope.id.clone();
    let (job, video) = match load_job(&envelope) {
        Ok(x) => x,
        Err(reason) => {
            tracing::warn!(envelope = %id, %reason, "rejecting submission");
            let _ = shared.journal.record(&id, JournalEvent::Rejected);
            return;
        }
    };
    let job = job.advance_to(JobState::Running).unwrap_or(job);
    let _ = shared.journal.record(&id, JournalEvent::Running);
    tracing::info!(job = %id, detectors = ?job.detectors, "running");

    let work_dir = shared.work_root.join(&id);
    let _ = fs::remove_dir_all(&work_dir);
    let runs = execute_job(&job, &video, &shared.registry, &shared.sandbox, &shared.config, &work_dir);
    let media = frame_meta(&work_dir);
    let _ = fs::remove_dir_all(&work_dir);

    let state = classify_outcome(&runs);
    let bundle = match build_bundle(&job, &runs, media.as_ref(), Utc::now()) {
        Ok(b) => b,
        Err(e) => {
            tracing::error!(job = %id, error = %e, "cannot build bundle");
            let _ = shared.journal.record(&id, JournalEvent::Rejected);
            return;
        }
    };
    let _ = shared.journal.record(&id, JournalEvent::terminal(state));
    match shared.exchange.publish_results(&job.job_id, &bundle.bytes) {
        Ok(_) | Err(ExchangeError::Duplicate(_)) => {
            let _ = shared.journal.record(&id, JournalEvent::Answered);
            shared.stats.answered.fetch_add(1, Ordering::SeqCst);
            tracing::info!(job = %id, state = state.as_str(), "answered");
        }
        Err(e) => {
            // left unanswered in the journal; the next start retries it
            shared.stats.publish_errors.fetch_add(1, Ordering::SeqCst);
            tracing::error!(job = %id, error = %e, "publishing results failed");
        }
    }
}

fn frame_meta(work_dir: &Path) -> Option<FrameSeqMeta> {
    crate::frameseq::FrameSeqDir::open(&work_dir.join("frames"))
        .ok()
        .map(|d| d.meta)
}
