//! Two-folder file exchange between the front-end and the back-end.
//!
//! Each message is an *envelope*: a directory holding payload files and a
//! `manifest.json` with a SHA-256 digest per payload file. Publishing writes
//! everything under `<root>/.staging/<id>/`, writes the manifest last, then
//! renames the staging directory to `<root>/<id>`. A reader therefore either
//! sees a complete envelope or nothing. Consuming renames `<root>/<id>` to
//! `<root>/<id>.consumed`, so a later poll never re-delivers it.
//!
//! The inbox carries submissions (front-end to back-end) and the outbox
//! carries results (back-end to front-end). [`FrontEndExchange`] and
//! [`BackEndExchange`] expose only the operations each side may perform.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Job, JobId};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAGING_DIR: &str = ".staging";
pub const CONSUMED_SUFFIX: &str = ".consumed";
pub const RESULTS_SUFFIX: &str = ".results";
pub const SCHEMA_VERSION: u32 = 1;

pub const JOB_FILE: &str = "job.json";
pub const BUNDLE_FILE: &str = "bundle.zip";

#[derive(Debug, thiserror::Error)]
pub enum ExchangeError {
    #[error("io-error: {0}")]
    Io(#[from] io::Error),
    #[error("duplicate-envelope: {0}")]
    Duplicate(String),
    #[error("not-found: {0}")]
    NotFound(String),
    #[error("corrupt-envelope: {id}: {reason}")]
    Corrupt { id: String, reason: String },
    #[error("invalid envelope id `{0}`")]
    InvalidId(String),
    #[error("config-error: {0}")]
    Config(String),
}

impl ExchangeError {
    pub fn code(&self) -> &'static str {
        match self {
            ExchangeError::Io(_) => "io-error",
            ExchangeError::Duplicate(_) => "duplicate-envelope",
            ExchangeError::NotFound(_) => "not-found",
            ExchangeError::Corrupt { .. } => "corrupt-envelope",
            ExchangeError::InvalidId(_) => "invalid-id",
            ExchangeError::Config(_) => "config-error",
        }
    }
}

pub type Result<T, E = ExchangeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeKind {
    Submission,
    Results,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub envelope_id: String,
    pub kind: EnvelopeKind,
    /// Relative payload path to lowercase hex SHA-256.
    pub payload_digest: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct ExchangeDirs {
    pub inbox_root: PathBuf,
    pub outbox_root: PathBuf,
}

impl ExchangeDirs {
    pub fn new(inbox_root: impl Into<PathBuf>, outbox_root: impl Into<PathBuf>) -> Result<Self> {
        let dirs = ExchangeDirs {
            inbox_root: inbox_root.into(),
            outbox_root: outbox_root.into(),
        };
        for root in [&dirs.inbox_root, &dirs.outbox_root] {
            if root.exists() && !root.is_dir() {
                return Err(ExchangeError::Config(format!(
                    "{} exists and is not a directory",
                    root.display()
                )));
            }
            fs::create_dir_all(root.join(STAGING_DIR)).map_err(|e| {
                ExchangeError::Config(format!("cannot create {}: {e}", root.display()))
            })?;
        }
        let a = fs::canonicalize(&dirs.inbox_root)?;
        let b = fs::canonicalize(&dirs.outbox_root)?;
        if a == b || a.starts_with(&b) || b.starts_with(&a) {
            return Err(ExchangeError::Config(
                "inbox and outbox must be distinct, non-nested directories".into(),
            ));
        }
        Ok(dirs)
    }

    /// `<root>/inbox` and `<root>/outbox`.
    pub fn under(root: &Path) -> Result<Self> {
        if root.exists() && !root.is_dir() {
            return Err(ExchangeError::Config(format!(
                "{} exists and is not a directory",
                root.display()
            )));
        }
        Self::new(root.join("inbox"), root.join("outbox"))
    }
}

/// Points in the publish/consume protocol where an injected crash can stop
/// the writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    CreateStaging,
    WritePayload,
    WriteManifest,
    Rename,
    ConsumeRename,
}

/// Deterministic crash injection for the exchange protocol. Every boundary
/// increments a counter; the boundary whose ordinal equals `crash_at` fails
/// with an injected error instead of completing. A crash inside a payload or
/// manifest write leaves a truncated file behind, like a real power cut.
#[derive(Debug, Default)]
pub struct FaultInjector {
    crash_at: AtomicUsize,
    counter: AtomicUsize,
}

impl FaultInjector {
    pub fn disarmed() -> Arc<Self> {
        Arc::new(FaultInjector {
            crash_at: AtomicUsize::new(usize::MAX),
            counter: AtomicUsize::new(0),
        })
    }

    pub fn crash_at(ordinal: usize) -> Arc<Self> {
        Arc::new(FaultInjector {
            crash_at: AtomicUsize::new(ordinal),
            counter: AtomicUsize::new(0),
        })
    }

    pub fn arm(&self, ordinal: usize) {
        self.counter.store(0, Ordering::SeqCst);
        self.crash_at.store(ordinal, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.crash_at.store(usize::MAX, Ordering::SeqCst);
    }

    /// Boundaries passed since the last `arm`.
    pub fn boundaries_seen(&self) -> usize {
        self.counter.load(Ordering::SeqCst)
    }

    fn hit(&self, at: Boundary) -> io::Result<()> {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        if n == self.crash_at.load(Ordering::SeqCst) {
            Err(injected(at))
        } else {
            Ok(())
        }
    }
}

fn injected(at: Boundary) -> io::Error {
    io::Error::other(format!("injected crash at {at:?}"))
}

pub fn is_injected_crash(err: &ExchangeError) -> bool {
    matches!(err, ExchangeError::Io(e) if e.to_string().starts_with("injected crash"))
}

/// A complete, digest-verified envelope.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub id: String,
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Envelope {
    pub fn payload_files(&self) -> Vec<PathBuf> {
        self.manifest
            .payload_digest
            .keys()
            .map(|name| self.dir.join(name))
            .collect()
    }

    pub fn payload(&self, name: &str) -> Option<PathBuf> {
        self.manifest
            .payload_digest
            .contains_key(name)
            .then(|| self.dir.join(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptEnvelope {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct PollOutcome {
    pub envelopes: Vec<Envelope>,
    pub corrupt: Vec<CorruptEnvelope>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeState {
    Absent,
    Published,
    Consumed,
}

enum Source<'a> {
    Bytes(&'a [u8]),
    File(&'a Path),
}

#[derive(Debug, Clone)]
struct Channel {
    root: PathBuf,
    faults: Option<Arc<FaultInjector>>,
}

impl Channel {
    fn hit(&self, at: Boundary) -> io::Result<()> {
        match &self.faults {
            Some(f) => f.hit(at),
            None => Ok(()),
        }
    }

    fn state(&self, id: &str) -> EnvelopeState {
        if self.root.join(id).join(MANIFEST_FILE).is_file() {
            EnvelopeState::Published
        } else if self.root.join(format!("{id}{CONSUMED_SUFFIX}")).is_dir() {
            EnvelopeState::Consumed
        } else {
            EnvelopeState::Absent
        }
    }

    fn publish(&self, id: &str, kind: EnvelopeKind, files: &[(&str, Source<'_>)]) -> Result<String> {
        check_id(id)?;
        if self.state(id) != EnvelopeState::Absent {
            return Err(ExchangeError::Duplicate(id.to_string()));
        }
        let staging = self.root.join(STAGING_DIR).join(id);
        if staging.exists() {
            // left over from an earlier crashed attempt
            fs::remove_dir_all(&staging)?;
        }
        self.hit(Boundary::CreateStaging)?;
        fs::create_dir_all(&staging)?;

        let mut payload_digest = BTreeMap::new();
        for (name, src) in files {
            let digest = self.write_file(&staging.join(name), src, Boundary::WritePayload)?;
            payload_digest.insert(name.to_string(), digest);
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            envelope_id: id.to_string(),
            kind,
            payload_digest,
            created_at: Utc::now(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        self.write_file(
            &staging.join(MANIFEST_FILE),
            &Source::Bytes(&bytes),
            Boundary::WriteManifest,
        )?;
        sync_dir(&staging);

        self.hit(Boundary::Rename)?;
        let target = self.root.join(id);
        if self.state(id) != EnvelopeState::Absent {
            let _ = fs::remove_dir_all(&staging);
            return Err(ExchangeError::Duplicate(id.to_string()));
        }
        match fs::rename(&staging, &target) {
            Ok(()) => {}
            Err(e) if target.exists() => {
                let _ = fs::remove_dir_all(&staging);
                tracing::debug!("rename raced with another publisher: {e}");
                return Err(ExchangeError::Duplicate(id.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        sync_dir(&self.root);
        Ok(id.to_string())
    }

    /// Writes `src` to `path` and returns its hex digest. On an injected
    /// crash, half the content is left on disk.
    fn write_file(&self, path: &Path, src: &Source<'_>, at: Boundary) -> Result<String> {
        let crash = self.hit(at).err();
        let mut hasher = Sha256::new();
        let mut out = File::create(path)?;
        match src {
            Source::Bytes(b) => {
                let n = if crash.is_some() { b.len() / 2 } else { b.len() };
                out.write_all(&b[..n])?;
                hasher.update(&b[..n]);
            }
            Source::File(p) => {
                let mut input = File::open(p)?;
                let len = input.metadata()?.len();
                let limit = if crash.is_some() { len / 2 } else { u64::MAX };
                let mut reader = (&mut input).take(limit);
                let mut buf = vec![0u8; 64 * 1024];
                loop {
                    let n = reader.read(&mut buf)?;
                    if n == 0 {
                        break;
                    }
                    out.write_all(&buf[..n])?;
                    hasher.update(&buf[..n]);
                }
            }
        }
        if let Some(e) = crash {
            return Err(e.into());
        }
        out.sync_all()?;
        Ok(hex::encode(hasher.finalize()))
    }

    fn poll(&self, seen: &HashSet<String>) -> Result<PollOutcome> {
        let mut out = PollOutcome::default();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let Ok(name) = entry.file_name().into_string() else {
                continue;
            };
            if name.starts_with('.') || name.ends_with(CONSUMED_SUFFIX) || seen.contains(&name) {
                continue;
            }
            let dir = entry.path();
            if !dir.join(MANIFEST_FILE).is_file() {
                continue;
            }
            match load_verified(&dir, &name) {
                Ok(env) => out.envelopes.push(env),
                Err(ExchangeError::Corrupt { id, reason }) => {
                    out.corrupt.push(CorruptEnvelope { id, reason })
                }
                Err(ExchangeError::Io(e)) if e.kind() == io::ErrorKind::NotFound => {
                    // consumed between read_dir and load
                }
                Err(e) => return Err(e),
            }
        }
        out.envelopes.sort_by(|a, b| {
            (a.manifest.created_at, &a.id).cmp(&(b.manifest.created_at, &b.id))
        });
        out.corrupt.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    fn consume(&self, id: &str) -> Result<Envelope> {
        check_id(id)?;
        let dir = self.root.join(id);
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(ExchangeError::NotFound(id.to_string()));
        }
        let env = load_verified(&dir, id)?;
        self.hit(Boundary::ConsumeRename)?;
        let consumed = self.root.join(format!("{id}{CONSUMED_SUFFIX}"));
        match fs::rename(&dir, &consumed) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ExchangeError::NotFound(id.to_string()))
            }
            Err(_) if consumed.exists() => return Err(ExchangeError::NotFound(id.to_string())),
            Err(e) => return Err(e.into()),
        }
        sync_dir(&self.root);
        Ok(Envelope {
            dir: consumed,
            ..env
        })
    }

    fn reopen_consumed(&self, id: &str) -> Result<Envelope> {
        check_id(id)?;
        let dir = self.root.join(format!("{id}{CONSUMED_SUFFIX}"));
        if !dir.is_dir() {
            return Err(ExchangeError::NotFound(id.to_string()));
        }
        load_verified(&dir, id)
    }

    fn purge_consumed(&self, retention: Duration) -> Result<usize> {
        purge_older_than(&self.root, retention, |name| name.ends_with(CONSUMED_SUFFIX))
    }

    fn purge_staging(&self, older_than: Duration) -> Result<usize> {
        purge_older_than(&self.root.join(STAGING_DIR), older_than, |_| true)
    }
}

fn purge_older_than(dir: &Path, age: Duration, pick: impl Fn(&str) -> bool) -> Result<usize> {
    let now = SystemTime::now();
    let mut purged = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !pick(&name) || name == STAGING_DIR {
            continue;
        }
        let modified = entry.metadata()?.modified()?;
        if now.duration_since(modified).unwrap_or_default() >= age {
            fs::remove_dir_all(entry.path())?;
            purged += 1;
        }
    }
    Ok(purged)
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && !id.ends_with(CONSUMED_SUFFIX)
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(ExchangeError::InvalidId(id.to_string()))
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    io::copy(&mut f, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

fn load_verified(dir: &Path, id: &str) -> Result<Envelope> {
    let corrupt = |reason: String| ExchangeError::Corrupt {
        id: id.to_string(),
        reason,
    };
    let raw = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(corrupt(format!(
            "unsupported schema_version {}",
            manifest.schema_version
        )));
    }
    if manifest.envelope_id != id {
        return Err(corrupt(format!(
            "manifest names `{}`",
            manifest.envelope_id
        )));
    }
    for (name, expected) in &manifest.payload_digest {
        if name.contains("..") || name.starts_with('/') {
            return Err(corrupt(format!("bad payload path `{name}`")));
        }
        match file_digest(&dir.join(name)) {
            Ok(actual) if &actual == expected => {}
            Ok(_) => return Err(corrupt(format!("digest mismatch for {name}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(corrupt(format!("missing payload {name}")))
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Envelope {
        id: id.to_string(),
        dir: dir.to_path_buf(),
        manifest,
    })
}

pub fn results_envelope_id(job_id: &JobId) -> String {
    format!("{job_id}{RESULTS_SUFFIX}")
}

/// Name of the video payload inside a submission envelope.
pub fn video_payload_name(job: &Job) -> &'static str {
    match job.video.media_kind {
        crate::model::MediaKind::FrameSequence => "video.zip",
        crate::model::MediaKind::OpaqueVideo => "video.bin",
    }
}

/// Front-end side: publishes submissions into the inbox, reads results from
/// the outbox.
#[derive(Debug, Clone)]
pub struct FrontEndExchange {
    inbox: Channel,
    outbox: Channel,
}

/// Back-end side: reads submissions from the inbox, publishes results into
/// the outbox.
#[derive(Debug, Clone)]
pub struct BackEndExchange {
    inbox: Channel,
    outbox: Channel,
}

fn channels(dirs: &ExchangeDirs, faults: Option<Arc<FaultInjector>>) -> (Channel, Channel) {
    (
        Channel {
            root: dirs.inbox_root.clone(),
            faults: faults.clone(),
        },
        Channel {
            root: dirs.outbox_root.clone(),
            faults,
        },
    )
}

impl FrontEndExchange {
    pub fn new(dirs: &ExchangeDirs) -> Self {
        Self::with_faults(dirs, None)
    }

    pub fn with_faults(dirs: &ExchangeDirs, faults: Option<Arc<FaultInjector>>) -> Self {
        let (inbox, outbox) = channels(dirs, faults);
        FrontEndExchange { inbox, outbox }
    }

    /// Publishes `job.json` plus the video payload as envelope `<job_id>`.
    pub fn publish_submission(&self, job: &Job, video: &Path) -> Result<String> {
        let job_json = serde_json::to_vec_pretty(job).expect("job serializes");
        self.inbox.publish(
            job.job_id.as_str(),
            EnvelopeKind::Submission,
            &[
                (JOB_FILE, Source::Bytes(&job_json)),
                (video_payload_name(job), Source::File(video)),
            ],
        )
    }

    pub fn submission_state(&self, job_id: &JobId) -> EnvelopeState {
        self.inbox.state(job_id.as_str())
    }

    pub fn poll_outbox(&self, seen: &HashSet<String>) -> Result<PollOutcome> {
        self.outbox.poll(seen)
    }

    pub fn consume_results(&self, envelope_id: &str) -> Result<Envelope> {
        self.outbox.consume(envelope_id)
    }

    pub fn results_state(&self, job_id: &JobId) -> EnvelopeState {
        self.outbox.state(&results_envelope_id(job_id))
    }

    pub fn purge_consumed_results(&self, retention: Duration) -> Result<usize> {
        self.outbox.purge_consumed(retention)
    }

    pub fn purge_stale_staging(&self, older_than: Duration) -> Result<usize> {
        self.inbox.purge_staging(older_than)
    }
}

impl BackEndExchange {
    pub fn new(dirs: &ExchangeDirs) -> Self {
        Self::with_faults(dirs, None)
    }

    pub fn with_faults(dirs: &ExchangeDirs, faults: Option<Arc<FaultInjector>>) -> Self {
        let (inbox, outbox) = channels(dirs, faults);
        BackEndExchange { inbox, outbox }
    }

    pub fn poll_inbox(&self, seen: &HashSet<String>) -> Result<PollOutcome> {
        self.inbox.poll(seen)
    }

    pub fn consume(&self, envelope_id: &str) -> Result<Envelope> {
        self.inbox.consume(envelope_id)
    }

    /// Re-opens an envelope this side already consumed (crash recovery).
    pub fn reopen_consumed(&self, envelope_id: &str) -> Result<Envelope> {
        self.inbox.reopen_consumed(envelope_id)
    }

    pub fn submission_state(&self, envelope_id: &str) -> EnvelopeState {
        self.inbox.state(envelope_id)
    }

    /// Publishes `bundle.zip` as envelope `<job_id>.results`. The job need
    /// not be known to the exchange.
    pub fn publish_results(&self, job_id: &JobId, bundle: &[u8]) -> Result<String> {
        self.outbox.publish(
            &results_envelope_id(job_id),
            EnvelopeKind::Results,
            &[(BUNDLE_FILE, Source::Bytes(bundle))],
        )
    }

    pub fn results_state(&self, job_id: &JobId) -> EnvelopeState {
        self.outbox.state(&results_envelope_id(job_id))
    }

    pub fn purge_consumed_submissions(&self, retention: Duration) -> Result<usize> {
        self.inbox.purge_consumed(retention)
    }

    pub fn purge_stale_staging(&self, older_than: Duration) -> Result<usize> {
        self.outbox.purge_staging(older_than)
    }
}
