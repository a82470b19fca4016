//! Domain types shared by the gateway, the exchange and the back-end.
//!
//! A [`Job`] is an immutable snapshot. State changes go through
//! [`Job::transition`], which returns a new snapshot and rejects any edge
//! outside the lifecycle graph:
//!
//! ```text
//! Received -> Queued -> Running -> { Completed | PartiallyCompleted | Failed }
//! Received -> Failed
//! ```

use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Largest accepted media payload: 50 × 2^20 bytes.
pub const MAX_VIDEO_BYTES: u64 = 52_428_800;

/// Opaque job identifier. Also used as the submission envelope id, so it
/// is restricted to characters that are safe in a single path component.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(String);

impl JobId {
    pub fn generate() -> Self {
        JobId(uuid::Uuid::new_v4().simple().to_string())
    }

    /// Accepts ids made of ASCII alphanumerics, `-` and `_`.
    pub fn parse(raw: &str) -> Option<Self> {
        let ok = !raw.is_empty()
            && raw.len() <= 128
            && raw
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        ok.then(|| JobId(raw.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VideoOrigin {
    DirectUpload,
    RemoteUrl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediaKind {
    OpaqueVideo,
    FrameSequence,
}

impl fmt::Display for MediaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MediaKind::OpaqueVideo => "opaque-video",
            MediaKind::FrameSequence => "frame-sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub origin: VideoOrigin,
    pub content_path: PathBuf,
    pub byte_size: u64,
    pub media_kind: MediaKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Received,
    Queued,
    Running,
    Completed,
    PartiallyCompleted,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Completed | JobState::PartiallyCompleted | JobState::Failed
        )
    }

    pub fn can_transition_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Received, Queued)
                | (Received, Failed)
                | (Queued, Running)
                | (Running, Completed)
                | (Running, PartiallyCompleted)
                | (Running, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Received => "Received",
            JobState::Queued => "Queued",
            JobState::Running => "Running",
            JobState::Completed => "Completed",
            JobState::PartiallyCompleted => "PartiallyCompleted",
            JobState::Failed => "Failed",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl JobStatus {
    pub fn new(state: JobState) -> Self {
        JobStatus { state, detail: None }
    }
}

/// A 4 to 6 digit PIN. Never persisted; only its salted digest is.
#[derive(Clone, PartialEq, Eq)]
pub struct PinCode(String);

impl PinCode {
    pub fn parse(raw: &str) -> Result<Self, JobError> {
        if (4..=6).contains(&raw.len()) && raw.bytes().all(|b| b.is_ascii_digit()) {
            Ok(PinCode(raw.to_string()))
        } else {
            Err(JobError::InvalidPin)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for PinCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PinCode(****)")
    }
}

/// Salted SHA-256 of a PIN, both parts hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinDigest {
    pub salt: String,
    pub digest: String,
}

impl PinDigest {
    pub fn new(pin: &PinCode) -> Self {
        let mut salt = [0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        PinDigest {
            salt: hex::encode(salt),
            digest: hex::encode(salted(&salt, pin.as_str())),
        }
    }

    /// Compares in time independent of where the digests first differ.
    pub fn matches(&self, candidate: &str) -> bool {
        let (Ok(salt), Ok(stored)) = (hex::decode(&self.salt), hex::decode(&self.digest)) else {
            return false;
        };
        let computed = salted(&salt, candidate);
        constant_time_eq(&computed, &stored)
    }
}

fn salted(salt: &[u8], pin: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(pin.as_bytes());
    h.finalize().into()
}

pub(crate) fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Syntactic check: one `@`, non-empty local part, domain with a `.`.
pub fn is_valid_email(email: &str) -> bool {
    let mut parts = email.split('@');
    let (Some(local), Some(domain), None) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    !local.is_empty()
        && !domain.is_empty()
        && domain.contains('.')
        && !email.chars().any(|c| c.is_whitespace() || c.is_control())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("email: not a valid address")]
    InvalidEmail,
    #[error("pin: must be 4 to 6 digits")]
    InvalidPin,
    #[error("detectors: at least one detector must be selected")]
    EmptyDetectorList,
    #[error("detectors: `{0}` selected more than once")]
    DuplicateDetector(String),
    #[error("video: {size} bytes exceeds the {limit} byte limit")]
    OversizeVideo { size: u64, limit: u64 },
}

impl JobError {
    pub fn code(&self) -> &'static str {
        match self {
            JobError::InvalidEmail => "invalid-email",
            JobError::InvalidPin => "invalid-pin",
            JobError::EmptyDetectorList => "empty-detector-list",
            JobError::DuplicateDetector(_) => "duplicate-detector",
            JobError::OversizeVideo { .. } => "oversize-video",
        }
    }

    pub fn field(&self) -> &'static str {
        match self {
            JobError::InvalidEmail => "email",
            JobError::InvalidPin => "pin",
            JobError::EmptyDetectorList | JobError::DuplicateDetector(_) => "detectors",
            JobError::OversizeVideo { .. } => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition from {from} to {to}")]
pub struct IllegalTransition {
    pub from: JobState,
    pub to: JobState,
}

impl IllegalTransition {
    pub fn code(&self) -> &'static str {
        "illegal-transition"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub video: VideoRef,
    pub detectors: Vec<String>,
    pub email: String,
    pub pin_digest: PinDigest,
    pub created_at: DateTime<Utc>,
    pub status: JobStatus,
}

/// Validates a submission and returns a fresh job in state `Received`.
pub fn create_job(
    video: VideoRef,
    detectors: Vec<String>,
    email: &str,
    pin: &str,
) -> Result<Job, JobError> {
    if video.byte_size > MAX_VIDEO_BYTES {
        return Err(JobError::OversizeVideo {
            size: video.byte_size,
            limit: MAX_VIDEO_BYTES,
        });
    }
    if detectors.is_empty() {
        return Err(JobError::EmptyDetectorList);
    }
    for (i, d) in detectors.iter().enumerate() {
        if detectors[..i].contains(d) {
            return Err(JobError::DuplicateDetector(d.clone()));
        }
    }
    if !is_valid_email(email) {
        return Err(JobError::InvalidEmail);
    }
    let pin = PinCode::parse(pin)?;
    Ok(Job {
        job_id: JobId::generate(),
        video,
        detectors,
        email: email.to_string(),
        pin_digest: PinDigest::new(&pin),
        created_at: Utc::now(),
        status: JobStatus::new(JobState::Received),
    })
}

impl Job {
    pub fn state(&self) -> JobState {
        self.status.state
    }

    pub fn transition(&self, next: JobState) -> Result<Job, IllegalTransition> {
        self.transition_with(next, None)
    }

    pub fn transition_with(
        &self,
        next: JobState,
        detail: Option<String>,
    ) -> Result<Job, IllegalTransition> {
        if !self.state().can_transition_to(next) {
            return Err(IllegalTransition {
                from: self.state(),
                to: next,
            });
        }
        let mut job = self.clone();
        job.status = JobStatus {
            state: next,
            detail,
        };
        Ok(job)
    }

    /// Walks the shortest legal path from the current state to `target`.
    /// Used by the front-end, which only learns the terminal outcome.
    pub fn advance_to(&self, target: JobState) -> Result<Job, IllegalTransition> {
        use JobState::*;
        let path: &[JobState] = match (self.state(), target) {
            (s, t) if s == t => &[],
            (Received, Failed) => &[Failed],
            (Received, t) if t.is_terminal() => &[Queued, Running],
            (Received, Running) => &[Queued],
            (Queued, t) if t.is_terminal() => &[Running],
            _ => &[],
        };
        let mut job = self.clone();
        for step in path.iter().copied() {
            job = job.transition(step)?;
        }
        if job.state() != target {
            job = job.transition(target)?;
        }
        Ok(job)
    }

    pub fn verify_pin(&self, candidate: &str) -> bool {
        self.pin_digest.matches(candidate)
    }
}
