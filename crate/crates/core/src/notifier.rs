//! Email-style notifications.
//!
//! Delivery goes through a [`Transport`]. The file transport writes one text
//! file per message and is what tests and local setups use; the SMTP
//! transport hands messages to a relay. Failed deliveries are retried three
//! times with exponential backoff and then appended to a dead-letter log.
//! Bodies carry the job id and download instructions, never the PIN.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{JobId, JobState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    Received,
    ResultsReady,
    Failed,
}

impl NotificationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NotificationKind::Received => "received",
            NotificationKind::ResultsReady => "results_ready",
            NotificationKind::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != NotificationKind::Received
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub recipient: String,
    pub kind: NotificationKind,
    pub job_id: JobId,
    pub subject: String,
    pub body: String,
}

impl Notification {
    pub fn received(recipient: &str, job_id: &JobId, detectors: &[String], status_url: &str) -> Self {
        let body = format!(
            "Your video was received and queued for analysis.\n\n\
             Job id: {job_id}\n\
             Detectors: {}\n\n\
             Check progress at {status_url}\n\
             You will get another message when the analysis finishes.\n",
            detectors.join(", ")
        );
        Notification {
            recipient: recipient.to_string(),
            kind: NotificationKind::Received,
            job_id: job_id.clone(),
            subject: format!("Job {job_id} received"),
            body,
        }
    }

    /// Message for a job that reached `state`. `failures` lists
    /// `(detector_id, note)` for runs that did not succeed.
    pub fn terminal(
        recipient: &str,
        job_id: &JobId,
        state: JobState,
        failures: &[(String, String)],
        download_url: &str,
    ) -> Self {
        let mut body = String::new();
        let kind = if state == JobState::Failed {
            body.push_str("The analysis of your video failed; no detector produced scores.\n\n");
            NotificationKind::Failed
        } else {
            body.push_str("The analysis of your video is finished.\n\n");
            NotificationKind::ResultsReady
        };
        body.push_str(&format!("Job id: {job_id}\nOutcome: {}\n", state.as_str()));
        if !failures.is_empty() {
            body.push_str("\nDetectors without results:\n");
            for (d, note) in failures {
                body.push_str(&format!("  {d}: {note}\n"));
            }
        }
        body.push_str(&format!(
            "\nTo download the result bundle, send the job id and the PIN you chose\n\
             at submission to {download_url}\n"
        ));
        Notification {
            recipient: recipient.to_string(),
            kind,
            job_id: job_id.clone(),
            subject: format!("Job {job_id}: {}", state.as_str()),
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("transport-error: {0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    /// Short name recorded in receipts.
    fn id(&self) -> &str;
    fn deliver(&self, n: &Notification) -> Result<(), TransportError>;
}

/// Writes `<dir>/<timestamp>_<job_id>_<kind>.txt`, first line `To: <recipient>`.
#[derive(Debug, Clone)]
pub struct FileTransport {
    dir: PathBuf,
}

impl FileTransport {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FileTransport { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

pub fn render_message(n: &Notification, date: DateTime<Utc>) -> String {
    format!(
        "To: {}\nSubject: {}\nDate: {}\nX-Job-Id: {}\nX-Kind: {}\n\n{}",
        n.recipient,
        n.subject,
        date.to_rfc2822(),
        n.job_id,
        n.kind.as_str(),
        n.body
    )
}

impl Transport for FileTransport {
    fn id(&self) -> &str {
        "file"
    }

    fn deliver(&self, n: &Notification) -> Result<(), TransportError> {
        let now = Utc::now();
        let name = format!(
            "{}_{}_{}.txt",
            now.format("%Y%m%dT%H%M%S%.6fZ"),
            n.job_id,
            n.kind.as_str()
        );
        let err = |e: std::io::Error| TransportError(format!("{}: {e}", self.dir.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        tmp.write_all(render_message(n, now).as_bytes()).map_err(err)?;
        tmp.persist_noclobber(self.dir.join(name))
            .map_err(|e| err(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmtpConfig {
    pub host: String,
    pub port: u16,
    pub username: Option<String>,
    pub password: Option<String>,
    pub from: String,
}

/// Plain SMTP to a relay, typically on localhost.
pub struct SmtpTransport {
    from: lettre::message::Mailbox,
    inner: lettre::SmtpTransport,
}

impl SmtpTransport {
    pub fn new(config: &SmtpConfig) -> Result<Self, TransportError> {
        let from = config
            .from
            .parse()
            .map_err(|e| TransportError(format!("from address: {e}")))?;
        let mut builder = lettre::SmtpTransport::builder_dangerous(&config.host)
            .port(config.port)
            .timeout(Some(Duration::from_secs(30)));
        if let (Some(u), Some(p)) = (&config.username, &config.password) {
            builder = builder.credentials(lettre::transport::smtp::authentication::Credentials::new(
                u.clone(),
                p.clone(),
            ));
        }
        Ok(SmtpTransport {
            from,
            inner: builder.build(),
        })
    }
}

impl Transport for SmtpTransport {
    fn id(&self) -> &str {
        "smtp"
    }

    fn deliver(&self, n: &Notification) -> Result<(), TransportError> {
        use lettre::Transport as _;
        let to = n
            .recipient
            .parse()
            .map_err(|e| TransportError(format!("recipient: {e}")))?;
        let msg = lettre::Message::builder()
            .from(self.from.clone())
            .to(to)
            .subject(n.subject.clone())
            .body(n.body.clone())
            .map_err(|e| TransportError(e.to_string()))?;
        self.inner
            .send(&msg)
            .map(|_| ())
            .map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Wait before the first retry; doubles after each further failure.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.base_backoff * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryRecord {
    /// 1-based attempt that failed.
    pub attempt: u32,
    pub error: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub transport: String,
    pub job_id: JobId,
    pub kind: NotificationKind,
    pub delivered_at: DateTime<Utc>,
    /// Failed attempts that preceded the delivery.
    pub retries: Vec<RetryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub transport: String,
    pub notification: Notification,
    pub failures: Vec<RetryRecord>,
    pub dead_lettered_at: DateTime<Utc>,
}

/// Hands `n` to the transport, retrying on failure. After the last retry
/// fails the message is appended to `dead_letter_log` (JSON lines).
pub fn notify(
    transport: &dyn Transport,
    n: &Notification,
    policy: &RetryPolicy,
    dead_letter_log: &Path,
) -> Result<DeliveryReceipt, Box<DeadLetter>> {
    let mut failures = Vec::new();
    for attempt in 1..=policy.max_retries + 1 {
        if attempt > 1 {
            thread::sleep(policy.backoff(attempt - 1));
        }
        match transport.deliver(n) {
            Ok(()) => {
                return Ok(DeliveryReceipt {
                    transport: transport.id().to_string(),
                    job_id: n.job_id.clone(),
                    kind: n.kind,
                    delivered_at: Utc::now(),
                    retries: failures,
                })
            }
            Err(e) => {
                tracing::warn!(job = %n.job_id, kind = n.kind.as_str(), attempt, error = %e, "notification attempt failed");
                failures.push(RetryRecord {
                    attempt,
                    error: e.0,
                    at: Utc::now(),
                });
            }
        }
    }
    let letter = DeadLetter {
        transport: transport.id().to_string(),
        notification: n.clone(),
        failures,
        dead_lettered_at: Utc::now(),
    };
    if let Err(e) = append_dead_letter(dead_letter_log, &letter) {
        tracing::error!(error = %e, "cannot write dead-letter log");
    }
    Err(Box::new(letter))
}

fn append_dead_letter(path: &Path, letter: &DeadLetter) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut line = serde_json::to_string(letter).expect("dead letter serializes");
    line.push('\n');
    OpenOptions::new().create(true).append(true).open(path)?.write_all(line.as_bytes())
}

#[derive(Debug, Default)]
pub struct NotifierStats {
    pub delivered: AtomicUsize,
    pub dead_lettered: AtomicUsize,
}

/// Single dispatcher thread fed by a queue. Clones share the queue.
#[derive(Clone)]
pub struct Notifier {
    tx: Sender<Notification>,
    stats: Arc<NotifierStats>,
    receipts: Arc<Mutex<Vec<DeliveryReceipt>>>,
    worker: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl Notifier {
    pub fn start(transport: Arc<dyn Transport>, policy: RetryPolicy, dead_letter_log: PathBuf) -> Self {
        let (tx, rx) = mpsc::channel::<Notification>();
        let stats = Arc::new(NotifierStats::default());
        let receipts = Arc::new(Mutex::new(Vec::new()));
        let worker = {
            let stats = stats.clone();
            let receipts = receipts.clone();
            thread::Builder::new()
                .name("notifier".into())
                .spawn(move || {
                    for n in rx {
                        match notify(transport.as_ref(), &n, &policy, &dead_letter_log) {
                            Ok(r) => {
                                stats.delivered.fetch_add(1, Ordering::SeqCst);
                                receipts.lock().unwrap_or_else(|p| p.into_inner()).push(r);
                            }
                            Err(_) => {
                                stats.dead_lettered.fetch_add(1, Ordering::SeqCst);
                            }
                        }
                    }
                })
                .expect("spawn notifier thread")
        };
        Notifier {
            tx,
            stats,
            receipts,
            worker: Arc::new(Mutex::new(Some(worker))),
        }
    }

    pub fn enqueue(&self, n: Notification) {
        if self.tx.send(n).is_err() {
            tracing::error!("notifier stopped; notification dropped");
        }
    }

    pub fn stats(&self) -> &NotifierStats {
        &self.stats
    }

    pub fn receipts(&self) -> Vec<DeliveryReceipt> {
        self.receipts.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Waits until `delivered + dead_lettered` reaches `count` or the
    /// timeout passes. Returns whether the count was reached.
    pub fn wait_for(&self, count: usize, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let done = self.stats.delivered.load(Ordering::SeqCst) + self.stats.dead_lettered.load(Ordering::SeqCst);
            if done >= count {
                return true;
            }
            if std::time::Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Drains the queue and stops the dispatcher. Only the last clone to
    /// call this joins the thread; earlier calls return at once.
    pub fn shutdown(self) {
        let worker = self.worker.clone();
        drop(self);
        if Arc::strong_count(&worker) == 1 {
            if let Some(h) = worker.lock().unwrap_or_else(|p| p.into_inner()).take() {
                let _ = h.join();
            }
        }
    }
}
