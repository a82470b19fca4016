//! Sandboxed plugin processes.
//!
//! Each session is one child process started in a fresh scratch directory
//! with a scrubbed environment. The host talks to it over stdin/stdout using
//! the messages in [`crate::plugin::wire`]. A reader thread drains stdout
//! into a channel so the host can wait with deadlines and keep several
//! requests in flight.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::plugin::registry::DetectorDescriptor;
use crate::plugin::wire::{encode, FrameScore, HostMessage, PluginMessage, PROTOCOL_VERSION};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);
const MAX_LINE: usize = 64 * 1024;
const STDERR_TAIL: usize = 4 * 1024;
const PIPELINE_WINDOW: usize = 8;

#[derive(Debug, Clone, thiserror::Error)]
pub enum PluginError {
    #[error("spawn-failed: {0}")]
    SpawnFailed(String),
    #[error("handshake-timeout after {0:?}")]
    HandshakeTimeout(Duration),
    #[error("protocol-mismatch: {0}")]
    ProtocolMismatch(String),
    #[error("plugin-crashed: {0}")]
    PluginCrashed(String),
    #[error("malformed-response: {0}")]
    MalformedResponse(String),
    #[error("out-of-range-score: soft_label {0} outside [0, 1]")]
    OutOfRangeScore(f64),
    #[error("plugin-error: {0}")]
    PluginReported(String),
    #[error("timed-out")]
    TimedOut,
    #[error("io-error: {0}")]
    Io(String),
    #[error("frame {index}: {source}")]
    AtFrame {
        index: u32,
        #[source]
        source: Box<PluginError>,
    },
}

impl PluginError {
    pub fn code(&self) -> &'static str {
        match self {
            PluginError::SpawnFailed(_) => "spawn-failed",
            PluginError::HandshakeTimeout(_) => "handshake-timeout",
            PluginError::ProtocolMismatch(_) => "protocol-mismatch",
            PluginError::PluginCrashed(_) => "plugin-crashed",
            PluginError::MalformedResponse(_) => "malformed-response",
            PluginError::OutOfRangeScore(_) => "out-of-range-score",
            PluginError::PluginReported(_) => "plugin-error",
            PluginError::TimedOut => "timed-out",
            PluginError::Io(_) => "io-error",
            PluginError::AtFrame { source, .. } => source.code(),
        }
    }

    /// The innermost error, skipping frame annotations.
    pub fn root(&self) -> &PluginError {
        match self {
            PluginError::AtFrame { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn frame_index(&self) -> Option<u32> {
        match self {
            PluginError::AtFrame { index, .. } => Some(*index),
            _ => None,
        }
    }

    fn at(self, index: u32) -> Self {
        match self {
            e @ PluginError::AtFrame { .. } => e,
            e => PluginError::AtFrame {
                index,
                source: Box::new(e),
            },
        }
    }
}

/// Counts live plugin processes and remembers the peak.
#[derive(Debug, Default)]
pub struct ProcessGauge {
    live: AtomicUsize,
    peak: AtomicUsize,
    spawned: AtomicUsize,
}

impl ProcessGauge {
    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn spawned(&self) -> usize {
        self.spawned.load(Ordering::SeqCst)
    }

    fn enter(self: &Arc<Self>) -> GaugeGuard {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.spawned.fetch_add(1, Ordering::SeqCst);
        GaugeGuard(self.clone())
    }
}

#[derive(Debug)]
struct GaugeGuard(Arc<ProcessGauge>);

impl Drop for GaugeGuard {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    /// Parent of the per-session scratch directories.
    pub scratch_root: PathBuf,
    /// Host environment variables passed through to plugins.
    pub env_allowlist: Vec<String>,
    pub handshake_timeout: Duration,
    pub shutdown_grace: Duration,
    /// Substituted for `{self}` in launch specs; defaults to the current
    /// executable.
    pub self_exe: Option<PathBuf>,
    pub gauge: Arc<ProcessGauge>,
}

impl SandboxConfig {
    pub fn new(scratch_root: impl Into<PathBuf>) -> Self {
        SandboxConfig {
            scratch_root: scratch_root.into(),
            env_allowlist: ["PATH", "LANG", "LC_ALL", "RUST_BACKTRACE"]
                .map(String::from)
                .to_vec(),
            handshake_timeout: HANDSHAKE_TIMEOUT,
            shutdown_grace: SHUTDOWN_GRACE,
            self_exe: None,
            gauge: Arc::new(ProcessGauge::default()),
        }
    }

    pub fn with_self_exe(mut self, exe: impl Into<PathBuf>) -> Self {
        self.self_exe = Some(exe.into());
        self
    }

    fn self_exe(&self) -> Result<PathBuf, PluginError> {
        match &self.self_exe {
            Some(p) => Ok(p.clone()),
            None => std::env::current_exe().map_err(|e| PluginError::SpawnFailed(e.to_string())),
        }
    }

    fn expand(&self, template: &str, descriptor: &DetectorDescriptor) -> Result<String, PluginError> {
        let mut out = template.to_string();
        if out.contains("{self}") {
            out = out.replace("{self}", &self.self_exe()?.to_string_lossy());
        }
        if out.contains("{plugin_dir}") {
            let dir = descriptor.base_dir.as_deref().ok_or_else(|| {
                PluginError::SpawnFailed("{plugin_dir} used outside a plugin manifest".into())
            })?;
            out = out.replace("{plugin_dir}", &dir.to_string_lossy());
        }
        Ok(out)
    }
}

#[derive(Debug)]
enum ReadEvent {
    Line(String),
    Eof,
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShutdownOutcome {
    /// Exited with status 0 within the grace period.
    Clean,
    /// Exited within the grace period with a failure status.
    ExitedWithError(Option<i32>),
    /// Still running after the grace period and was killed.
    Killed,
}

/// A live plugin process that has completed the handshake.
pub struct PluginSession {
    detector_id: String,
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    lines: Receiver<ReadEvent>,
    stderr_tail: Arc<Mutex<VecDeque<u8>>>,
    scratch: tempfile::TempDir,
    protocol_version: u32,
    grace: Duration,
    exited: Option<ExitStatus>,
    _gauge: GaugeGuard,
}

impl std::fmt::Debug for PluginSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginSession")
            .field("detector_id", &self.detector_id)
            .field("pid", &self.child.id())
            .field("scratch", &self.scratch.path())
            .finish()
    }
}

/// Starts the descriptor's launch command in a sandbox and performs the
/// handshake.
pub fn spawn(descriptor: &DetectorDescriptor, sandbox: &SandboxConfig) -> Result<PluginSession, PluginError> {
    std::fs::create_dir_all(&sandbox.scratch_root)
        .map_err(|e| PluginError::SpawnFailed(format!("scratch root: {e}")))?;
    let scratch = tempfile::Builder::new()
        .prefix(&format!("{}-", descriptor.detector_id))
        .tempdir_in(&sandbox.scratch_root)
        .map_err(|e| PluginError::SpawnFailed(format!("scratch dir: {e}")))?;

    let program = sandbox.expand(&descriptor.launch.program, descriptor)?;
    let args = descriptor
        .launch
        .args
        .iter()
        .map(|a| sandbox.expand(a, descriptor))
        .collect::<Result<Vec<_>, _>>()?;

    let mut cmd = Command::new(&program);
    cmd.args(&args)
        .current_dir(scratch.path())
        .env_clear()
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for key in &sandbox.env_allowlist {
        if let Some(v) = std::env::var_os(key) {
            cmd.env(key, v);
        }
    }
    cmd.env("TMPDIR", scratch.path())
        .env("HOME", scratch.path())
        .env("FMETER_SCRATCH", scratch.path());

    let mut child = cmd
        .spawn()
        .map_err(|e| PluginError::SpawnFailed(format!("{program}: {e}")))?;
    let gauge = sandbox.gauge.enter();

    let stdout = child.stdout.take().expect("stdout piped");
    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name(format!("plugin-out-{}", descriptor.detector_id))
        .spawn(move || read_lines(stdout, tx))
        .map_err(|e| PluginError::SpawnFailed(e.to_string()))?;

    let stderr_tail = Arc::new(Mutex::new(VecDeque::new()));
    let stderr = child.stderr.take().expect("stderr piped");
    let tail = stderr_tail.clone();
    let _ = thread::Builder::new()
        .name(format!("plugin-err-{}", descriptor.detector_id))
        .spawn(move || drain_stderr(stderr, tail));

    let mut session = PluginSession {
        detector_id: descriptor.detector_id.clone(),
        stdin: child.stdin.take().map(BufWriter::new),
        child,
        lines: rx,
        stderr_tail,
        scratch,
        protocol_version: 0,
        grace: sandbox.shutdown_grace,
        exited: None,
        _gauge: gauge,
    };
    session.handshake(sandbox.handshake_timeout)?;
    Ok(session)
}

fn read_lines(stdout: impl Read, tx: mpsc::Sender<ReadEvent>) {
    let mut reader = BufReader::new(stdout);
    loop {
        let mut buf = Vec::new();
        match (&mut reader).take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf) {
            Ok(0) => {
                let _ = tx.send(ReadEvent::Eof);
                return;
            }
            Ok(_) if buf.len() > MAX_LINE => {
                let _ = tx.send(ReadEvent::Failed("response line too long".into()));
                return;
            }
            Ok(_) => {
                let line = String::from_utf8_lossy(&buf).trim_end_matches(['\n', '\r']).to_string();
                if tx.send(ReadEvent::Line(line)).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = tx.send(ReadEvent::Failed(e.to_string()));
                return;
            }
        }
    }
}

fn drain_stderr(stderr: impl Read, tail: Arc<Mutex<VecDeque<u8>>>) {
    let mut stderr = stderr;
    let mut buf = [0u8; 1024];
    while let Ok(n) = stderr.read(&mut buf) {
        if n == 0 {
            break;
        }
        let mut t = tail.lock().unwrap_or_else(|p| p.into_inner());
        t.extend(&buf[..n]);
        while t.len() > STDERR_TAIL {
            t.pop_front();
        }
    }
}

/// One raw line from the plugin, or how the stream ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawEvent {
    Line(String),
    Eof,
    TimedOut,
}

impl PluginSession {
    pub fn detector_id(&self) -> &str {
        &self.detector_id
    }

    pub fn protocol_version(&self) -> u32 {
        self.protocol_version
    }

    pub fn scratch_dir(&self) -> &Path {
        self.scratch.path()
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    fn handshake(&mut self, timeout: Duration) -> Result<(), PluginError> {
        let hello = HostMessage::Hello {
            protocol_version: PROTOCOL_VERSION,
            detector_id: self.detector_id.clone(),
        };
        if self.send(&hello).is_err() {
            let note = self.crash_note();
            self.kill();
            return Err(PluginError::SpawnFailed(format!("exited before handshake: {note}")));
        }
        let deadline = Instant::now() + timeout;
        match self.next_raw(Some(deadline)) {
            RawEvent::Line(line) => match serde_json::from_str::<PluginMessage>(&line) {
                Ok(PluginMessage::HelloAck { protocol_version }) => {
                    let v = protocol_version.unwrap_or(PROTOCOL_VERSION);
                    if v != PROTOCOL_VERSION {
                        self.kill();
                        return Err(PluginError::ProtocolMismatch(format!(
                            "plugin speaks protocol {v}, host speaks {PROTOCOL_VERSION}"
                        )));
                    }
                    self.protocol_version = v;
                    Ok(())
                }
                _ => {
                    self.kill();
                    Err(PluginError::ProtocolMismatch(format!(
                        "expected hello_ack, got {}",
                        truncate(&line, 120)
                    )))
                }
            },
            RawEvent::Eof => {
                let note = self.crash_note();
                self.kill();
                Err(PluginError::SpawnFailed(format!("exited before handshake: {note}")))
            }
            RawEvent::TimedOut => {
                self.kill();
                Err(PluginError::HandshakeTimeout(timeout))
            }
        }
    }

    /// Writes one message. Fails when the plugin has closed its stdin.
    pub fn send(&mut self, msg: &HostMessage) -> Result<(), PluginError> {
        self.send_raw(&encode(msg))
    }

    /// Writes an arbitrary line, for protocol testing.
    pub fn send_raw(&mut self, line: &str) -> Result<(), PluginError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| PluginError::Io("stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| PluginError::Io(e.to_string()))
    }

    /// Next raw stdout line, waiting until `deadline` (forever if `None`).
    pub fn next_raw(&mut self, deadline: Option<Instant>) -> RawEvent {
        let event = match deadline {
            None => self.lines.recv().ok(),
            Some(d) => match self.lines.recv_timeout(d.saturating_duration_since(Instant::now())) {
                Ok(e) => Some(e),
                Err(RecvTimeoutError::Timeout) => return RawEvent::TimedOut,
                Err(RecvTimeoutError::Disconnected) => None,
            },
        };
        match event {
            Some(ReadEvent::Line(l)) => RawEvent::Line(l),
            Some(ReadEvent::Eof) | None => RawEvent::Eof,
            Some(ReadEvent::Failed(e)) => RawEvent::Line(format!("<unreadable: {e}>")),
        }
    }

    fn next_score(&mut self, deadline: Option<Instant>) -> Result<FrameScore, PluginError> {
        match self.next_raw(deadline) {
            RawEvent::Line(line) => parse_score(&line),
            RawEvent::Eof => Err(PluginError::PluginCrashed(self.crash_note())),
            RawEvent::TimedOut => {
                self.kill();
                Err(PluginError::TimedOut)
            }
        }
    }

    /// Sends one frame and waits for its score.
    pub fn analyze_frame(
        &mut self,
        frame_path: &Path,
        frame_index: u32,
        deadline: Option<Instant>,
    ) -> Result<FrameScore, PluginError> {
        self.request(frame_path, frame_index)
            .map_err(|e| e.at(frame_index))?;
        let score = self.next_score(deadline).map_err(|e| e.at(frame_index))?;
        if score.frame_index != frame_index {
            return Err(PluginError::MalformedResponse(format!(
                "response for frame {} while waiting for {frame_index}",
                score.frame_index
            ))
            .at(frame_index));
        }
        Ok(score)
    }

    fn request(&mut self, frame_path: &Path, frame_index: u32) -> Result<(), PluginError> {
        let msg = HostMessage::AnalyzeFrame {
            frame_path: frame_path.to_string_lossy().into_owned(),
            frame_index,
        };
        self.send(&msg)
            .map_err(|_| PluginError::PluginCrashed(self.crash_note()))
    }

    /// Scores every frame, keeping up to eight requests in flight. Responses
    /// are matched by `frame_index` and may arrive in any order. The result
    /// is ordered by index; on failure the error names the lowest
    /// unanswered frame.
    pub fn run_video(
        &mut self,
        frames: &[PathBuf],
        deadline: Option<Instant>,
    ) -> Result<Vec<FrameScore>, PluginError> {
        if frames.is_empty() {
            return Err(PluginError::MalformedResponse("no frames to analyze".into()));
        }
        let total = frames.len() as u32;
        let mut received: BTreeMap<u32, FrameScore> = BTreeMap::new();
        let mut next = 0u32;
        let lowest_missing = |r: &BTreeMap<u32, FrameScore>| (0..total).find(|i| !r.contains_key(i)).unwrap_or(0);
        while (received.len() as u32) < total {
            while next < total && (next as usize) < received.len() + PIPELINE_WINDOW {
                if let Err(e) = self.request(&frames[next as usize], next) {
                    return Err(e.at(lowest_missing(&received)));
                }
                next += 1;
            }
            let score = self
                .next_score(deadline)
                .map_err(|e| e.at(lowest_missing(&received)))?;
            if score.frame_index >= next || received.contains_key(&score.frame_index) {
                return Err(PluginError::MalformedResponse(format!(
                    "unexpected response for frame {}",
                    score.frame_index
                ))
                .at(lowest_missing(&received)));
            }
            received.insert(score.frame_index, score);
        }
        Ok(received.into_values().collect())
    }

    /// Sends `shutdown`, closes stdin and waits for the grace period.
    pub fn shutdown(mut self) -> ShutdownOutcome {
        let _ = self.send(&HostMessage::Shutdown);
        self.stdin.take();
        let deadline = Instant::now() + self.grace;
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    self.exited = Some(status);
                    return if status.success() {
                        ShutdownOutcome::Clean
                    } else {
                        ShutdownOutcome::ExitedWithError(status.code())
                    };
                }
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => {
                    self.kill();
                    return ShutdownOutcome::Killed;
                }
            }
        }
    }

    /// Last bytes the plugin wrote to stderr.
    pub fn stderr_tail(&self) -> String {
        let t = self.stderr_tail.lock().unwrap_or_else(|p| p.into_inner());
        String::from_utf8_lossy(&t.iter().copied().collect::<Vec<_>>()).trim().to_string()
    }

    fn crash_note(&mut self) -> String {
        // give the process a moment to be reaped so the status is available
        let deadline = Instant::now() + Duration::from_millis(200);
        let mut status = None;
        while Instant::now() < deadline {
            if let Ok(Some(s)) = self.child.try_wait() {
                status = Some(s);
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        // let the stderr thread catch up
        thread::sleep(Duration::from_millis(20));
        let tail = self.stderr_tail();
        let mut note = match status {
            Some(s) => format!("plugin exited ({s})"),
            None => "plugin closed its output".to_string(),
        };
        if !tail.is_empty() {
            note.push_str(": ");
            note.push_str(&truncate(&tail, 400));
        }
        note
    }

    pub fn kill(&mut self) {
        if self.exited.is_none() {
            let _ = self.child.kill();
            self.exited = self.child.wait().ok();
        }
    }
}

impl Drop for PluginSession {
    fn drop(&mut self) {
        self.stdin.take();
        self.kill();
    }
}

pub fn parse_score(line: &str) -> Result<FrameScore, PluginError> {
    match serde_json::from_str::<PluginMessage>(line) {
        Ok(PluginMessage::FrameScore(s)) if s.in_range() => Ok(s),
        Ok(PluginMessage::FrameScore(s)) => Err(PluginError::OutOfRangeScore(s.soft_label)),
        Ok(PluginMessage::Error { message, .. }) => Err(PluginError::PluginReported(message)),
        Ok(other) => Err(PluginError::MalformedResponse(format!("unexpected {other:?}"))),
        Err(e) => Err(PluginError::MalformedResponse(format!(
            "{e}: {}",
            truncate(line, 120)
        ))),
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}
