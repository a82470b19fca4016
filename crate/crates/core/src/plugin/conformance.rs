//! Conformance checks a detector plugin must pass before integration.
//!
//! Each check runs in its own session against a 20-frame probe sequence:
//!
//! 1. `handshake`: hello / hello_ack with protocol 1.
//! 2. `probe-range`: a full pass yields one in-range score per frame.
//! 3. `determinism`: two sequential passes produce byte-identical output,
//!    including where the output ends.
//! 4. `label-convention`: hard labels follow the declared threshold, and
//!    faceless frames score 1.0 / real.
//! 5. `pipelining`: with all requests sent at once in shuffled order, every
//!    response carries a requested, not-yet-answered index.
//! 6. `clean-shutdown`: `shutdown` makes the plugin exit 0 within the grace
//!    period.
//!
//! Completeness is judged only by `probe-range`: a plugin that dies mid-way
//! fails that check, and the other checks judge what it did say.
//!
//! Separately, the probe directory is snapshotted before and after; files
//! created or changed outside the plugin's scratch directory are reported as
//! sandbox violations and fail the report.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

use crate::frameseq::{self, FrameSeqDir, Pattern};
use crate::plugin::registry::DetectorDescriptor;
use crate::plugin::session::{parse_score, spawn, RawEvent, SandboxConfig, ShutdownOutcome};
use crate::plugin::wire::{HardLabel, HostMessage, PROTOCOL_VERSION};

pub const PROBE_FRAMES: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Handshake,
    ProbeRange,
    Determinism,
    LabelConvention,
    Pipelining,
    CleanShutdown,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Handshake,
        Check::ProbeRange,
        Check::Determinism,
        Check::LabelConvention,
        Check::Pipelining,
        Check::CleanShutdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Handshake => "handshake",
            Check::ProbeRange => "probe-range",
            Check::Determinism => "determinism",
            Check::LabelConvention => "label-convention",
            Check::Pipelining => "pipelining",
            Check::CleanShutdown => "clean-shutdown",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConformanceReport {
    pub detector_id: String,
    pub checks: Vec<CheckResult>,
    pub sandbox_violations: Vec<String>,
}

impl ConformanceReport {
    pub fn passed_count(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn failed_checks(&self) -> Vec<Check> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.check).collect()
    }

    pub fn passed(&self) -> bool {
        self.passed_count() == self.checks.len() && self.sandbox_violations.is_empty()
    }

    pub fn result(&self, check: Check) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check == check)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "conformance report for {}", self.detector_id)?;
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "  [{mark}] {:<17} {}", c.check.name(), c.detail)?;
        }
        for v in &self.sandbox_violations {
            writeln!(f, "  [FAIL] sandbox           wrote outside scratch: {v}")?;
        }
        write!(
            f,
            "{}/{} checks passed",
            self.passed_count(),
            self.checks.len()
        )?;
        if !self.sandbox_violations.is_empty() {
            write!(f, "; {} sandbox violation(s)", self.sandbox_violations.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConformanceOptions {
    /// Bound on each check's plugin interaction.
    pub check_timeout: Duration,
    /// Where the probe media and scratch directories are created.
    pub work_dir: Option<PathBuf>,
}

impl Default for ConformanceOptions {
    fn default() -> Self {
        ConformanceOptions {
            check_timeout: Duration::from_secs(30),
            work_dir: None,
        }
    }
}

/// How a raw pass over the probe frames ended.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Ending {
    Complete,
    Eof,
    TimedOut,
    WriteFailed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Transcript {
    lines: Vec<String>,
    ending: Ending,
}

/// Runs all checks against `descriptor` using `sandbox` for process
/// settings. Never fails: problems become failed checks.
pub fn verify_conformance(
    descriptor: &DetectorDescriptor,
    sandbox: &SandboxConfig,
    options: &ConformanceOptions,
) -> ConformanceReport {
    let mut report = ConformanceReport {
        detector_id: descriptor.detector_id.clone(),
        checks: Vec::new(),
        sandbox_violations: Vec::new(),
    };
    let probe = match ProbeArea::create(options.work_dir.as_deref()) {
        Ok(p) => p,
        Err(e) => {
            for check in Check::ALL {
                report.checks.push(CheckResult {
                    check,
                    passed: false,
                    detail: format!("could not prepare probe media: {e}"),
                });
            }
            return report;
        }
    };
    let mut sandbox = sandbox.clone();
    sandbox.scratch_root = probe.scratch_root();
    let frames = probe.seq.frame_paths();
    let timeout = options.check_timeout;
    let ctx = Ctx {
        descriptor,
        sandbox: &sandbox,
        frames: &frames,
        timeout,
    };

    report.checks.push(ctx.handshake());
    report.checks.push(ctx.probe_range());
    let (determinism, first_pass) = ctx.determinism();
    report.checks.push(determinism);
    report.checks.push(ctx.label_convention(first_pass.as_ref()));
    report.checks.push(ctx.pipelining());
    report.checks.push(ctx.clean_shutdown());

    report.sandbox_violations = probe.violations();
    report
}

struct Ctx<'a> {
    descriptor: &'a DetectorDescriptor,
    sandbox: &'a SandboxConfig,
    frames: &'a [PathBuf],
    timeout: Duration,
}

fn result(check: Check, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        check,
        passed,
        detail: detail.into(),
    }
}

impl Ctx<'_> {
    fn handshake(&self) -> CheckResult {
        match spawn(self.descriptor, self.sandbox) {
            Ok(s) if s.protocol_version() == PROTOCOL_VERSION => {
                result(Check::Handshake, true, format!("protocol {PROTOCOL_VERSION}"))
            }
            Ok(s) => result(
                Check::Handshake,
                false,
                format!("negotiated protocol {}", s.protocol_version()),
            ),
            Err(e) => result(Check::Handshake, false, e.to_string()),
        }
    }

    fn probe_range(&self) -> CheckResult {
        let mut session = match spawn(self.descriptor, self.sandbox) {
            Ok(s) => s,
            Err(e) => return result(Check::ProbeRange, false, e.to_string()),
        };
        match session.run_video(self.frames, Some(Instant::now() + self.timeout)) {
            Ok(scores) if scores.len() == self.frames.len() => result(
                Check::ProbeRange,
                true,
                format!("{} frames, all soft labels in [0, 1]", scores.len()),
            ),
            Ok(scores) => result(
                Check::ProbeRange,
                false,
                format!("{} scores for {} frames", scores.len(), self.frames.len()),
            ),
            Err(e) => result(Check::ProbeRange, false, e.to_string()),
        }
    }

    /// One request at a time, recording raw response lines.
    fn sequential_pass(&self) -> Result<Transcript, String> {
        let mut session = spawn(self.descriptor, self.sandbox).map_err(|e| e.to_string())?;
        let deadline = Instant::now() + self.timeout;
        let mut lines = Vec::new();
        for (i, path) in self.frames.iter().enumerate() {
            let msg = HostMessage::AnalyzeFrame {
                frame_path: path.to_string_lossy().into_owned(),
                frame_index: i as u32,
            };
            if session.send(&msg).is_err() {
                return Ok(Transcript {
                    lines,
                    ending: Ending::WriteFailed,
                });
            }
            match session.next_raw(Some(deadline)) {
                RawEvent::Line(l) => lines.push(l),
                RawEvent::Eof => {
                    return Ok(Transcript {
                        lines,
                        ending: Ending::Eof,
                    })
                }
                RawEvent::TimedOut => {
                    return Ok(Transcript {
                        lines,
                        ending: Ending::TimedOut,
                    })
                }
            }
        }
        Ok(Transcript {
            lines,
            ending: Ending::Complete,
        })
    }

    fn determinism(&self) -> (CheckResult, Option<Transcript>) {
        let first = match self.sequential_pass() {
            Ok(t) => t,
            Err(e) => return (result(Check::Determinism, false, e), None),
        };
        let second = match self.sequential_pass() {
            Ok(t) => t,
            Err(e) => return (result(Check::Determinism, false, e), Some(first)),
        };
        let res = if first.ending == Ending::TimedOut || second.ending == Ending::TimedOut {
            result(Check::Determinism, false, "a pass timed out")
        } else if first == second {
            result(
                Check::Determinism,
                true,
                format!("{} identical responses in both passes", first.lines.len()),
            )
        } else {
            let at = first
                .lines
                .iter()
                .zip(&second.lines)
                .position(|(a, b)| a != b)
                .unwrap_or(first.lines.len().min(second.lines.len()));
            result(
                Check::Determinism,
                false,
                format!("passes diverge at response {at}"),
            )
        };
        (res, Some(first))
    }

    fn label_convention(&self, pass: Option<&Transcript>) -> CheckResult {
        let Some(pass) = pass else {
            return result(Check::LabelConvention, false, "no responses to inspect");
        };
        let tau = self.descriptor.hard_label_threshold;
        let mut inspected = 0;
        for line in &pass.lines {
            let Ok(s) = parse_score(line) else { continue };
            inspected += 1;
            if !s.face_found && (s.soft_label != 1.0 || s.hard_label != HardLabel::Real) {
                return result(
                    Check::LabelConvention,
                    false,
                    format!("frame {}: no face but scored {} / {}", s.frame_index, s.soft_label, s.hard_label.as_str()),
                );
            }
            let expected = HardLabel::from_soft(s.soft_label, tau);
            if s.face_found && s.hard_label != expected {
                return result(
                    Check::LabelConvention,
                    false,
                    format!(
                        "frame {}: soft {} with threshold {tau} should be {}",
                        s.frame_index,
                        s.soft_label,
                        expected.as_str()
                    ),
                );
            }
        }
        if inspected == 0 {
            return result(Check::LabelConvention, false, "no parseable scores");
        }
        result(
            Check::LabelConvention,
            true,
            format!("{inspected} scores consistent with threshold {tau}"),
        )
    }

    fn pipelining(&self) -> CheckResult {
        let mut session = match spawn(self.descriptor, self.sandbox) {
            Ok(s) => s,
            Err(e) => return result(Check::Pipelining, false, e.to_string()),
        };
        let mut order: Vec<u32> = (0..self.frames.len() as u32).collect();
        order.shuffle(&mut rand::rngs::StdRng::seed_from_u64(0x5eed));
        let mut sent = HashSet::new();
        for &i in &order {
            let msg = HostMessage::AnalyzeFrame {
                frame_path: self.frames[i as usize].to_string_lossy().into_owned(),
                frame_index: i,
            };
            if session.send(&msg).is_err() {
                break;
            }
            sent.insert(i);
        }
        let deadline = Instant::now() + self.timeout;
        let mut answered: BTreeMap<u32, ()> = BTreeMap::new();
        while answered.len() < sent.len() {
            match session.next_raw(Some(deadline)) {
                RawEvent::Line(line) => match parse_score(&line) {
                    Ok(s) if !sent.contains(&s.frame_index) => {
                        return result(
                            Check::Pipelining,
                            false,
                            format!("response for unrequested frame {}", s.frame_index),
                        )
                    }
                    Ok(s) if answered.insert(s.frame_index, ()).is_some() => {
                        return result(
                            Check::Pipelining,
                            false,
                            format!("frame {} answered twice", s.frame_index),
                        )
                    }
                    Ok(_) => {}
                    Err(e) => return result(Check::Pipelining, false, e.to_string()),
                },
                RawEvent::Eof => {
                    return result(
                        Check::Pipelining,
                        true,
                        format!(
                            "{} of {} responses matched before the plugin exited",
                            answered.len(),
                            sent.len()
                        ),
                    )
                }
                RawEvent::TimedOut => {
                    return result(
                        Check::Pipelining,
                        false,
                        format!("only {} of {} responses before timeout", answered.len(), sent.len()),
                    )
                }
            }
        }
        result(
            Check::Pipelining,
            true,
            format!("{} shuffled requests matched by index", sent.len()),
        )
    }

    fn clean_shutdown(&self) -> CheckResult {
        let mut session = match spawn(self.descriptor, self.sandbox) {
            Ok(s) => s,
            Err(e) => return result(Check::CleanShutdown, false, e.to_string()),
        };
        if let Err(e) = session.analyze_frame(&self.frames[0], 0, Some(Instant::now() + self.timeout)) {
            return result(Check::CleanShutdown, false, format!("warm-up frame: {e}"));
        }
        match session.shutdown() {
            ShutdownOutcome::Clean => result(Check::CleanShutdown, true, "exited 0 after shutdown"),
            ShutdownOutcome::ExitedWithError(code) => result(
                Check::CleanShutdown,
                false,
                format!("exited with status {code:?} after shutdown"),
            ),
            ShutdownOutcome::Killed => result(
                Check::CleanShutdown,
                false,
                "still running after the grace period; killed",
            ),
        }
    }
}

/// Probe media plus scratch root, with a snapshot for detecting writes
/// outside the scratch directories.
struct ProbeArea {
    _dir: Option<tempfile::TempDir>,
    root: PathBuf,
    seq: FrameSeqDir,
    before: BTreeMap<PathBuf, (u64, Option<SystemTime>)>,
}

impl ProbeArea {
    fn create(parent: Option<&Path>) -> Result<Self, String> {
        let dir = match parent {
            Some(p) => {
                fs::create_dir_all(p).map_err(|e| e.to_string())?;
                tempfile::tempdir_in(p)
            }
            None => tempfile::tempdir(),
        }
        .map_err(|e| e.to_string())?;
        let root = dir.path().to_path_buf();
        let frames = frameseq::generate(PROBE_FRAMES, Pattern::Gradient, 32, 24);
        let seq = frameseq::write_dir(&root.join("media"), &frames, 25.0).map_err(|e| e.to_string())?;
        fs::create_dir_all(root.join("scratch")).map_err(|e| e.to_string())?;
        let mut area = ProbeArea {
            _dir: Some(dir),
            root,
            seq,
            before: BTreeMap::new(),
        };
        area.before = area.snapshot();
        Ok(area)
    }

    fn scratch_root(&self) -> PathBuf {
        self.root.join("scratch")
    }

    fn snapshot(&self) -> BTreeMap<PathBuf, (u64, Option<SystemTime>)> {
        let scratch = self.scratch_root();
        let mut out = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            for e in entries.flatten() {
                let p = e.path();
                if p == scratch {
                    continue;
                }
                let Ok(meta) = e.metadata() else { continue };
                if meta.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p, (meta.len(), meta.modified().ok()));
                }
            }
        }
        out
    }

    fn violations(&self) -> Vec<String> {
        let after = self.snapshot();
        after
            .iter()
            .filter(|(p, v)| self.before.get(*p) != Some(v))
            .map(|(p, _)| {
                p.strip_prefix(&self.root)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect()
    }
}
