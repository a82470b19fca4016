//! Per-detector score series and the deliverables built from them.
//!
//! The summary statistic for a series is the area under its *sorted* score
//! curve: soft labels are sorted ascending, placed at evenly spaced x in
//! [0, 1], and integrated with the trapezoid rule. A single frame yields its
//! own score. The result always lies between the smallest and largest score.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frameseq::FrameSeqMeta;
use crate::model::{Job, JobId, JobState, MediaKind, VideoOrigin};
use crate::plugin::wire::{FrameScore, HardLabel};
use crate::scheduler::{classify_outcome, DetectorRun, RunOutcome};

pub const CSV_HEADER: &str = "frame_index,soft_label,hard_label,face_found";
pub const SUMMARY_ENTRY: &str = "summary.json";
pub const OVERLAY_ENTRY: &str = "overlay.json";
pub const README_ENTRY: &str = "README.txt";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("empty-series")]
    EmptySeries,
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("length-mismatch: {detector_id} has {got} frames, expected {expected}")]
    LengthMismatch {
        detector_id: String,
        expected: usize,
        got: usize,
    },
    #[error("coverage-mismatch: {0}")]
    CoverageMismatch(String),
    #[error("parse-error: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("bundle: {0}")]
    Bundle(String),
}

impl AnalysisError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalysisError::EmptySeries => "empty-series",
            AnalysisError::InvalidSeries(_) => "invalid-series",
            AnalysisError::LengthMismatch { .. } => "length-mismatch",
            AnalysisError::CoverageMismatch(_) => "coverage-mismatch",
            AnalysisError::Parse { .. } => "parse-error",
            AnalysisError::Bundle(_) => "bundle-error",
        }
    }
}

/// One detector's scores over a whole video, frame indices `0..n` ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub detector_id: String,
    pub frame_scores: Vec<FrameScore>,
}

impl ScoreSeries {
    pub fn new(detector_id: impl Into<String>, frame_scores: Vec<FrameScore>) -> Result<Self, AnalysisError> {
        if frame_scores.is_empty() {
            return Err(AnalysisError::EmptySeries);
        }
        for (i, s) in frame_scores.iter().enumerate() {
            if s.frame_index as usize != i {
                return Err(AnalysisError::InvalidSeries(format!(
                    "position {i} holds frame {}",
                    s.frame_index
                )));
            }
            if !s.in_range() {
                return Err(AnalysisError::InvalidSeries(format!(
                    "frame {i} soft_label {} outside [0, 1]",
                    s.soft_label
                )));
            }
        }
        Ok(ScoreSeries {
            detector_id: detector_id.into(),
            frame_scores,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_scores.len()
    }

    pub fn soft_labels(&self) -> Vec<f64> {
        self.frame_scores.iter().map(|s| s.soft_label).collect()
    }
}

/// Area under the ascending-sorted soft-label curve over x ∈ [0, 1].
pub fn aggregate_score(series: &ScoreSeries) -> Result<f64, AnalysisError> {
    sorted_curve_area(&series.soft_labels())
}

/// [`aggregate_score`] over raw values.
pub fn sorted_curve_area(scores: &[f64]) -> Result<f64, AnalysisError> {
    let mut s = scores.to_vec();
    if s.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let (lo, hi) = (s[0], s[n - 1]);
    if n == 1 {
        return Ok(lo);
    }
    // Integrate offsets above the minimum so a flat curve returns its
    // value exactly.
    let twice_area: f64 = s.windows(2).map(|w| (w[0] - lo) + (w[1] - lo)).sum();
    let area = lo + twice_area / (2.0 * (n - 1) as f64);
    Ok(area.clamp(lo, hi))
}

/// CSV with one row per frame, soft labels at six decimals.
pub fn curve_export(series: &ScoreSeries) -> String {
    let mut out = String::with_capacity(32 * (series.frame_count() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in &series.frame_scores {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            s.frame_index,
            s.soft_label,
            s.hard_label.as_str(),
            s.face_found
        ));
    }
    out
}

/// Inverse of [`curve_export`].
pub fn parse_curve(detector_id: &str, csv: &str) -> Result<ScoreSeries, AnalysisError> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => {
            return Err(AnalysisError::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut scores = Vec::new();
    for (i, line) in lines.enumerate() {
        let err = |reason: &str| AnalysisError::Parse {
            line: i + 2,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split(',').collect();
        let [idx, soft, hard, face] = cols[..] else {
            return Err(err("expected 4 columns"));
        };
        scores.push(FrameScore {
            frame_index: idx.parse().map_err(|_| err("frame_index"))?,
            soft_label: soft.parse().map_err(|_| err("soft_label"))?,
            hard_label: match hard {
                "real" => HardLabel::Real,
                "fake" => HardLabel::Fake,
                _ => return Err(err("hard_label")),
            },
            face_found: face.parse().map_err(|_| err("face_found"))?,
        });
    }
    ScoreSeries::new(detector_id, scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayCurve {
    pub detector_id: String,
    pub soft_labels: Vec<f64>,
}

/// Multi-detector chart data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub frame_count: usize,
    pub detectors: Vec<OverlayCurve>,
}

pub fn overlay(series: &[&ScoreSeries]) -> Result<Overlay, AnalysisError> {
    let first = series.first().ok_or(AnalysisError::EmptySeries)?;
    let frame_count = first.frame_count();
    let mut detectors = Vec::with_capacity(series.len());
    for s in series {
        if s.frame_count() != frame_count {
            return Err(AnalysisError::LengthMismatch {
                detector_id: s.detector_id.clone(),
                expected: frame_count,
                got: s.frame_count(),
            });
        }
        detectors.push(OverlayCurve {
            detector_id: s.detector_id.clone(),
            soft_labels: s.soft_labels(),
        });
    }
    Ok(Overlay {
        frame_count,
        detectors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub origin: VideoOrigin,
    pub byte_size: u64,
    pub media_kind: MediaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub detector_id: String,
    /// `succeeded`, `failed` or `timed_out`.
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_note: Option<String>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub job_id: JobId,
    pub state: JobState,
    pub video: VideoSummary,
    pub detectors: Vec<DetectorSummary>,
    /// SHA-256 of every other bundle entry, keyed by entry name.
    pub files: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
}

impl Summary {
    pub fn failures(&self) -> impl Iterator<Item = &DetectorSummary> {
        self.detectors.iter().filter(|d| d.outcome != "succeeded")
    }
}

/// A finished, zipped deliverable.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub job_id: JobId,
    pub bytes: Vec<u8>,
    /// Hex SHA-256 of `bytes`.
    pub digest: String,
    pub summary: Summary,
}

pub fn scores_entry(detector_id: &str) -> String {
    format!("scores/{detector_id}.csv")
}

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Builds the zip for a job. Entry order is `summary.json`, `overlay.json`,
/// `scores/<id>.csv` per succeeded run in job order, `README.txt`; all
/// timestamps are the zip epoch (1980-01-01), so equal inputs give equal
/// bytes.
pub fn build_bundle(
    job: &Job,
    runs: &[DetectorRun],
    media: Option<&FrameSeqMeta>,
    created_at: DateTime<Utc>,
) -> Result<ResultBundle, AnalysisError> {
    if runs.len() != job.detectors.len()
        || runs.iter().zip(&job.detectors).any(|(r, d)| &r.detector_id != d)
    {
        let got: Vec<&str> = runs.iter().map(|r| r.detector_id.as_str()).collect();
        return Err(AnalysisError::CoverageMismatch(format!(
            "runs {got:?} do not match job detectors {:?}",
            job.detectors
        )));
    }
    if runs.is_empty() {
        return Err(AnalysisError::CoverageMismatch("no runs".into()));
    }
    let succeeded: Vec<&ScoreSeries> = runs.iter().filter_map(DetectorRun::scores).collect();

    let overlay_doc = if succeeded.is_empty() {
        Overlay {
            frame_count: media.map_or(0, |m| m.frame_count as usize),
            detectors: Vec::new(),
        }
    } else {
        overlay(&succeeded)?
    };
    let overlay_json = to_json(&overlay_doc);

    let mut score_files = Vec::new();
    for s in &succeeded {
        score_files.push((scores_entry(&s.detector_id), curve_export(s)));
    }

    let mut detectors = Vec::with_capacity(runs.len());
    for run in runs {
        let (aggregate_score, frame_count) = match &run.outcome {
            RunOutcome::Succeeded(s) => (Some(aggregate_score(s)?), Some(s.frame_count())),
            _ => (None, None),
        };
        detectors.push(DetectorSummary {
            detector_id: run.detector_id.clone(),
            outcome: run.outcome.name().to_string(),
            aggregate_score,
            frame_count,
            error_note: run.error_note().map(str::to_string),
            wall_time: (run.wall_time * 1000.0).round() / 1000.0,
        });
    }

    let readme = readme_text(job, runs);
    let mut files = BTreeMap::new();
    files.insert(OVERLAY_ENTRY.to_string(), sha256_hex(overlay_json.as_bytes()));
    for (name, body) in &score_files {
        files.insert(name.clone(), sha256_hex(body.as_bytes()));
    }
    files.insert(README_ENTRY.to_string(), sha256_hex(readme.as_bytes()));

    let summary = Summary {
        job_id: job.job_id.clone(),
        state: classify_outcome(runs),
        video: VideoSummary {
            origin: job.video.origin,
            byte_size: job.video.byte_size,
            media_kind: job.video.media_kind,
            width: media.map(|m| m.width),
            height: media.map(|m| m.height),
            frame_count: media.map(|m| m.frame_count),
            fps: media.map(|m| m.fps),
        },
        detectors,
        files,
        created_at,
    };

    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    entries.push((SUMMARY_ENTRY.into(), to_json(&summary).into_bytes()));
    entries.push((OVERLAY_ENTRY.into(), overlay_json.into_bytes()));
    for (name, body) in score_files {
        entries.push((name, body.into_bytes()));
    }
    entries.push((README_ENTRY.into(), readme.into_bytes()));

    let bytes = write_zip(&entries).map_err(|e| AnalysisError::Bundle(e.to_string()))?;
    Ok(ResultBundle {
        job_id: job.job_id.clone(),
        digest: sha256_hex(&bytes),
        bytes,
        summary,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("bundle documents serialize");
    s.push('\n');
    s
}

fn write_zip(entries: &[(String, Vec<u8>)]) -> zip::result::ZipResult<Vec<u8>> {
    let mut zw = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, body) in entries {
        zw.start_file(name.as_str(), opts)?;
        zw.write_all(body)?;
    }
    Ok(zw.finish()?.into_inner())
}

fn readme_text(job: &Job, runs: &[DetectorRun]) -> String {
    let mut s = String::new();
    s.push_str("Detection results\n=================\n\n");
    s.push_str(&format!("Job: {}\n\n", job.job_id));
    s.push_str("summary.json   job outcome and one entry per selected detector,\n");
    s.push_str("               with the aggregate score of each succeeded run\n");
    s.push_str("overlay.json   per-frame soft labels of every succeeded detector,\n");
    s.push_str("               for drawing all curves on one chart\n");
    s.push_str("scores/*.csv   frame_index,soft_label,hard_label,face_found per frame\n\n");
    s.push_str("Soft labels lie in [0, 1]; lower means more likely manipulated.\n");
    s.push_str("The aggregate score is the area under the curve of a detector's\n");
    s.push_str("per-frame soft labels sorted in ascending order.\n\n");
    s.push_str("Detectors:\n");
    for r in runs {
        s.push_str(&format!("  {:<24} {}\n", r.detector_id, r.outcome.name()));
    }
    s
}

/// Entries of a bundle zip in archive order.
pub fn read_bundle(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, AnalysisError> {
    let bad = |e: zip::result::ZipError| AnalysisError::Bundle(e.to_string());
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).map_err(bad)?;
    let mut out = Vec::with_capacity(archive.len());
    for i in 0..archive.len() {
        let mut f = archive.by_index(i).map_err(bad)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)
            .map_err(|e| AnalysisError::Bundle(e.to_string()))?;
        out.push((f.name().to_string(), buf));
    }
    Ok(out)
}

/// Checks every entry against the digests in `summary.json` and returns
/// the summary.
pub fn verify_bundle(bytes: &[u8]) -> Result<Summary, AnalysisError> {
    let entries = read_bundle(bytes)?;
    let (_, raw) = entries
        .iter()
        .find(|(n, _)| n == SUMMARY_ENTRY)
        .ok_or_else(|| AnalysisError::Bundle("missing summary.json".into()))?;
    let summary: Summary =
        serde_json::from_slice(raw).map_err(|e| AnalysisError::Bundle(format!("summary.json: {e}")))?;
    for (name, expected) in &summary.files {
        let (_, body) = entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| AnalysisError::Bundle(format!("missing {name}")))?;
        if &sha256_hex(body) != expected {
            return Err(AnalysisError::Bundle(format!("digest mismatch for {name}")));
        }
    }
    if entries.len() != summary.files.len() + 1 {
        return Err(AnalysisError::Bundle("unlisted entries present".into()));
    }
    Ok(summary)
}
