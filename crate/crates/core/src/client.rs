//! Blocking client for the gateway HTTP API.

use std::path::Path;
use std::time::Duration;

use reqwest::blocking::multipart::Form;
use reqwest::StatusCode;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::analysis::{verify_bundle, Summary};
use crate::gateway::http::BUNDLE_DIGEST_HEADER;
use crate::gateway::DetectorInfo;
use crate::model::{JobError, JobStatus, MAX_VIDEO_BYTES};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The gateway answered with an error code.
    #[error("{code}")]
    Api {
        status: u16,
        code: String,
        message: String,
    },
    #[error("transport-error: {0}")]
    Transport(String),
    #[error("integrity-error: {0}")]
    Integrity(String),
    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
    /// Rejected before anything was sent.
    #[error("{0}")]
    Local(JobError),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Api { code, .. } => code,
            ClientError::Transport(_) => "transport-error",
            ClientError::Integrity(_) => "integrity-error",
            ClientError::Io(_) => "io-error",
            ClientError::Local(e) => e.code(),
        }
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Transport(e.to_string())
    }
}

pub enum VideoSource<'a> {
    File(&'a Path),
    Url(&'a str),
}

/// A downloaded bundle whose digests have been checked.
#[derive(Debug)]
pub struct FetchedBundle {
    pub bytes: Vec<u8>,
    pub sha256: String,
    pub summary: Summary,
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    message: String,
}

#[derive(Deserialize)]
struct Created {
    job_id: String,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Client {
            base: base_url.trim_end_matches('/').to_string(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(600))
                .build()
                .expect("http client"),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ClientError> {
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => ClientError::Api {
                status: status.as_u16(),
                code: b.error,
                message: b.message,
            },
            Err(_) => ClientError::Api {
                status: status.as_u16(),
                code: match status {
                    StatusCode::NOT_FOUND => "not-found".into(),
                    StatusCode::PAYLOAD_TOO_LARGE => "oversize-video".into(),
                    _ => format!("http-{}", status.as_u16()),
                },
                message: text,
            },
        })
    }

    /// Submits a job and returns its id. Files over the size limit are
    /// refused locally; everything else is validated by the gateway.
    pub fn submit(&self, video: VideoSource<'_>, detectors: &[String], email: &str, pin: &str) -> Result<String, ClientError> {
        if let VideoSource::File(p) = video {
            let size = std::fs::metadata(p)?.len();
            if size > MAX_VIDEO_BYTES {
                return Err(ClientError::Local(JobError::OversizeVideo {
                    size,
                    limit: MAX_VIDEO_BYTES,
                }));
            }
        }
        let mut form = Form::new()
            .text("detectors", detectors.join(","))
            .text("email", email.to_string())
            .text("pin", pin.to_string());
        form = match video {
            VideoSource::File(p) => form.file("video", p)?,
            VideoSource::Url(u) => form.text("video_url", u.to_string()),
        };
        let resp = self.http.post(self.url("/api/v1/jobs")).multipart(form).send()?;
        let created: Created = Self::check(resp)?.json()?;
        Ok(created.job_id)
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus, ClientError> {
        let resp = self.http.get(self.url(&format!("/api/v1/jobs/{job_id}"))).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    pub fn detectors(&self) -> Result<Vec<DetectorInfo>, ClientError> {
        let resp = self.http.get(self.url("/api/v1/detectors")).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    /// Downloads the raw bundle response without verifying it.
    pub fn download_raw(&self, job_id: &str, pin: &str) -> Result<(Vec<u8>, Option<String>), ClientError> {
        let resp = self
            .http
            .post(self.url(&format!("/api/v1/jobs/{job_id}/download")))
            .json(&serde_json::json!({ "pin": pin }))
            .send()?;
        let resp = Self::check(resp)?;
        let digest = resp
            .headers()
            .get(BUNDLE_DIGEST_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        Ok((resp.bytes()?.to_vec(), digest))
    }

    /// Downloads the bundle and checks it against the digest header and the
    /// per-file digests in its `summary.json`.
    pub fn fetch(&self, job_id: &str, pin: &str) -> Result<FetchedBundle, ClientError> {
        let (bytes, header) = self.download_raw(job_id, pin)?;
        let sha256 = hex::encode(Sha256::digest(&bytes));
        if let Some(h) = header {
            if !h.eq_ignore_ascii_case(&sha256) {
                return Err(ClientError::Integrity(format!("bundle digest {sha256} does not match header {h}")));
            }
        }
        let summary = verify_bundle(&bytes).map_err(|e| ClientError::Integrity(e.to_string()))?;
        Ok(FetchedBundle { bytes, sha256, summary })
    }

    /// Polls status until a terminal state or `timeout`.
    pub fn wait_terminal(&self, job_id: &str, timeout: Duration, every: Duration) -> Result<JobStatus, ClientError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let s = self.status(job_id)?;
            if s.state.is_terminal() || std::time::Instant::now() >= deadline {
                return Ok(s);
            }
            std::thread::sleep(every);
        }
    }
}
