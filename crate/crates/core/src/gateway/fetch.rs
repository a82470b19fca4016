//! Downloading a video named by URL.

use std::path::Path;
use std::time::Duration;

use futures::StreamExt;
use tokio::io::AsyncWriteExt;

use super::{ApiError, StagedVideo};
use crate::model::VideoOrigin;

pub const MAX_REDIRECTS: usize = 5;

pub fn client() -> reqwest::Client {
    reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::limited(MAX_REDIRECTS))
        .connect_timeout(Duration::from_secs(10))
        .timeout(Duration::from_secs(300))
        .build()
        .expect("http client")
}

/// Streams `url` into a new file under `dest_dir`. Reads at most
/// `limit + 1` bytes; a larger resource is rejected as oversize.
pub async fn fetch_remote_video(
    client: &reqwest::Client,
    url: &str,
    limit: u64,
    dest_dir: &Path,
) -> Result<StagedVideo, ApiError> {
    let parsed = reqwest::Url::parse(url).map_err(|e| ApiError::BadRequest(format!("video_url: {e}")))?;
    if !matches!(parsed.scheme(), "http" | "https") {
        return Err(ApiError::UnsupportedScheme(parsed.scheme().to_string()));
    }
    let resp = client
        .get(parsed)
        .send()
        .await
        .map_err(|e| ApiError::FetchFailed(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(ApiError::FetchFailed(format!("remote answered {}", resp.status())));
    }
    if resp.content_length().is_some_and(|n| n > limit) {
        return Err(ApiError::Oversize { limit });
    }

    let tmp = tempfile::Builder::new()
        .prefix("fetch-")
        .tempfile_in(dest_dir)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let (std_file, path) = tmp.keep().map_err(|e| ApiError::Internal(e.to_string()))?;
    let mut file = tokio::fs::File::from_std(std_file);
    let result = async {
        let mut size = 0u64;
        let mut body = resp.bytes_stream();
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| ApiError::FetchFailed(e.to_string()))?;
            size += chunk.len() as u64;
            if size > limit {
                return Err(ApiError::Oversize { limit });
            }
            file.write_all(&chunk).await.map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        file.flush().await.map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(size)
    }
    .await;
    match result {
        Ok(byte_size) => Ok(StagedVideo {
            path,
            byte_size,
            origin: VideoOrigin::RemoteUrl,
        }),
        Err(e) => {
            let _ = tokio::fs::remove_file(&path).await;
            Err(e)
        }
    }
}
