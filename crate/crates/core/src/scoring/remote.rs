//! HTTP client for an embedding service.
//!
//! `GET /info` returns `{"dim": int, "model": str}`; `POST /embed` takes
//! `{"images": [{"id": int, "path" | "bytes_b64": ...}]}` and answers
//! `{"dim": int, "embeddings": [{"id": int, "vector": [float]}]}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ServiceInfo {
    pub dim: usize,
    pub model: String,
}

#[derive(Debug, Serialize)]
struct ImageRef {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bytes_b64: Option<String>,
}

#[derive(Debug, Serialize)]
struct EmbedRequest {
    images: Vec<ImageRef>,
}

#[derive(Debug, Deserialize)]
struct EmbedEntry {
    id: u64,
    vector: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<EmbedEntry>,
}

#[derive(Debug, Clone)]
pub struct RemoteScorer {
    pub endpoint: String,
    pub batch_size: usize,
    pub retries: u32,
    pub backoff: Duration,
    /// Send image bytes inline instead of paths the service must resolve.
    pub send_bytes: bool,
    agent: ureq::Agent,
}

/// One requested image: sample id and its path.
#[derive(Debug, Clone)]
pub struct ImageRequest {
    pub id: u64,
    pub path: PathBuf,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        RemoteScorer {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            batch_size: 32,
            retries: 3,
            backoff: Duration::from_millis(100),
            send_bytes: false,
            agent,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_send_bytes(mut self, send_bytes: bool) -> Self {
        self.send_bytes = send_bytes;
        self
    }

    fn classify(err: ureq::Error) -> Result<String> {
        match err {
            ureq::Error::StatusCode(code) if code >= 500 => Ok(format!("HTTP {code}")),
            ureq::Error::StatusCode(code) => Err(Error::Remote(format!("HTTP {code}"))),
            ureq::Error::Io(e) => Ok(e.to_string()),
            ureq::Error::Timeout(t) => Ok(format!("timeout {t}")),
            ureq::Error::ConnectionFailed => Ok("connection failed".into()),
            ureq::Error::HostNotFound => Ok("host not found".into()),
            other => Err(Error::Remote(other.to_string())),
        }
    }

    fn with_retries_do<T>(&self, mut f: impl FnMut() -> Result<Attempt<T>>) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * attempt);
            }
            match f()? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(msg) => {
                    log::warn!("remote scorer attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Remote(format!(
            "giving up after {} attempts: {last}",
            self.retries + 1
        )))
    }

    pub fn info(&self) -> Result<ServiceInfo> {
        let url = format!("{}/info", self.endpoint);
        self.with_retries_do(|| match self.agent.get(&url).call() {
            Ok(mut resp) => resp
                .body_mut()
                .read_json::<ServiceInfo>()
                .map(Attempt::Done)
                .map_err(|e| Error::Remote(format!("bad /info payload: {e}"))),
            Err(e) => Self::classify(e).map(Attempt::Retry),
        })
    }

    fn post_batch(&self, batch: &[ImageRequest]) -> Result<EmbedResponse> {
        let images = batch
            .iter()
            .map(|r| {
                if self.send_bytes {
                    let bytes = std::fs::read(&r.path).map_err(|e| Error::io(&r.path, e))?;
                    Ok(ImageRef {
                        id: r.id,
                        path: None,
                        bytes_b64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
                    })
                } else {
                    Ok(ImageRef {
                        id: r.id,
                        path: Some(r.path.to_string_lossy().into_owned()),
                        bytes_b64: None,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let body = EmbedRequest { images };
        let url = format!("{}/embed", self.endpoint);
        self.with_retries_do(|| match self.agent.post(&url).send_json(&body) {
            Ok(mut resp) => resp
                .body_mut()
                .read_json::<EmbedResponse>()
                .map(Attempt::Done)
                .map_err(|e| Error::Remote(format!("bad /embed payload: {e}"))),
            Err(e) => Self::classify(e).map(Attempt::Retry),
        })
    }

    /// Fetches one vector per request, batching by `batch_size`. The table is
    /// assembled by id, so it does not depend on the batching.
    pub fn fetch_embeddings<T: Scalar>(&self, requests: &[ImageRequest]) -> Result<EmbeddingTable<T>> {
        let mut dim: Option<usize> = None;
        let mut vectors: BTreeMap<u64, Vec<T>> = BTreeMap::new();
        for batch in requests.chunks(self.batch_size.max(1)) {
            let resp = self.post_batch(batch)?;
            match dim {
                Some(d) if d != resp.dim => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: resp.dim,
                    })
                }
                _ => dim = Some(resp.dim),
            }
            for e in resp.embeddings {
                vectors.insert(e.id, e.vector.into_iter().map(cast::<T>).collect());
            }
        }
        let dim = dim.ok_or(Error::Empty("embedding request"))?;
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image)?;
        for r in requests {
            let v = vectors
                .remove(&r.id)
                .ok_or_else(|| Error::Remote(format!("no embedding returned for id {}", r.id)))?;
            table.insert(r.id, v)?;
        }
        Ok(table)
    }
}

/// Builds requests for every manifest sample, paths resolved under `root`.
pub fn requests_for(manifest: &crate::manifest::DatasetManifest, root: &Path) -> Vec<ImageRequest> {
    let mut reqs: Vec<ImageRequest> = manifest
        .samples
        .iter()
        .map(|s| ImageRequest {
            id: s.id,
            path: root.join(&s.image_path),
        })
        .collect();
    reqs.sort_by_key(|r| r.id);
    reqs
}
