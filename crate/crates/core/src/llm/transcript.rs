use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, CompletionRequest, Purpose};

/// SHA-256 of the prompt text, lowercase hex.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub purpose: Purpose,
    pub prompt_hash: String,
    pub prompt: String,
    pub reply: Option<String>,
    pub error: Option<String>,
    pub attempt: u32,
    pub started_ms: u64,
    pub finished_ms: u64,
}

/// Append-only request/response log. Appends are serialized through a mutex
/// so concurrent callers never interleave records.
#[derive(Debug, Default)]
pub struct Transcript {
    inner: Mutex<TranscriptInner>,
}

#[derive(Debug, Default)]
struct TranscriptInner {
    records: Vec<TranscriptRecord>,
    sink: Option<File>,
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Records are also appended as JSON lines to `path`.
    pub fn to_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Transcript {
            inner: Mutex::new(TranscriptInner {
                records: Vec::new(),
                sink: Some(file),
            }),
        })
    }

    pub(crate) fn record(
        &self,
        request: &CompletionRequest,
        outcome: &Result<String, BackendError>,
        started_ms: u64,
        attempt: u32,
    ) {
        let record = TranscriptRecord {
            purpose: request.purpose,
            prompt_hash: prompt_hash(&request.prompt),
            prompt: request.prompt.clone(),
            reply: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            attempt,
            started_ms,
            finished_ms: now_millis(),
        };
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(sink) = inner.sink.as_mut() {
            let line = serde_json::to_string(&record).expect("transcript record serializes");
            if let Err(e) = writeln!(sink, "{line}") {
                log::warn!("transcript append failed: {e}");
            }
        }
        inner.records.push(record);
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.inner
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .records
            .clone()
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Vec<TranscriptRecord>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            out.push(record);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_hex() {
        let h = prompt_hash("abc");
        assert_eq!(
            h,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_transcript_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let t = Transcript::to_file(&path).unwrap();
        let req = CompletionRequest::new(Purpose::Select, "question?");
        t.record(&req, &Ok("answer".into()), 1, 1);
        t.record(&req, &Err(BackendError::fatal(Purpose::Select, "nope")), 2, 1);
        let loaded = Transcript::load(&path).unwrap();
        assert_eq!(loaded, t.records());
        assert_eq!(loaded[0].reply.as_deref(), Some("answer"));
        assert!(loaded[1].error.is_some());
    }
}
