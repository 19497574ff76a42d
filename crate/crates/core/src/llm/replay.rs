use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fingerprint, ChatBackend, ChatPart, ChatRequest, ChatResponse, LlmError};

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub fingerprint: String,
    pub response: String,
    pub model: String,
}

/// Answers from recorded fingerprint → response pairs (JSON lines).
#[derive(Debug)]
pub struct ReplayBackend {
    entries: HashMap<String, ReplayEntry>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let err = |message: String| LlmError::ReplayFile {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry =
                serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
            // first recording wins
            entries.entry(e.fingerprint.clone()).or_insert(e);
        }
        Ok(ReplayBackend { entries })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        let mut map = HashMap::new();
        for e in entries {
            map.entry(e.fingerprint.clone()).or_insert(e);
        }
        ReplayBackend { entries: map }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn tag(&self) -> &str {
        "replay"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let fp = fingerprint(request);
        let entry = self
            .entries
            .get(&fp)
            .ok_or(LlmError::ReplayMiss { fingerprint: fp })?;
        Ok(ChatResponse {
            answer_text: entry.response.clone(),
            latency_ms: 0,
            backend_tag: "replay".into(),
            raw_ref: None,
        })
    }
}

/// Forwards to an inner backend and appends each successful exchange to a
/// replay file.
pub struct RecordingBackend {
    inner: Box<dyn ChatBackend>,
    file: Mutex<File>,
    path: PathBuf,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn ChatBackend>, path: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::ReplayFile {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(RecordingBackend {
            inner,
            file: Mutex::new(file),
            path: path.to_path_buf(),
        })
    }
}

impl ChatBackend for RecordingBackend {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.send(request)?;
        let entry = ReplayEntry {
            fingerprint: fingerprint(request),
            response: response.answer_text.clone(),
            model: request.model_tag.clone(),
        };
        let line = serde_json::to_string(&entry).expect("entry serializes") + "\n";
        let mut f = self.file.lock().expect("replay file lock");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| LlmError::ReplayFile {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        Ok(response)
    }
}

/// Test double: answers with the request's final text part (the query).
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn tag(&self) -> &str {
        "echo"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let start = Instant::now();
        let answer = request
            .parts
            .iter()
            .rev()
            .find_map(|p| match p {
                ChatPart::Text { text } => Some(text.clone()),
                ChatPart::Image { .. } => None,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            answer_text: answer,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_tag: "echo".into(),
            raw_ref: None,
        })
    }
}
