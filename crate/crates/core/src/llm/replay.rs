//! Record/replay store: an append-only JSONL of `{seq, key, request, response}`.
//!
//! Repeated identical requests are served in recorded order; once a key's
//! responses are exhausted the last one is repeated.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRow {
    pub seq: u64,
    pub key: String,
    pub request: ChatRequest,
    pub response: StoredResponse,
}

struct State {
    by_key: BTreeMap<String, Vec<StoredResponse>>,
    served: BTreeMap<String, usize>,
    seq: u64,
    file: Option<File>,
}

pub struct ReplayBackend {
    mode: ReplayMode,
    path: PathBuf,
    inner: Option<Arc<dyn ChatBackend>>,
    state: Mutex<State>,
}

impl ReplayBackend {
    /// Records every call made through `inner`, appending to `path`.
    pub fn record(path: impl Into<PathBuf>, inner: Arc<dyn ChatBackend>) -> Result<Self, BackendError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| BackendError::Other(format!("cannot open replay store {}: {e}", path.display())))?;
        let rows = Self::load_rows(&path)?;
        let seq = rows.len() as u64;
        Ok(Self {
            mode: ReplayMode::Record,
            inner: Some(inner),
            state: Mutex::new(State {
                by_key: index(rows),
                served: BTreeMap::new(),
                seq,
                file: Some(file),
            }),
            path,
        })
    }

    /// Serves responses from `path` only; never touches the network.
    pub fn replay(path: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let path = path.into();
        let rows = Self::load_rows(&path)?;
        Ok(Self {
            mode: ReplayMode::Replay,
            inner: None,
            state: Mutex::new(State {
                seq: rows.len() as u64,
                by_key: index(rows),
                served: BTreeMap::new(),
                file: None,
            }),
            path,
        })
    }

    pub fn load_rows(path: &Path) -> Result<Vec<StoreRow>, BackendError> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Other(format!("cannot read replay store {}: {e}", path.display())))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    BackendError::Other(format!("replay store {} line {}: {e}", path.display(), i + 1))
                })
            })
            .collect()
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn index(rows: Vec<StoreRow>) -> BTreeMap<String, Vec<StoredResponse>> {
    let mut by_key: BTreeMap<String, Vec<StoredResponse>> = BTreeMap::new();
    let mut rows = rows;
    rows.sort_by_key(|r| r.seq);
    for r in rows {
        by_key.entry(r.key).or_default().push(r.response);
    }
    by_key
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = request.key();
        match self.mode {
            ReplayMode::Replay => {
                let mut st = self.state.lock().expect("replay lock");
                let responses = st
                    .by_key
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| BackendError::ReplayMiss { key: key.clone() })?;
                let n = st.served.entry(key).or_insert(0);
                let r = &responses[(*n).min(responses.len() - 1)];
                *n += 1;
                Ok(ChatResponse {
                    content: r.content.clone(),
                    input_tokens: r.input_tokens,
                    output_tokens: r.output_tokens,
                    latency_ms: 0,
                })
            }
            ReplayMode::Record => {
                let inner = self.inner.as_ref().expect("record mode has an inner backend");
                let resp = inner.complete(request)?;
                let stored = StoredResponse {
                    content: resp.content.clone(),
                    input_tokens: resp.input_tokens,
                    output_tokens: resp.output_tokens,
                };
                let mut st = self.state.lock().expect("replay lock");
                let row = StoreRow {
                    seq: st.seq,
                    key: key.clone(),
                    request: request.clone(),
                    response: stored.clone(),
                };
                st.seq += 1;
                let line = crate::run_store::canonical_line(&row);
                if let Some(f) = st.file.as_mut() {
                    writeln!(f, "{line}")
                        .map_err(|e| BackendError::Other(format!("cannot append to replay store: {e}")))?;
                }
                st.by_key.entry(key).or_default().push(stored);
                Ok(resp)
            }
        }
    }
}
