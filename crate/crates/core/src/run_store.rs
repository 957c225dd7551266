//! Checkpoints, JSONL persistence, the call ledger and the cost model.
//!
//! Costs are integer micro-dollars; the USD float in a ledger row is derived
//! from that integer and never summed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::llm::PurposeTag;
use crate::workflow_model::{
    validate_state, Control, ExecutorKind, ExecutorSpec, StepSpec, Violation, WorkflowState,
};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("checkpoint schema_version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is not a valid workflow state: {0:?}")]
    InvalidState(Vec<Violation>),
    #[error("checkpoint step {step_id} declares executor_type {declared} but executor {executor} is {actual}")]
    ExecutorTypeMismatch {
        step_id: u32,
        executor: String,
        declared: String,
        actual: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes through `serde_json::Value` so object keys come out sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    let mut s = serde_json::to_string_pretty(&v).expect("serializable value");
    s.push('\n');
    s
}

/// Compact single-line canonical JSON (for JSONL rows).
pub fn canonical_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&v).expect("serializable value")
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), StoreError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&canonical_line(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Json {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Source of timestamps. `Logical` keeps runs byte-reproducible.
#[derive(Debug)]
pub enum Clock {
    Logical(AtomicU64),
    System,
}

impl Clock {
    pub fn logical() -> Self {
        Clock::Logical(AtomicU64::new(0))
    }

    /// Logical ticks, or milliseconds since the Unix epoch.
    pub fn now(&self) -> u64 {
        match self {
            Clock::Logical(t) => t.fetch_add(1, Ordering::SeqCst) + 1,
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }

    pub fn is_logical(&self) -> bool {
        matches!(self, Clock::Logical(_))
    }
}

/// USD per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_1m: f64,
    pub output_per_1m: f64,
}

impl ModelPrice {
    /// Prices as integer micro-dollars per million tokens.
    fn micro(&self) -> (u128, u128) {
        let to_micro = |p: f64| (p * 1e6).round().max(0.0) as u128;
        (to_micro(self.input_per_1m), to_micro(self.output_per_1m))
    }
}

pub type PriceTable = BTreeMap<String, ModelPrice>;

/// Integer division rounding half to even.
fn div_round_half_even(num: u128, den: u128) -> u128 {
    let q = num / den;
    let r = num % den;
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// Cost of one call in micro-dollars, rounded half-even.
pub fn cost_micro_usd(price: &ModelPrice, input_tokens: u64, output_tokens: u64) -> u64 {
    let (pin, pout) = price.micro();
    let pico = input_tokens as u128 * pin + output_tokens as u128 * pout;
    div_round_half_even(pico, 1_000_000) as u64
}

pub fn micro_to_usd(micro: u64) -> f64 {
    micro as f64 / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub idx: u64,
    pub purpose: PurposeTag,
    pub model: String,
    pub in_tok: u64,
    pub out_tok: u64,
    pub cost_usd: f64,
    pub cost_micro_usd: u64,
    pub ts: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub price_missing: bool,
}

/// Free-form annotation for skipped work (never counted as a call).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerNote {
    /// Number of ledger rows when the note was written.
    pub after_idx: u64,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Default)]
struct LedgerInner {
    rows: Vec<LedgerRow>,
    notes: Vec<LedgerNote>,
    total_micro: u64,
}

/// Append-only record of every model call.
#[derive(Debug)]
pub struct Ledger {
    prices: PriceTable,
    clock: Clock,
    inner: Mutex<LedgerInner>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LedgerTotals {
    pub calls: u64,
    pub cost_micro_usd: u64,
}

impl Ledger {
    pub fn new(prices: PriceTable, clock: Clock) -> Self {
        Self {
            prices,
            clock,
            inner: Mutex::new(LedgerInner::default()),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn record_call(&self, purpose: PurposeTag, model: &str, input_tokens: u64, output_tokens: u64) -> LedgerRow {
        let (cost, missing) = match self.prices.get(model) {
            Some(p) => (cost_micro_usd(p, input_tokens, output_tokens), false),
            None => (0, true),
        };
        let mut inner = self.inner.lock().expect("ledger lock");
        let row = LedgerRow {
            idx: inner.rows.len() as u64,
            purpose,
            model: model.to_string(),
            in_tok: input_tokens,
            out_tok: output_tokens,
            cost_usd: micro_to_usd(cost),
            cost_micro_usd: cost,
            ts: self.clock.now(),
            price_missing: missing,
        };
        inner.total_micro += cost;
        inner.rows.push(row.clone());
        row
    }

    pub fn note(&self, kind: &str, message: impl Into<String>) {
        let mut inner = self.inner.lock().expect("ledger lock");
        let after_idx = inner.rows.len() as u64;
        inner.notes.push(LedgerNote {
            after_idx,
            kind: kind.to_string(),
            message: message.into(),
        });
    }

    pub fn totals(&self) -> LedgerTotals {
        let inner = self.inner.lock().expect("ledger lock");
        LedgerTotals {
            calls: inner.rows.len() as u64,
            cost_micro_usd: inner.total_micro,
        }
    }

    pub fn rows(&self) -> Vec<LedgerRow> {
        self.inner.lock().expect("ledger lock").rows.clone()
    }

    pub fn notes(&self) -> Vec<LedgerNote> {
        self.inner.lock().expect("ledger lock").notes.clone()
    }

    pub fn rows_since(&self, idx: u64) -> Vec<LedgerRow> {
        let inner = self.inner.lock().expect("ledger lock");
        inner.rows.iter().skip(idx as usize).cloned().collect()
    }
}

/// On-disk step layout: the outer-loop plan fields plus `control`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepDoc {
    step_id: u32,
    description: String,
    tools: Vec<String>,
    executor_type: String,
    executor_name: String,
    generation_guideline: String,
    control: Control,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDoc {
    schema_version: u32,
    revision: u64,
    sketch_revision: u64,
    sketch: Vec<StepDoc>,
    executors: BTreeMap<String, ExecutorSpec>,
}

/// Canonical checkpoint text for `state`.
pub fn checkpoint_json(state: &WorkflowState) -> String {
    let sketch = state
        .sketch
        .iter()
        .map(|s| StepDoc {
            step_id: s.step_id,
            description: s.description.clone(),
            tools: s.tool_names.clone(),
            executor_type: state
                .executors
                .get(&s.executor_name)
                .map(|e| e.kind)
                .unwrap_or(ExecutorKind::for_tools(&s.tool_names))
                .as_str()
                .to_string(),
            executor_name: s.executor_name.clone(),
            generation_guideline: s.generation_guideline.clone(),
            control: s.control.clone(),
        })
        .collect();
    canonical_json(&CheckpointDoc {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        revision: state.revision,
        sketch_revision: state.sketch_revision,
        sketch,
        executors: state.executors.clone(),
    })
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<WorkflowState, StoreError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| StoreError::Json {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_SCHEMA_VERSION {
        return Err(StoreError::SchemaVersionMismatch {
            found,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(raw).map_err(|e| StoreError::Json {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    let state = WorkflowState {
        sketch: doc
            .sketch
            .iter()
            .map(|s| StepSpec {
                step_id: s.step_id,
                description: s.description.clone(),
                executor_name: s.executor_name.clone(),
                tool_names: s.tools.clone(),
                control: s.control.clone(),
                generation_guideline: s.generation_guideline.clone(),
            })
            .collect(),
        executors: doc.executors,
        revision: doc.revision,
        sketch_revision: doc.sketch_revision,
    };
    let violations = validate_state(&state);
    if !violations.is_empty() {
        return Err(StoreError::InvalidState(violations));
    }
    for s in &doc.sketch {
        let actual = state.executors[&s.executor_name].kind.as_str();
        if s.executor_type != actual {
            return Err(StoreError::ExecutorTypeMismatch {
                step_id: s.step_id,
                executor: s.executor_name.clone(),
                declared: s.executor_type.clone(),
                actual: actual.to_string(),
            });
        }
    }
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &WorkflowState) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, checkpoint_json(state)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<WorkflowState, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_checkpoint(&text, path)
}

/// Layout of a training run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints")).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn batch_checkpoint(&self, batch_index: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("batch_{batch_index}.json"))
    }

    pub fn initial_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("initial.json")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.json")
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }

    pub fn notes(&self) -> PathBuf {
        self.root.join("notes.jsonl")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store.jsonl")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    /// Appends one row to a JSONL file.
    pub fn append_jsonl<T: Serialize>(&self, path: &Path, row: &T) -> Result<(), StoreError> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        writeln!(f, "{}", canonical_line(row)).map_err(io_err(path))
    }

    pub fn write_ledger(&self, ledger: &Ledger) -> Result<(), StoreError> {
        write_jsonl(&self.ledger(), &ledger.rows())?;
        write_jsonl(&self.notes(), &ledger.notes())
    }
}
