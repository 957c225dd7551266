//! Tool registry, the local search corpus and the fenced-JSON tool loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::llm::{extract_json, LlmClient, LlmError, Message, PurposeTag};
use crate::prompts::Templates;
use crate::workflow_model::{ExecutorKind, ExecutorSpec, TokenUsage, ToolInvocation};

/// Prefix of every tool-result message fed back to the model.
pub const TOOL_RESULT_HEADER: &str = "## Tool Result";

pub const MAX_TOOL_ROUNDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameter_schema: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("duplicate tool name {0:?}")]
    DuplicateTool(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("bad arguments for {tool}: {message}")]
    BadArguments { tool: String, message: String },
    #[error("cannot load corpus {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub title: String,
    pub snippet: String,
    pub score: f64,
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const SNIPPET_CHARS: usize = 300;

/// In-memory tf-idf index over title + body.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<CorpusDoc>,
    term_counts: Vec<BTreeMap<String, usize>>,
    lengths: Vec<usize>,
    df: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<CorpusDoc>) -> Result<Self, ToolError> {
        let mut ids = BTreeSet::new();
        for d in &docs {
            if !ids.insert(d.doc_id.clone()) {
                return Err(ToolError::DuplicateDocId(d.doc_id.clone()));
            }
        }
        let mut term_counts = Vec::with_capacity(docs.len());
        let mut lengths = Vec::with_capacity(docs.len());
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for d in &docs {
            let toks = tokenize(&format!("{} {}", d.title, d.body));
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for t in &toks {
                *counts.entry(t.clone()).or_default() += 1;
            }
            for t in counts.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            lengths.push(toks.len());
            term_counts.push(counts);
        }
        Ok(Self {
            docs,
            term_counts,
            lengths,
            df,
        })
    }

    /// Reads JSONL rows `{doc_id, title, body}`.
    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let err = |message: String| ToolError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: CorpusDoc = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            docs.push(doc);
        }
        Self::new(docs)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Sum over unique query terms of tf * ln(1 + N/df), tf normalized by
    /// document length. Zero-score documents are never returned.
    pub fn search_topk(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        if self.docs.is_empty() {
            return Err(ToolError::EmptyCorpus);
        }
        if k == 0 {
            return Err(ToolError::InvalidK);
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let n = self.docs.len() as f64;
        let mut hits: Vec<SearchHit> = Vec::new();
        for (i, doc) in self.docs.iter().enumerate() {
            let len = self.lengths[i];
            if len == 0 {
                continue;
            }
            let mut score = 0.0;
            for t in &terms {
                if let Some(&c) = self.term_counts[i].get(t) {
                    let idf = (1.0 + n / self.df[t] as f64).ln();
                    score += c as f64 / len as f64 * idf;
                }
            }
            if score > 0.0 {
                hits.push(SearchHit {
                    doc_id: doc.doc_id.clone(),
                    title: doc.title.clone(),
                    snippet: doc.body.chars().take(SNIPPET_CHARS).collect(),
                    score,
                });
            }
        }
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        hits.truncate(k);
        Ok(hits)
    }
}

pub trait Tool: Send + Sync {
    fn spec(&self) -> &ToolSpec;
    fn call(&self, arguments: &Value) -> Result<String, ToolError>;
}

pub const DEFAULT_SEARCH_K: usize = 3;

pub struct SearchTool {
    spec: ToolSpec,
    corpus: Arc<Corpus>,
}

impl SearchTool {
    pub fn new(name: impl Into<String>, corpus: Arc<Corpus>) -> Self {
        Self {
            spec: ToolSpec {
                name: name.into(),
                description: "Search the document corpus and return the top-k passages for a query.".into(),
                parameter_schema: r#"{"type":"object","properties":{"query":{"type":"string"},"k":{"type":"integer","minimum":1}},"required":["query"]}"#.into(),
            },
            corpus,
        }
    }
}

pub fn format_hits(hits: &[SearchHit]) -> String {
    if hits.is_empty() {
        return "No results.".into();
    }
    hits.iter()
        .enumerate()
        .map(|(i, h)| format!("[{}] {} | {} (score {:.4})\n{}", i + 1, h.doc_id, h.title, h.score, h.snippet))
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl Tool for SearchTool {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn call(&self, arguments: &Value) -> Result<String, ToolError> {
        let bad = |m: &str| ToolError::BadArguments {
            tool: self.spec.name.clone(),
            message: m.to_string(),
        };
        let query = arguments
            .get("query")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing string argument \"query\""))?;
        let k = match arguments.get("k") {
            None | Some(Value::Null) => DEFAULT_SEARCH_K,
            Some(v) => v.as_u64().filter(|k| *k >= 1).ok_or_else(|| bad("\"k\" must be a positive integer"))? as usize,
        };
        Ok(format_hits(&self.corpus.search_topk(query, k)?))
    }
}

/// Immutable after startup.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, tool: Arc<dyn Tool>) -> Result<Self, ToolError> {
        let name = tool.spec().name.clone();
        if self.tools.contains_key(&name) {
            return Err(ToolError::DuplicateTool(name));
        }
        self.tools.insert(name, tool);
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.get(name)
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn specs(&self) -> Vec<&ToolSpec> {
        self.tools.values().map(|t| t.spec()).collect()
    }

    /// `{available_tools}` text for meta prompts.
    pub fn describe(&self) -> String {
        if self.tools.is_empty() {
            return "(no tools available)".into();
        }
        self.specs()
            .iter()
            .map(|s| format!("- {}: {} Parameters: {}", s.name, s.description, s.parameter_schema))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn tool_list(&self, names: &[String]) -> String {
        names
            .iter()
            .filter_map(|n| self.get(n))
            .map(|t| format!("- `{}`: {} Parameters: {}", t.spec().name, t.spec().description, t.spec().parameter_schema))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToolFault {
    UnknownTool(String),
    RoundLimitExceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolStepOutcome {
    pub output: String,
    pub invocations: Vec<ToolInvocation>,
    pub usage: TokenUsage,
    pub rounds: usize,
    pub latency_ms: u64,
    pub fault: Option<ToolFault>,
}

#[derive(Debug, Clone, PartialEq)]
struct ToolCall {
    tool: String,
    arguments: Value,
}

fn parse_tool_call(content: &str) -> Option<ToolCall> {
    let v = extract_json(content).ok()?;
    let tool = v.get("tool")?.as_str()?.to_string();
    let arguments = v.get("arguments").cloned().unwrap_or(Value::Object(Default::default()));
    Some(ToolCall { tool, arguments })
}

/// Runs a ToolExecutor: up to [`MAX_TOOL_ROUNDS`] model rounds, each either a
/// tool call or the final answer. Only model transport errors are `Err`.
pub fn run_tool_step(
    client: &LlmClient,
    registry: &ToolRegistry,
    templates: &Templates,
    executor: &ExecutorSpec,
    system_extra: &str,
    envelope: &str,
) -> Result<ToolStepOutcome, LlmError> {
    let mut out = ToolStepOutcome {
        output: String::new(),
        invocations: Vec::new(),
        usage: TokenUsage::default(),
        rounds: 0,
        latency_ms: 0,
        fault: None,
    };
    if executor.kind != ExecutorKind::Tool {
        out.fault = Some(ToolFault::UnknownTool(String::new()));
        return Ok(out);
    }
    if let Some(missing) = executor.tool_names.iter().find(|t| registry.get(t).is_none()) {
        out.fault = Some(ToolFault::UnknownTool(missing.clone()));
        return Ok(out);
    }
    let protocol = templates
        .tool_protocol(&registry.tool_list(&executor.tool_names))
        .map_err(|e| LlmError::Backend(e.to_string()))?;
    let mut system = format!("{}\n\n{protocol}", executor.prompt.trim_end());
    if !system_extra.is_empty() {
        system.push_str("\n\n");
        system.push_str(system_extra);
    }
    let mut messages = vec![Message::system(system), Message::user(envelope)];
    while out.rounds < MAX_TOOL_ROUNDS {
        out.rounds += 1;
        let resp = client.complete(&client.executor_request(PurposeTag::Forward, messages.clone()))?;
        out.usage.add(TokenUsage {
            input_tokens: resp.input_tokens,
            output_tokens: resp.output_tokens,
        });
        out.latency_ms += resp.latency_ms;
        out.output = resp.content.clone();
        let Some(call) = parse_tool_call(&resp.content) else {
            return Ok(out);
        };
        if out.rounds == MAX_TOOL_ROUNDS {
            out.fault = Some(ToolFault::RoundLimitExceeded);
            return Ok(out);
        }
        let tool = match registry.get(&call.tool) {
            Some(t) if executor.tool_names.contains(&call.tool) => t,
            _ => {
                out.fault = Some(ToolFault::UnknownTool(call.tool));
                return Ok(out);
            }
        };
        let result = tool.call(&call.arguments).unwrap_or_else(|e| format!("Error: {e}"));
        let query = call
            .arguments
            .get("query")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| call.arguments.to_string());
        messages.push(Message::user(format!(
            "{TOOL_RESULT_HEADER} ({})\nYour call: {}\n\n{result}",
            call.tool,
            serde_json::json!({"tool": call.tool, "arguments": call.arguments})
        )));
        out.invocations.push(ToolInvocation {
            tool: call.tool,
            query,
            result,
        });
    }
    Ok(out)
}
