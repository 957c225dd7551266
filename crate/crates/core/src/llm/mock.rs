//! Deterministic backends for tests, demos and golden runs.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, PurposeTag, Role};
use crate::evaluation::normalize_answer;
use crate::forward::{envelope_previous_output, envelope_question, TOOL_RESULT_HEADER};

/// Whitespace token count; mocks report this as usage.
fn approx_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

fn response_for(request: &ChatRequest, content: String) -> ChatResponse {
    let input = request.messages.iter().map(|m| approx_tokens(&m.content)).sum();
    ChatResponse {
        output_tokens: approx_tokens(&content),
        input_tokens: input,
        content,
        latency_ms: 0,
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure. Handy in tests.
pub struct FnBackend {
    f: Box<ReplyFn>,
}

impl FnBackend {
    pub fn new(f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }
}

impl ChatBackend for FnBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (self.f)(request).map(|c| response_for(request, c))
    }
}

/// One scripted rule. All present conditions must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub purpose: Option<PurposeTag>,
    /// Substring that must appear in some message.
    #[serde(default)]
    pub contains: Option<String>,
    /// Returned in order, cycling.
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    /// Return the last user message verbatim.
    #[default]
    Echo,
    /// Well-formed JSON for every meta prompt, pass-through for executors.
    Toy,
    /// Fail the call.
    Error,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: Fallback,
}

/// Rule-based scripted model.
pub struct ScriptedMock {
    script: MockScript,
    cursors: Mutex<Vec<usize>>,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        Self {
            script,
            cursors: Mutex::new(vec![0; n]),
        }
    }

    pub fn echo() -> Self {
        Self::new(MockScript::default())
    }

    pub fn toy() -> Self {
        Self::new(MockScript {
            rules: Vec::new(),
            fallback: Fallback::Toy,
        })
    }

    pub fn fixed(content: impl Into<String>) -> Self {
        Self::new(MockScript {
            rules: vec![MockRule {
                purpose: None,
                contains: None,
                responses: vec![content.into()],
            }],
            fallback: Fallback::Echo,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Other(format!("cannot read mock script {}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| BackendError::Other(format!("invalid mock script {}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    fn matches(rule: &MockRule, req: &ChatRequest) -> bool {
        if let Some(p) = rule.purpose {
            if p != req.purpose {
                return false;
            }
        }
        if let Some(needle) = &rule.contains {
            if !req.messages.iter().any(|m| m.content.contains(needle.as_str())) {
                return false;
            }
        }
        !rule.responses.is_empty()
    }
}

impl ChatBackend for ScriptedMock {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        for (i, rule) in self.script.rules.iter().enumerate() {
            if Self::matches(rule, request) {
                let mut cursors = self.cursors.lock().expect("mock lock");
                let content = rule.responses[cursors[i] % rule.responses.len()].clone();
                cursors[i] += 1;
                return Ok(response_for(request, content));
            }
        }
        let content = match self.script.fallback {
            Fallback::Echo => request.last_user().to_string(),
            Fallback::Toy => toy_reply(request),
            Fallback::Error => {
                return Err(BackendError::Other(format!(
                    "no mock rule matches {} request",
                    request.purpose
                )))
            }
        };
        Ok(response_for(request, content))
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let rest = &text[s..];
    Some(rest.find(end).map(|e| &rest[..e]).unwrap_or(rest))
}

fn line_after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    between(text, marker, "\n").map(str::trim)
}

fn camel(description: &str) -> String {
    let mut out: String = description
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(4)
        .map(|w| {
            let mut cs = w.chars();
            let first = cs.next().unwrap().to_ascii_uppercase();
            std::iter::once(first).chain(cs.map(|c| c.to_ascii_lowercase())).collect::<String>()
        })
        .collect();
    if out.is_empty() {
        out.push_str("Executor");
    }
    out
}

const TOY_PROMPT_SUFFIX: &str = "Check the answer against the available evidence before responding.";

/// Deterministic stand-in for a cooperative model.
fn toy_reply(req: &ChatRequest) -> String {
    let user = req.last_user();
    let first_user = req
        .messages
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    match req.purpose {
        PurposeTag::Forward => {
            let system = req.system_prompt().unwrap_or("");
            let passthrough = {
                let prev = envelope_previous_output(first_user);
                if prev.trim().is_empty() {
                    envelope_question(first_user).to_string()
                } else {
                    prev.to_string()
                }
            };
            if system.contains("## Tool Use") && !user.contains(TOOL_RESULT_HEADER) {
                let tool = between(system, "- `", "`").unwrap_or("search_topk");
                let query = envelope_question(first_user);
                format!(
                    "```json\n{}\n```",
                    json!({"tool": tool, "arguments": {"query": query, "k": 3}})
                )
            } else {
                passthrough
            }
        }
        PurposeTag::Bootstrap => user.to_string(),
        PurposeTag::GradWorkflow => json!({
            "reasoning": "The task needs an analysis step before answering.",
            "text_gradient": "Keep the answer step and make sure it states only the final answer."
        })
        .to_string(),
        PurposeTag::GradLoss if user.contains("in a single pass:") => {
            let ids = line_after(user, "in a single pass:").unwrap_or("").trim_end_matches('.');
            let grads: Vec<_> = ids
                .split(',')
                .filter_map(|s| s.trim().parse::<u32>().ok())
                .map(|id| json!({"step_id": id, "text_gradient": format!("Step {id}: keep the format; verify content.")}))
                .collect();
            json!({ "gradients": grads }).to_string()
        }
        PurposeTag::GradLoss | PurposeTag::GradCall => json!({
            "text_gradient": "Preserve the output format. Verify the answer against the evidence."
        })
        .to_string(),
        PurposeTag::OptimCall if user.contains("Return an updated prompt for each of these agents:") => {
            let names = line_after(user, "Return an updated prompt for each of these agents:")
                .unwrap_or("")
                .trim_end_matches('.');
            let updates: Vec<_> = names
                .split(',')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .map(|n| json!({"executor_name": n, "updated_prompt": format!("You are {n}. {TOY_PROMPT_SUFFIX}")}))
                .collect();
            json!({"updated_prompts": updates, "reasoning": "toy"}).to_string()
        }
        PurposeTag::OptimCall => {
            let current = between(user, "## Current Prompt (θ)\n```\n", "\n```").unwrap_or("").trim();
            let updated = if current.contains(TOY_PROMPT_SUFFIX) {
                current.to_string()
            } else {
                format!("{current}\n{TOY_PROMPT_SUFFIX}")
            };
            json!({
                "updated_prompt": updated,
                "changes_made": ["Added an evidence check"],
                "reasoning": "Gradients ask for verification."
            })
            .to_string()
        }
        PurposeTag::OptimWorkflow if user.contains("Every step carries its full prompt.") => json!({
            "reasoning": "toy", "should_update": false, "updated_execution_plan": []
        })
        .to_string(),
        PurposeTag::OptimWorkflow => {
            let agents = between(user, "## Current Agents", "---").unwrap_or("");
            if agents.contains(crate::optimizer::BOOTSTRAP_EXECUTOR) {
                json!({
                    "reasoning": "Start from an analyze-then-answer chain.",
                    "should_update": true,
                    "updated_execution_plan": [
                        {"step_id": 1, "description": "Analyze the question", "tools": [], "executor_type": "new",
                         "executor_name": "QuestionAnalyzer", "generation_guideline": "Restate what is being asked."},
                        {"step_id": 2, "description": "Answer concisely", "tools": [], "executor_type": "new",
                         "executor_name": "AnswerWriter", "generation_guideline": "Output only the final answer."}
                    ]
                })
                .to_string()
            } else {
                json!({"reasoning": "Structure is adequate.", "should_update": false, "updated_execution_plan": []})
                    .to_string()
            }
        }
        PurposeTag::InitExecutor => {
            let desc = line_after(user, "- **Step Description**:").unwrap_or("step");
            let tools = line_after(user, "- **Tools**:").unwrap_or("[]");
            let kind = if tools.contains('"') { "ToolExecutor" } else { "LLMExecutor" };
            json!({
                "name": camel(desc),
                "type": kind,
                "description": desc,
                "prompt": format!("Task Description: {desc}.\nOutput Format: plain text.")
            })
            .to_string()
        }
        PurposeTag::Judge => {
            let truth = between(user, "## Reference Answer\n", "\n\n## ").unwrap_or("");
            let pred = between(user, "## Prediction\n", "\n\nRespond").unwrap_or("");
            let score = if normalize_answer(truth) == normalize_answer(pred) { 1.0 } else { 0.0 };
            json!({"score": score, "feedback": "toy judge"}).to_string()
        }
    }
}
