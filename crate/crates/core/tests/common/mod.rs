//! Shared fixtures for the integration tests.
//!
//! The worked example is a 4-step retrieval QA workflow that grows to 6 steps
//! and then has its verification prompt rewritten. Its model traffic lives in
//! `fixtures/worked_example/store.jsonl`; set `WFI_BLESS=1` to regenerate the
//! store (and `after.json`) from `script.json`:
//! `WFI_BLESS=1 cargo test --test worked_example store_replays`.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use wfi_core::engine::Engine;
use wfi_core::evaluation::{exact_match, load_dataset, EvalResult, Metric, Sample};
use wfi_core::forward::run_workflow;
use wfi_core::gradient::{backward, grad_workflow};
use wfi_core::llm::{BackendError, ChatBackend, ChatRequest, FnBackend, LlmClient, ModelSettings, PurposeTag, ReplayBackend, Role};
use wfi_core::optimizer::{update_prompt, update_workflow, PlanDecision, PromptUpdate};
use wfi_core::run_store::{canonical_json, canonical_line, save_checkpoint, Clock, Ledger, PriceTable};
use wfi_core::tools::{Corpus, SearchTool, ToolRegistry};
use wfi_core::workflow_model::{ExecutionTrace, ExecutorSpec, StepSpec, TextualGradient, WorkflowState};

pub const SEARCH_TOOL: &str = "wikipedia_search_topk";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn example_dir() -> PathBuf {
    fixtures().join("worked_example")
}

pub fn toy_dir() -> PathBuf {
    fixtures().join("toy")
}

#[derive(Debug, Clone, Deserialize)]
pub struct Script {
    pub question: String,
    pub answer: String,
    pub prompts: BTreeMap<String, String>,
    pub tool_queries: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub workflow_gradient: Value,
    pub plan: Value,
    pub init: BTreeMap<String, Value>,
    pub step_gradients: BTreeMap<String, String>,
    pub prompt_update: Value,
}

pub fn script() -> Script {
    let text = std::fs::read_to_string(example_dir().join("script.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn sample() -> Sample {
    load_dataset(&example_dir().join("sample.jsonl")).unwrap().remove(0)
}

pub fn registry() -> ToolRegistry {
    let corpus = Corpus::load(&example_dir().join("corpus.jsonl")).unwrap();
    ToolRegistry::new()
        .with(Arc::new(SearchTool::new(SEARCH_TOOL, Arc::new(corpus))))
        .unwrap()
}

pub fn before_state(s: &Script) -> WorkflowState {
    let p = |n: &str| s.prompts[n].as_str();
    WorkflowState::new(
        vec![
            StepSpec::new(1, "Wikipedia search", "WikiSearch").with_tools(&[SEARCH_TOOL]),
            StepSpec::new(2, "Answer extraction", "AnswerExtractor"),
            StepSpec::new(3, "Verification", "Verifier"),
            StepSpec::new(4, "Final answer", "FinalAnswer"),
        ],
        vec![
            ExecutorSpec::tool("WikiSearch", "Searches Wikipedia.", p("WikiSearch"), &[SEARCH_TOOL]),
            ExecutorSpec::llm("AnswerExtractor", "Extracts a candidate answer.", p("AnswerExtractor")),
            ExecutorSpec::llm("Verifier", "Verifies and ranks candidates.", p("Verifier")),
            ExecutorSpec::llm("FinalAnswer", "Formats the final answer.", p("FinalAnswer")),
        ],
    )
}

fn executor_prompts(s: &Script) -> Vec<(String, String)> {
    let mut all: Vec<(String, String)> = s.prompts.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for v in s.init.values() {
        all.push((v["name"].as_str().unwrap().into(), v["prompt"].as_str().unwrap().into()));
    }
    all.sort_by_key(|(_, p)| std::cmp::Reverse(p.len()));
    all
}

/// The scripted model that stands in for the live one when recording.
pub fn scripted_backend(s: Script) -> FnBackend {
    let prompts = executor_prompts(&s);
    FnBackend::new(move |req: &ChatRequest| {
        let user = req.last_user();
        let reply = match req.purpose {
            PurposeTag::Forward => {
                let system = req.system_prompt().unwrap_or("");
                let Some((name, _)) = prompts.iter().find(|(_, p)| system.starts_with(p.as_str())) else {
                    return Err(BackendError::Other("unscripted executor".into()));
                };
                match s.tool_queries.get(name) {
                    Some(q) if !user.starts_with("## Tool Result") => {
                        serde_json::json!({"tool": SEARCH_TOOL, "arguments": {"query": q, "k": 2}}).to_string()
                    }
                    _ => s.outputs[name].clone(),
                }
            }
            PurposeTag::GradWorkflow => s.workflow_gradient.to_string(),
            PurposeTag::OptimWorkflow => s.plan.to_string(),
            PurposeTag::InitExecutor => {
                let (_, reply) = s
                    .init
                    .iter()
                    .find(|(desc, _)| user.contains(&format!("**Step Description**: {desc}")))
                    .ok_or_else(|| BackendError::Other("unscripted init".into()))?;
                reply.to_string()
            }
            PurposeTag::GradLoss => serde_json::json!({"text_gradient": s.step_gradients["6"]}).to_string(),
            PurposeTag::GradCall => {
                let id = user
                    .split("## This Step (Step ")
                    .nth(1)
                    .and_then(|r| r.split(')').next())
                    .ok_or_else(|| BackendError::Other("no step id".into()))?;
                serde_json::json!({"text_gradient": s.step_gradients[id]}).to_string()
            }
            PurposeTag::OptimCall => s.prompt_update.to_string(),
            other => return Err(BackendError::Other(format!("unscripted purpose {other:?}"))),
        };
        Ok(reply)
    })
}

pub fn engine_with(backend: Arc<dyn ChatBackend>) -> Engine {
    let ledger = Arc::new(Ledger::new(PriceTable::new(), Clock::logical()));
    Engine::new(LlmClient::new(backend, ledger, ModelSettings::default()), registry())
}

pub fn store_path() -> PathBuf {
    example_dir().join("store.jsonl")
}

pub fn replay_engine() -> Engine {
    engine_with(Arc::new(ReplayBackend::replay(store_path()).unwrap()))
}

pub fn blessing() -> bool {
    std::env::var("WFI_BLESS").map(|v| v == "1").unwrap_or(false)
}

pub struct Artifacts {
    pub before: WorkflowState,
    pub trace_before: ExecutionTrace,
    pub gradient_w: TextualGradient,
    pub decision: PlanDecision,
    pub after: WorkflowState,
    pub trace_after: ExecutionTrace,
    pub eval_after: EvalResult,
    pub step_gradients: BTreeMap<u32, TextualGradient>,
    pub update: PromptUpdate,
    pub updated: WorkflowState,
    pub init_calls: usize,
    pub ledger: String,
}

impl Artifacts {
    /// Everything the run produced, as one deterministic string.
    pub fn canonical(&self) -> String {
        let grads: Vec<&TextualGradient> = self.step_gradients.values().collect();
        [
            canonical_json(&self.before),
            canonical_json(&self.trace_before),
            canonical_json(&self.gradient_w),
            canonical_json(&self.decision),
            canonical_json(&self.after),
            canonical_json(&self.trace_after),
            canonical_json(&self.eval_after),
            canonical_json(&grads),
            canonical_json(&self.update),
            canonical_json(&self.updated),
            self.ledger.clone(),
        ]
        .join("\n")
    }
}

/// Outer step on the 4-step workflow, then forward, backward and one
/// verification prompt update on the 6-step result.
pub fn run_worked_example(engine: &Engine) -> Artifacts {
    let s = script();
    let sample = sample();
    let metric = Metric::ExactMatch;
    let info = metric.info();
    let before = before_state(&s);
    let trace_before = run_workflow(engine, &before, &sample).unwrap();
    let eval_before = exact_match(&trace_before.final_output, &sample.answer);
    let gradient_w = grad_workflow(engine, &before, &trace_before, &sample, &eval_before, &info).unwrap();
    let inits_before = count(engine, PurposeTag::InitExecutor);
    let (after, decision) = update_workflow(
        engine,
        &before,
        std::slice::from_ref(&gradient_w),
        1,
        std::slice::from_ref(&sample.question),
        &info,
    )
    .unwrap();
    let init_calls = count(engine, PurposeTag::InitExecutor) - inits_before;
    let trace_after = run_workflow(engine, &after, &sample).unwrap();
    let eval_after = exact_match(&trace_after.final_output, &sample.answer);
    let step_gradients = backward(engine, &after, &trace_after, &sample, &eval_after, &info).unwrap();
    let (updated, update) = update_prompt(engine, &after, "Verifier", &[step_gradients[&5].clone()], 1).unwrap();
    let ledger = engine
        .client
        .ledger()
        .rows()
        .iter()
        .map(canonical_line)
        .collect::<Vec<_>>()
        .join("\n");
    Artifacts {
        before,
        trace_before,
        gradient_w,
        decision,
        after,
        trace_after,
        eval_after,
        step_gradients,
        update,
        updated,
        init_calls,
        ledger,
    }
}

pub fn count(engine: &Engine, p: PurposeTag) -> usize {
    engine.client.ledger().rows().iter().filter(|r| r.purpose == p).count()
}

/// Rewrites the committed store from the script. Only under `WFI_BLESS=1`.
pub fn bless_worked_example() {
    let path = store_path();
    let _ = std::fs::remove_file(&path);
    let recorder = ReplayBackend::record(&path, Arc::new(scripted_backend(script()))).unwrap();
    let engine = engine_with(Arc::new(recorder));
    let a = run_worked_example(&engine);
    save_checkpoint(&example_dir().join("after.json"), &a.after).unwrap();
}

/// Tags of ledger rows in order.
pub fn tags(engine: &Engine) -> Vec<PurposeTag> {
    engine.client.ledger().rows().iter().map(|r| r.purpose).collect()
}

pub fn user_text(req: &ChatRequest) -> String {
    req.messages
        .iter()
        .filter(|m| m.role == Role::User)
        .map(|m| m.content.clone())
        .collect::<Vec<_>>()
        .join("\n")
}
