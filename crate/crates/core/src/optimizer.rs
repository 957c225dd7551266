//! Applies textual gradients: prompt updates, sketch updates, executor
//! initialization and cold-start bootstrap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::evaluation::{Metric, Sample};
use crate::gradient::{grad_workflow, render_prompts, render_tools, GradError};
use crate::llm::{LlmError, Message, PurposeTag};
use crate::prompts::{with_sketch_section, TemplateId, OUTPUT_FORMAT_INSTRUCTION};
use crate::workflow_model::{
    is_identifier, render_sketch_table, Control, ExecutionTrace, ExecutorKind, ExecutorSpec, GradientScope, StepRecord,
    StepSpec, TextualGradient, TokenUsage, WorkflowState,
};

/// Name of the instruction-free pseudo executor used during bootstrap.
pub const BOOTSTRAP_EXECUTOR: &str = "ZeroShot";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanExecutorType {
    Reuse,
    New,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_id: u32,
    pub description: String,
    #[serde(default)]
    pub tools: Vec<String>,
    pub executor_type: PlanExecutorType,
    pub executor_name: String,
    #[serde(default)]
    pub generation_guideline: String,
    #[serde(default)]
    pub control: Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDecision {
    #[serde(default)]
    pub reasoning: String,
    pub should_update: bool,
    #[serde(default, rename = "updated_execution_plan")]
    pub plan: Vec<PlanStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptUpdate {
    pub updated_prompt: String,
    #[serde(default)]
    pub changes_made: Vec<String>,
    #[serde(default)]
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("empty gradient batch")]
    EmptyBatch,
    #[error("unknown executor {0:?}")]
    UnknownExecutor(String),
    #[error("invalid plan: {0}")]
    PlanInvalid(String),
    #[error("executor initialization failed for step {step_id}: {message}")]
    InitFailed { step_id: u32, message: String },
    /// The meta model's reply could not be used; nothing was changed.
    #[error("update skipped: {0}")]
    Skipped(String),
    #[error("bootstrap failed: {0}")]
    BootstrapFailed(String),
    #[error(transparent)]
    Fatal(LlmError),
}

impl OptimError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, OptimError::Fatal(_))
    }
}

fn skipped(engine: &Engine, what: &str, e: LlmError) -> OptimError {
    if e.is_fatal() {
        return OptimError::Fatal(e);
    }
    engine.client.ledger().note("update_skipped", format!("{what}: {e}"));
    OptimError::Skipped(e.to_string())
}

fn template_err(e: crate::prompts::TemplateError) -> OptimError {
    OptimError::PlanInvalid(format!("template: {e}"))
}

/// One block per gradient, each text verbatim.
pub fn aggregate_gradients(gradients: &[TextualGradient]) -> String {
    gradients
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let scope = match g.scope {
                GradientScope::Step { step_id } => format!(", step {step_id}"),
                GradientScope::Workflow => String::new(),
            };
            let mut block = format!("### Gradient {} (sample {}{scope})\n{}", i + 1, g.sample_id, g.text);
            if let Some(r) = &g.reasoning {
                block.push_str(&format!("\nReasoning: {r}"));
            }
            block
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_agents(state: &WorkflowState) -> String {
    state
        .executors
        .values()
        .map(|e| {
            format!(
                "- {} ({}, tools: {}): {}",
                e.name,
                e.kind.as_str(),
                render_tools(&e.tool_names),
                e.description
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn update_prompt_prompt(
    engine: &Engine,
    state: &WorkflowState,
    executor: &ExecutorSpec,
    gradients: &[TextualGradient],
    num_samples: usize,
) -> Result<(String, String), OptimError> {
    let vars = BTreeMap::from([
        ("executor_name", executor.name.clone()),
        ("executor_type", executor.kind.as_str().to_string()),
        ("executor_tools", render_tools(&executor.tool_names)),
        ("current_prompt", executor.prompt.clone()),
        ("num_samples", num_samples.to_string()),
        ("aggregated_gradients", aggregate_gradients(gradients)),
    ]);
    let p = engine.templates.render(TemplateId::OptimCall, &vars).map_err(template_err)?;
    Ok((p.system, with_sketch_section(p.user, &render_sketch_table(state))))
}

/// One TGD step on `executor`'s prompt. On success the returned state has
/// the new prompt and a bumped version.
pub fn update_prompt(
    engine: &Engine,
    state: &WorkflowState,
    executor: &str,
    gradients: &[TextualGradient],
    num_samples: usize,
) -> Result<(WorkflowState, PromptUpdate), OptimError> {
    if gradients.is_empty() || num_samples == 0 {
        return Err(OptimError::EmptyBatch);
    }
    let exec = state
        .executors
        .get(executor)
        .ok_or_else(|| OptimError::UnknownExecutor(executor.to_string()))?;
    let (s, u) = update_prompt_prompt(engine, state, exec, gradients, num_samples)?;
    let req = engine.client.meta_request(PurposeTag::OptimCall, &s, &u);
    let (update, _) = engine
        .client
        .complete_json::<PromptUpdate>(&req)
        .map_err(|e| skipped(engine, &format!("prompt update for {executor}"), e))?;
    if update.updated_prompt.trim().is_empty() {
        engine
            .client
            .ledger()
            .note("update_skipped", format!("prompt update for {executor}: empty updated_prompt"));
        return Err(OptimError::Skipped("empty updated_prompt".into()));
    }
    let next = state
        .with_prompt(executor, update.updated_prompt.clone())
        .expect("executor exists");
    Ok((next, update))
}

pub fn update_workflow_prompt(
    engine: &Engine,
    state: &WorkflowState,
    gradients: &[TextualGradient],
    num_samples: usize,
    metrics_info: &str,
) -> Result<(String, String), OptimError> {
    let vars = BTreeMap::from([
        ("metrics_info", metrics_info.to_string()),
        ("available_tools", engine.tools.describe()),
        ("current_workflow", render_sketch_table(state)),
        ("current_agents", render_agents(state)),
        ("num_samples", num_samples.to_string()),
        ("aggregated_gradients", aggregate_gradients(gradients)),
        ("output_format_instruction", OUTPUT_FORMAT_INSTRUCTION.to_string()),
    ]);
    let p = engine.templates.render(TemplateId::OptimWorkflow, &vars).map_err(template_err)?;
    Ok((p.system, p.user))
}

/// Outer-loop step. Either applies the whole plan or leaves `state` as is.
pub fn update_workflow(
    engine: &Engine,
    state: &WorkflowState,
    gradients: &[TextualGradient],
    num_samples: usize,
    sample_questions: &[String],
    metrics_info: &str,
) -> Result<(WorkflowState, PlanDecision), OptimError> {
    if gradients.is_empty() || num_samples == 0 {
        return Err(OptimError::EmptyBatch);
    }
    let (s, u) = update_workflow_prompt(engine, state, gradients, num_samples, metrics_info)?;
    let req = engine.client.meta_request(PurposeTag::OptimWorkflow, &s, &u);
    let (mut decision, _) = engine
        .client
        .complete_json::<PlanDecision>(&req)
        .map_err(|e| skipped(engine, "workflow update", e))?;
    if !decision.should_update {
        decision.plan.clear();
        return Ok((state.clone(), decision));
    }
    let next = apply_plan(engine, state, &decision.plan, sample_questions)?;
    Ok((next, decision))
}

fn check_plan(engine: &Engine, state: &WorkflowState, plan: &[PlanStep]) -> Result<(), OptimError> {
    let invalid = |m: String| Err(OptimError::PlanInvalid(m));
    if plan.is_empty() {
        return invalid("should_update is true but the plan is empty".into());
    }
    if plan.len() > engine.settings.max_steps {
        return invalid(format!("{} steps exceed the cap of {}", plan.len(), engine.settings.max_steps));
    }
    for (i, p) in plan.iter().enumerate() {
        if p.step_id != i as u32 + 1 {
            return invalid(format!("step ids must be contiguous from 1; position {} has {}", i + 1, p.step_id));
        }
        if let Some(t) = p.tools.iter().find(|t| engine.tools.get(t).is_none()) {
            return invalid(format!("step {} uses unregistered tool {t:?}", p.step_id));
        }
        if p.executor_type == PlanExecutorType::Reuse {
            let Some(e) = state.executors.get(&p.executor_name) else {
                return invalid(format!("step {} reuses unknown executor {:?}", p.step_id, p.executor_name));
            };
            if ExecutorKind::for_tools(&p.tools) != e.kind {
                return invalid(format!(
                    "step {} attaches {} {:?} to a step with tools {}",
                    p.step_id,
                    e.kind.as_str(),
                    e.name,
                    render_tools(&p.tools)
                ));
            }
        }
    }
    Ok(())
}

/// Validates `plan`, initializes its new executors and builds the new state.
pub fn apply_plan(
    engine: &Engine,
    state: &WorkflowState,
    plan: &[PlanStep],
    sample_questions: &[String],
) -> Result<WorkflowState, OptimError> {
    check_plan(engine, state, plan)?;
    let mut created: BTreeMap<String, ExecutorSpec> = BTreeMap::new();
    let mut renamed: BTreeMap<String, String> = BTreeMap::new();
    let mut sketch = Vec::with_capacity(plan.len());
    for p in plan {
        let name = match p.executor_type {
            PlanExecutorType::Reuse => p.executor_name.clone(),
            PlanExecutorType::New => match renamed.get(&p.executor_name) {
                Some(n) => n.clone(),
                None => {
                    let reserved: BTreeSet<String> = created.keys().cloned().collect();
                    let exec = init_executor(engine, state, p, sample_questions, &reserved)?;
                    let n = exec.name.clone();
                    renamed.insert(p.executor_name.clone(), n.clone());
                    created.insert(n.clone(), exec);
                    n
                }
            },
        };
        if let Some(e) = created.get(&name) {
            if ExecutorKind::for_tools(&p.tools) != e.kind {
                return Err(OptimError::PlanInvalid(format!(
                    "new executor {name:?} is shared by steps with different tool sets"
                )));
            }
        }
        let guideline = match p.executor_type {
            PlanExecutorType::Reuse => String::new(),
            PlanExecutorType::New => p.generation_guideline.clone(),
        };
        sketch.push(StepSpec {
            step_id: p.step_id,
            description: p.description.clone(),
            executor_name: name,
            tool_names: p.tools.clone(),
            control: p.control.clone(),
            generation_guideline: guideline,
        });
    }
    let next = state.with_sketch(sketch, created.into_values().collect());
    let violations = engine.validate(&next);
    if !violations.is_empty() {
        let codes: Vec<&str> = violations.iter().map(|v| v.code()).collect();
        return Err(OptimError::PlanInvalid(format!("resulting state is invalid: {}", codes.join(", "))));
    }
    Ok(next)
}

#[derive(Deserialize)]
struct InitReply {
    #[serde(default)]
    name: String,
    #[serde(default, rename = "type")]
    kind: String,
    #[serde(default)]
    description: String,
    prompt: String,
}

pub fn init_executor_prompt(
    engine: &Engine,
    step: &PlanStep,
    sample_questions: &[String],
) -> Result<(String, String), OptimError> {
    let questions = sample_questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let guideline = if step.generation_guideline.trim().is_empty() {
        step.description.clone()
    } else {
        step.generation_guideline.clone()
    };
    let vars = BTreeMap::from([
        ("step_id", step.step_id.to_string()),
        ("step_description", step.description.clone()),
        ("tools", render_tools(&step.tools)),
        ("generation_guideline", guideline),
        ("questions", questions),
    ]);
    let p = engine.templates.render(TemplateId::InitExecutor, &vars).map_err(template_err)?;
    Ok((p.system, p.user))
}

/// Writes the first prompt for a `new` plan step. The plan's tools decide the
/// executor kind; the name is made unique against `state` and `reserved`.
pub fn init_executor(
    engine: &Engine,
    state: &WorkflowState,
    step: &PlanStep,
    sample_questions: &[String],
    reserved: &BTreeSet<String>,
) -> Result<ExecutorSpec, OptimError> {
    let (s, u) = init_executor_prompt(engine, step, sample_questions)?;
    let req = engine.client.meta_request(PurposeTag::InitExecutor, &s, &u);
    let (reply, _) = engine.client.complete_json::<InitReply>(&req).map_err(|e| {
        if e.is_fatal() {
            OptimError::Fatal(e)
        } else {
            OptimError::InitFailed {
                step_id: step.step_id,
                message: e.to_string(),
            }
        }
    })?;
    if reply.prompt.trim().is_empty() {
        return Err(OptimError::InitFailed {
            step_id: step.step_id,
            message: "empty prompt".into(),
        });
    }
    let kind = ExecutorKind::for_tools(&step.tools);
    if let Some(k) = ExecutorKind::parse(&reply.kind) {
        if k != kind {
            engine.client.ledger().note(
                "executor_kind_override",
                format!("step {}: model said {}, tools imply {}", step.step_id, k.as_str(), kind.as_str()),
            );
        }
    }
    let base = [step.executor_name.as_str(), reply.name.as_str()]
        .into_iter()
        .find(|n| is_identifier(n))
        .map(str::to_string)
        .unwrap_or_else(|| sanitize_identifier(&reply.name));
    let name = state.unique_executor_name(&base, reserved);
    Ok(ExecutorSpec {
        name,
        kind,
        description: if reply.description.trim().is_empty() {
            step.description.clone()
        } else {
            reply.description
        },
        prompt: reply.prompt,
        tool_names: step.tools.clone(),
        version: 0,
    })
}

fn sanitize_identifier(s: &str) -> String {
    let out: String = s.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
    if out.is_empty() {
        "Executor".into()
    } else {
        out
    }
}

/// Single-step placeholder used as the starting point of bootstrap.
pub fn bootstrap_seed_state() -> WorkflowState {
    WorkflowState::new(
        vec![StepSpec::new(1, "Answer the question directly", BOOTSTRAP_EXECUTOR)],
        vec![ExecutorSpec::llm(
            BOOTSTRAP_EXECUTOR,
            "Answers with no instruction (bootstrap only)",
            "(no instruction)",
        )],
    )
}

/// Builds an initial workflow from instruction-free model answers.
pub fn bootstrap_workflow(engine: &Engine, batch: &[Sample], metric: &Metric) -> Result<WorkflowState, OptimError> {
    if batch.is_empty() {
        return Err(OptimError::BootstrapFailed("empty batch".into()));
    }
    let seed = bootstrap_seed_state();
    let metrics_info = metric.info();
    let mut gradients = Vec::new();
    for sample in batch {
        let req = engine
            .client
            .executor_request(PurposeTag::Bootstrap, vec![Message::user(sample.question.clone())]);
        let resp = engine.client.complete(&req).map_err(|e| {
            if e.is_fatal() {
                OptimError::Fatal(e)
            } else {
                OptimError::BootstrapFailed(e.to_string())
            }
        })?;
        let trace = ExecutionTrace {
            sample_id: sample.id.clone(),
            question: sample.question.clone(),
            records: vec![StepRecord {
                step_id: 1,
                executor_name: BOOTSTRAP_EXECUTOR.into(),
                iteration: 1,
                input_text: sample.question.clone(),
                output_text: resp.content.clone(),
                tool_invocations: Vec::new(),
                token_usage: TokenUsage {
                    input_tokens: resp.input_tokens,
                    output_tokens: resp.output_tokens,
                },
                wall_time_ms: resp.latency_ms,
                error: None,
                warnings: Vec::new(),
            }],
            final_output: resp.content,
            failure: None,
        };
        let eval = metric
            .score(engine, &trace.final_output, &sample.answer)
            .map_err(|e| if e.is_fatal() { OptimError::Fatal(e) } else { OptimError::BootstrapFailed(e.to_string()) })?;
        match grad_workflow(engine, &seed, &trace, sample, &eval, &metrics_info) {
            Ok(g) => gradients.push(g),
            Err(GradError::Fatal(e)) => return Err(OptimError::Fatal(e)),
            Err(e) => engine
                .client
                .ledger()
                .note("gradient_unavailable", format!("bootstrap sample {}: {e}", sample.id)),
        }
    }
    if gradients.is_empty() {
        return Err(OptimError::BootstrapFailed("no workflow gradient was produced".into()));
    }
    let questions: Vec<String> = batch.iter().map(|s| s.question.clone()).collect();
    let (s, u) = update_workflow_prompt(engine, &seed, &gradients, batch.len(), &metrics_info)?;
    let req = engine.client.meta_request(PurposeTag::OptimWorkflow, &s, &u);
    let (decision, _) = engine.client.complete_json::<PlanDecision>(&req).map_err(|e| {
        if e.is_fatal() {
            OptimError::Fatal(e)
        } else {
            OptimError::BootstrapFailed(e.to_string())
        }
    })?;
    // The seed has nothing worth keeping, so the plan is applied even when the
    // model asks to keep it.
    if !decision.should_update {
        engine
            .client
            .ledger()
            .note("bootstrap", "plan returned should_update=false; applying it anyway");
    }
    let plan: Vec<PlanStep> = decision
        .plan
        .into_iter()
        .filter(|p| !(p.executor_type == PlanExecutorType::Reuse && p.executor_name == BOOTSTRAP_EXECUTOR))
        .collect();
    if plan.is_empty() {
        return Err(OptimError::BootstrapFailed("the plan has no usable steps".into()));
    }
    let mut state = apply_plan(engine, &seed, &plan, &questions).map_err(|e| match e {
        OptimError::Fatal(e) => OptimError::Fatal(e),
        other => OptimError::BootstrapFailed(other.to_string()),
    })?;
    state.executors.remove(BOOTSTRAP_EXECUTOR);
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointPromptUpdate {
    pub executor_name: String,
    pub updated_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointUpdate {
    pub updated_prompts: Vec<JointPromptUpdate>,
    #[serde(default)]
    pub reasoning: String,
}

/// Every live executor's prompt from one meta call.
pub fn update_prompts_joint(
    engine: &Engine,
    state: &WorkflowState,
    gradients: &BTreeMap<String, Vec<TextualGradient>>,
    num_samples: usize,
) -> Result<(WorkflowState, Vec<String>), OptimError> {
    if gradients.values().all(Vec::is_empty) || num_samples == 0 {
        return Err(OptimError::EmptyBatch);
    }
    let names: Vec<String> = gradients
        .iter()
        .filter(|(_, g)| !g.is_empty())
        .map(|(n, _)| n.clone())
        .collect();
    let aggregated = gradients
        .iter()
        .filter(|(_, g)| !g.is_empty())
        .map(|(n, g)| format!("## Agent {n}\n\n{}", aggregate_gradients(g)))
        .collect::<Vec<_>>()
        .join("\n\n");
    let vars = BTreeMap::from([
        ("workflow_structure", render_sketch_table(state)),
        ("current_prompts", render_prompts(state)),
        ("num_samples", num_samples.to_string()),
        ("aggregated_gradients", aggregated),
        ("executor_names", names.join(", ")),
    ]);
    let p = engine.templates.render(TemplateId::JointUpdate, &vars).map_err(template_err)?;
    let req = engine.client.meta_request(PurposeTag::OptimCall, &p.system, &p.user);
    let (reply, _) = engine
        .client
        .complete_json::<JointUpdate>(&req)
        .map_err(|e| skipped(engine, "joint prompt update", e))?;
    let mut next = state.clone();
    let mut updated = Vec::new();
    for u in reply.updated_prompts {
        if !names.contains(&u.executor_name) || u.updated_prompt.trim().is_empty() || updated.contains(&u.executor_name) {
            continue;
        }
        next = next.with_prompt(&u.executor_name, u.updated_prompt).expect("live executor");
        updated.push(u.executor_name);
    }
    Ok((next, updated))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleLayerStep {
    pub step_id: u32,
    pub description: String,
    #[serde(default)]
    pub tools: Vec<String>,
    pub executor_name: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleLayerDecision {
    #[serde(default)]
    pub reasoning: String,
    pub should_update: bool,
    #[serde(default, rename = "updated_execution_plan")]
    pub plan: Vec<SingleLayerStep>,
}

/// Structure and prompts rewritten together from whole-workflow gradients.
pub fn update_single_layer(
    engine: &Engine,
    state: &WorkflowState,
    gradients: &[TextualGradient],
    num_samples: usize,
    metrics_info: &str,
) -> Result<(WorkflowState, SingleLayerDecision), OptimError> {
    if gradients.is_empty() || num_samples == 0 {
        return Err(OptimError::EmptyBatch);
    }
    let vars = BTreeMap::from([
        ("metrics_info", metrics_info.to_string()),
        ("available_tools", engine.tools.describe()),
        ("current_prompts", render_prompts(state)),
        ("num_samples", num_samples.to_string()),
        ("aggregated_gradients", aggregate_gradients(gradients)),
    ]);
    let p = engine.templates.render(TemplateId::SingleLayerUpdate, &vars).map_err(template_err)?;
    let req = engine.client.meta_request(PurposeTag::OptimWorkflow, &p.system, &p.user);
    let (mut decision, _) = engine
        .client
        .complete_json::<SingleLayerDecision>(&req)
        .map_err(|e| skipped(engine, "single-layer update", e))?;
    if !decision.should_update {
        decision.plan.clear();
        return Ok((state.clone(), decision));
    }
    if decision.plan.is_empty() || decision.plan.len() > engine.settings.max_steps {
        return Err(OptimError::PlanInvalid(format!("plan has {} steps", decision.plan.len())));
    }
    let mut next = state.clone();
    let mut new_execs: BTreeMap<String, ExecutorSpec> = BTreeMap::new();
    let mut prompt_changed = false;
    let mut sketch = Vec::new();
    for (i, p) in decision.plan.iter().enumerate() {
        if p.step_id != i as u32 + 1 {
            return Err(OptimError::PlanInvalid("step ids must be contiguous from 1".into()));
        }
        if p.prompt.trim().is_empty() {
            return Err(OptimError::PlanInvalid(format!("step {} has an empty prompt", p.step_id)));
        }
        let kind = ExecutorKind::for_tools(&p.tools);
        let name = match next.executors.get_mut(&p.executor_name) {
            Some(e) if e.kind == kind && e.tool_names == p.tools => {
                if e.prompt != p.prompt {
                    e.prompt = p.prompt.clone();
                    e.version += 1;
                    prompt_changed = true;
                }
                e.name.clone()
            }
            _ => match new_execs.get(&p.executor_name) {
                Some(e) if e.kind == kind => e.name.clone(),
                _ => {
                    let base = sanitize_identifier(&p.executor_name);
                    let reserved: BTreeSet<String> = new_execs.keys().cloned().collect();
                    let name = next.unique_executor_name(&base, &reserved);
                    new_execs.insert(
                        name.clone(),
                        ExecutorSpec {
                            name: name.clone(),
                            kind,
                            description: p.description.clone(),
                            prompt: p.prompt.clone(),
                            tool_names: p.tools.clone(),
                            version: 0,
                        },
                    );
                    name
                }
            },
        };
        let mut step = StepSpec::new(p.step_id, p.description.clone(), name);
        step.tool_names = p.tools.clone();
        sketch.push(step);
    }
    let structural = sketch != state.sketch || !new_execs.is_empty();
    if structural {
        next = next.with_sketch(sketch, new_execs.into_values().collect());
    } else if prompt_changed {
        next.revision += 1;
    }
    let violations = engine.validate(&next);
    if !violations.is_empty() {
        let codes: Vec<&str> = violations.iter().map(|v| v.code()).collect();
        return Err(OptimError::PlanInvalid(codes.join(", ")));
    }
    Ok((next, decision))
}
