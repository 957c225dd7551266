//! Textual gradients: loss-level, chain-rule, workflow-level, plus the
//! joint and single-layer variants used by the ablation modes.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::engine::Engine;
use crate::evaluation::{EvalResult, Sample};
use crate::llm::{LlmError, PurposeTag};
use crate::prompts::{with_sketch_section, TemplateId};
use crate::workflow_model::{
    render_sketch_table, ExecutionTrace, ExecutorSpec, StepRecord, TextualGradient, WorkflowState,
};

pub const TRUNCATION_MARKER: &str = "\n[... truncated]";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    /// The meta model never produced a usable gradient; the sample is skipped.
    #[error("gradient unavailable ({purpose}): {source}")]
    Unavailable {
        purpose: PurposeTag,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Fatal(LlmError),
    #[error("{0}")]
    Precondition(String),
}

impl GradError {
    fn from_llm(purpose: PurposeTag, e: LlmError) -> Self {
        if e.is_fatal() {
            GradError::Fatal(e)
        } else {
            GradError::Unavailable { purpose, source: e }
        }
    }
}

/// Truncates to at most `cap` characters, marker included.
pub fn cap_text(text: &str, cap: usize) -> String {
    if text.chars().count() <= cap {
        return text.to_string();
    }
    let keep = cap.saturating_sub(TRUNCATION_MARKER.chars().count());
    let mut out: String = text.chars().take(keep).collect();
    out.push_str(TRUNCATION_MARKER);
    out
}

pub fn render_tools(tools: &[String]) -> String {
    serde_json::to_string(tools).expect("string list")
}

/// Step-by-step trace text for meta prompts.
pub fn render_trace(trace: &ExecutionTrace) -> String {
    let mut out = String::new();
    for r in &trace.records {
        out.push_str(&format!("### Step {} ({})", r.step_id, r.executor_name));
        if r.iteration > 1 {
            out.push_str(&format!(" iteration {}", r.iteration));
        }
        out.push('\n');
        for inv in &r.tool_invocations {
            out.push_str(&format!("Tool call {}(\"{}\") returned:\n{}\n", inv.tool, inv.query, inv.result));
        }
        if let Some(e) = &r.error {
            out.push_str(&format!("ERROR: {e}\n"));
        } else {
            out.push_str(&format!("Output:\n{}\n", r.output_text));
        }
        for w in &r.warnings {
            out.push_str(&format!("Warning: {w}\n"));
        }
        out.push('\n');
    }
    if let Some(f) = &trace.failure {
        out.push_str(&format!("Execution stopped at step {}: {}\n", f.step_id, f.message));
    } else {
        out.push_str(&format!("Final output: {}\n", trace.final_output));
    }
    out.trim_end().to_string()
}

pub fn render_prompts(state: &WorkflowState) -> String {
    let mut out = String::new();
    for s in &state.sketch {
        let Some(e) = state.executors.get(&s.executor_name) else {
            continue;
        };
        out.push_str(&format!(
            "### Step {}: {}\nExecutor: {} ({}), tools: {}\nPrompt:\n{}\n\n",
            s.step_id,
            s.description,
            e.name,
            e.kind.as_str(),
            render_tools(&e.tool_names),
            e.prompt
        ));
    }
    out.trim_end().to_string()
}

#[derive(Deserialize)]
struct GradReply {
    text_gradient: String,
}

#[derive(Deserialize)]
struct WorkflowGradReply {
    #[serde(default)]
    reasoning: String,
    text_gradient: String,
}

#[derive(Deserialize)]
struct JointEntry {
    step_id: u32,
    text_gradient: String,
}

#[derive(Deserialize)]
struct JointReply {
    gradients: Vec<JointEntry>,
}

fn executor_of<'a>(state: &'a WorkflowState, record: &StepRecord) -> Result<&'a ExecutorSpec, GradError> {
    state
        .executors
        .get(&record.executor_name)
        .ok_or_else(|| GradError::Precondition(format!("executor {:?} is not in the state", record.executor_name)))
}

fn step_output(record: &StepRecord) -> String {
    match &record.error {
        Some(e) => format!("(step failed: {e})"),
        None => record.output_text.clone(),
    }
}

fn meta_call<T: for<'de> Deserialize<'de>>(
    engine: &Engine,
    purpose: PurposeTag,
    system: &str,
    user: &str,
) -> Result<T, GradError> {
    let req = engine.client.meta_request(purpose, system, user);
    engine
        .client
        .complete_json::<T>(&req)
        .map(|(v, _)| v)
        .map_err(|e| GradError::from_llm(purpose, e))
}

fn render(engine: &Engine, id: TemplateId, vars: &BTreeMap<&str, String>) -> Result<(String, String), GradError> {
    let p = engine
        .templates
        .render(id, vars)
        .map_err(|e| GradError::Precondition(e.to_string()))?;
    Ok((p.system, p.user))
}

/// User prompt for the final-step gradient; exposed for prompt checks.
pub fn grad_loss_prompt(
    engine: &Engine,
    state: &WorkflowState,
    record: &StepRecord,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<(String, String), GradError> {
    let exec = executor_of(state, record)?;
    let description = state.step(record.step_id).map(|s| s.description.clone()).unwrap_or_default();
    let vars = BTreeMap::from([
        ("question", sample.question.clone()),
        ("ground_truth", sample.answer.clone()),
        ("metrics_info", metrics_info.to_string()),
        ("step_id", record.step_id.to_string()),
        ("step_description", description),
        ("executor_name", exec.name.clone()),
        ("executor_tools", render_tools(&exec.tool_names)),
        ("step_input", record.input_text.clone()),
        ("step_output", step_output(record)),
        ("evaluation_result", eval.feedback.clone()),
    ]);
    let (s, u) = render(engine, TemplateId::GradLoss, &vars)?;
    Ok((s, with_sketch_section(u, &render_sketch_table(state))))
}

/// g_K for the last executed step.
pub fn grad_loss(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<TextualGradient, GradError> {
    let record = trace
        .records
        .last()
        .ok_or_else(|| GradError::Precondition("trace has no records".into()))?;
    let (s, u) = grad_loss_prompt(engine, state, record, sample, eval, metrics_info)?;
    let reply: GradReply = meta_call(engine, PurposeTag::GradLoss, &s, &u)?;
    Ok(TextualGradient::step(
        record.step_id,
        cap_text(&reply.text_gradient, engine.settings.gradient_char_cap),
        &sample.id,
    ))
}

pub fn grad_backprop_prompt(
    engine: &Engine,
    state: &WorkflowState,
    record: &StepRecord,
    prev_step: u32,
    next: &StepRecord,
    next_gradient: &TextualGradient,
    question: &str,
) -> Result<(String, String), GradError> {
    let exec = executor_of(state, record)?;
    let desc = |id| state.step(id).map(|s| s.description.clone()).unwrap_or_default();
    let vars = BTreeMap::from([
        ("question", question.to_string()),
        ("step_id", record.step_id.to_string()),
        ("prev_step", prev_step.to_string()),
        ("step_description", desc(record.step_id)),
        ("executor_name", exec.name.clone()),
        ("executor_tools", render_tools(&exec.tool_names)),
        ("step_input", record.input_text.clone()),
        ("step_output", step_output(record)),
        ("next_step_id", next.step_id.to_string()),
        ("next_step_description", desc(next.step_id)),
        ("next_step_output", step_output(next)),
        ("next_gradient", next_gradient.text.clone()),
    ]);
    let (s, u) = render(engine, TemplateId::GradBackprop, &vars)?;
    Ok((s, with_sketch_section(u, &render_sketch_table(state))))
}

/// g_k from g_{k+1} by the chain rule. `k` and `next_gradient` must refer
/// to consecutive executed steps.
pub fn grad_backprop(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    k: u32,
    next_gradient: &TextualGradient,
) -> Result<TextualGradient, GradError> {
    let chain = executed_chain(trace);
    let pos = chain
        .iter()
        .position(|r| r.step_id == k)
        .ok_or_else(|| GradError::Precondition(format!("step {k} was not executed")))?;
    let next = chain
        .get(pos + 1)
        .ok_or_else(|| GradError::Precondition(format!("step {k} is the last executed step")))?;
    if next_gradient.step_id() != Some(next.step_id) {
        return Err(GradError::Precondition(format!(
            "next gradient must be scoped to step {}",
            next.step_id
        )));
    }
    let prev_step = if pos == 0 { 0 } else { chain[pos - 1].step_id };
    let (s, u) = grad_backprop_prompt(engine, state, chain[pos], prev_step, next, next_gradient, &trace.question)?;
    let reply: GradReply = meta_call(engine, PurposeTag::GradCall, &s, &u)?;
    Ok(TextualGradient::step(
        k,
        cap_text(&reply.text_gradient, engine.settings.gradient_char_cap),
        &trace.sample_id,
    ))
}

/// Last record of each executed step, in execution order.
fn executed_chain(trace: &ExecutionTrace) -> Vec<&StepRecord> {
    let mut out: Vec<&StepRecord> = Vec::new();
    for r in &trace.records {
        match out.iter().position(|x| x.step_id == r.step_id) {
            Some(i) => out[i] = r,
            None => out.push(r),
        }
    }
    out
}

fn synthesized_for_skipped(state: &WorkflowState, trace: &ExecutionTrace, out: &mut BTreeMap<u32, TextualGradient>) {
    for s in &state.sketch {
        if out.contains_key(&s.step_id) {
            continue;
        }
        let text = match &trace.failure {
            Some(f) if s.step_id > f.step_id => {
                format!("Step {} was not executed because of an upstream failure at step {}.", s.step_id, f.step_id)
            }
            _ => format!("Step {} was not executed on this sample (skipped by routing); no change suggested.", s.step_id),
        };
        let mut g = TextualGradient::step(s.step_id, text, &trace.sample_id);
        g.synthesized = true;
        out.insert(s.step_id, g);
    }
}

/// Layer-by-layer backward pass: g_K first, then K-1 down to 1. Returns one
/// gradient per sketch step; steps that never ran get synthesized text
/// without a meta call.
pub fn backward(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<BTreeMap<u32, TextualGradient>, GradError> {
    let chain = executed_chain(trace);
    let mut out = BTreeMap::new();
    if chain.is_empty() {
        return Err(GradError::Precondition("trace has no records".into()));
    }
    let last = chain[chain.len() - 1];
    let (s, u) = grad_loss_prompt(engine, state, last, sample, eval, metrics_info)?;
    let reply: GradReply = meta_call(engine, PurposeTag::GradLoss, &s, &u)?;
    let mut next = TextualGradient::step(
        last.step_id,
        cap_text(&reply.text_gradient, engine.settings.gradient_char_cap),
        &sample.id,
    );
    out.insert(last.step_id, next.clone());
    for pos in (0..chain.len() - 1).rev() {
        let prev_step = if pos == 0 { 0 } else { chain[pos - 1].step_id };
        let (s, u) = grad_backprop_prompt(engine, state, chain[pos], prev_step, chain[pos + 1], &next, &sample.question)?;
        let reply: GradReply = meta_call(engine, PurposeTag::GradCall, &s, &u)?;
        next = TextualGradient::step(
            chain[pos].step_id,
            cap_text(&reply.text_gradient, engine.settings.gradient_char_cap),
            &sample.id,
        );
        out.insert(chain[pos].step_id, next.clone());
    }
    synthesized_for_skipped(state, trace, &mut out);
    Ok(out)
}

/// All step gradients from one meta call (no layer-by-layer chain).
pub fn backward_joint(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<BTreeMap<u32, TextualGradient>, GradError> {
    let chain = executed_chain(trace);
    let ids: Vec<String> = chain.iter().map(|r| r.step_id.to_string()).collect();
    let vars = BTreeMap::from([
        ("question", sample.question.clone()),
        ("ground_truth", sample.answer.clone()),
        ("metrics_info", metrics_info.to_string()),
        ("evaluation_result", eval.feedback.clone()),
        ("workflow_structure", render_sketch_table(state)),
        ("execution_trace", render_trace(trace)),
        ("step_ids", ids.join(", ")),
    ]);
    let (s, u) = render(engine, TemplateId::JointGrad, &vars)?;
    let reply: JointReply = meta_call(engine, PurposeTag::GradLoss, &s, &u)?;
    let mut out = BTreeMap::new();
    for g in reply.gradients {
        if chain.iter().any(|r| r.step_id == g.step_id) && !g.text_gradient.trim().is_empty() {
            out.entry(g.step_id).or_insert_with(|| {
                TextualGradient::step(
                    g.step_id,
                    cap_text(&g.text_gradient, engine.settings.gradient_char_cap),
                    &sample.id,
                )
            });
        }
    }
    for r in &chain {
        out.entry(r.step_id).or_insert_with(|| {
            let mut g = TextualGradient::step(r.step_id, "No gradient was returned for this step.", &sample.id);
            g.synthesized = true;
            g
        });
    }
    synthesized_for_skipped(state, trace, &mut out);
    Ok(out)
}

pub fn grad_workflow_prompt(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<(String, String), GradError> {
    let vars = BTreeMap::from([
        ("question", sample.question.clone()),
        ("ground_truth", sample.answer.clone()),
        ("evaluation_result", eval.feedback.clone()),
        ("metrics_info", metrics_info.to_string()),
        ("available_tools", engine.tools.describe()),
        ("workflow_structure", render_sketch_table(state)),
        ("execution_trace", render_trace(trace)),
    ]);
    render(engine, TemplateId::GradWorkflow, &vars)
}

/// g_W: feedback on the sketch itself. Partial traces are fine.
pub fn grad_workflow(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<TextualGradient, GradError> {
    let (s, u) = grad_workflow_prompt(engine, state, trace, sample, eval, metrics_info)?;
    let reply: WorkflowGradReply = meta_call(engine, PurposeTag::GradWorkflow, &s, &u)?;
    let reasoning = (!reply.reasoning.trim().is_empty()).then_some(reply.reasoning);
    Ok(TextualGradient::workflow(
        cap_text(&reply.text_gradient, engine.settings.gradient_char_cap),
        reasoning,
        &sample.id,
    ))
}

/// The whole workflow as one layer: one gradient covering steps and prompts.
pub fn grad_single_layer(
    engine: &Engine,
    state: &WorkflowState,
    trace: &ExecutionTrace,
    sample: &Sample,
    eval: &EvalResult,
    metrics_info: &str,
) -> Result<TextualGradient, GradError> {
    let vars = BTreeMap::from([
        ("question", sample.question.clone()),
        ("ground_truth", sample.answer.clone()),
        ("metrics_info", metrics_info.to_string()),
        ("available_tools", engine.tools.describe()),
        ("current_prompts", render_prompts(state)),
        ("execution_trace", render_trace(trace)),
        ("evaluation_result", eval.feedback.clone()),
    ]);
    let (s, u) = render(engine, TemplateId::SingleLayerGrad, &vars)?;
    let reply: GradReply = meta_call(engine, PurposeTag::GradLoss, &s, &u)?;
    Ok(TextualGradient::workflow(
        cap_text(&reply.text_gradient, engine.settings.gradient_char_cap),
        None,
        &sample.id,
    ))
}
