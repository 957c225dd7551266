//! Forward pass: runs every step of a sketch over one sample.

use crate::engine::Engine;
use crate::evaluation::Sample;
use crate::llm::{LlmError, Message, PurposeTag};
use crate::tools::{run_tool_step, ToolFault};
use crate::workflow_model::{
    Control, ExecutionTrace, ExecutorKind, StepFailure, StepRecord, StepSpec, TokenUsage, ToolInvocation, WorkflowState,
};

pub use crate::tools::TOOL_RESULT_HEADER;

pub const QUESTION_HEADER: &str = "## Question";
pub const CONTEXT_HEADER: &str = "## Context";
pub const PREVIOUS_OUTPUT_HEADER: &str = "## Previous Step Output";

/// The user message of one step. The previous output is always the final
/// section, so it appears verbatim at the end of the document.
pub fn render_envelope(question: &str, previous_output: &str, step: &StepSpec) -> String {
    render_envelope_with_context(question, None, previous_output, step)
}

pub fn render_envelope_with_context(
    question: &str,
    context: Option<&str>,
    previous_output: &str,
    step: &StepSpec,
) -> String {
    let mut out = format!("## Step {}: {}\n", step.step_id, step.description);
    if !step.generation_guideline.trim().is_empty() {
        out.push_str(&format!("Guideline: {}\n", step.generation_guideline.trim()));
    }
    out.push_str(&format!("\n{QUESTION_HEADER}\n{question}\n\n"));
    if let Some(ctx) = context.filter(|c| !c.trim().is_empty()) {
        out.push_str(&format!("{CONTEXT_HEADER}\n{ctx}\n\n"));
    }
    out.push_str(&format!("{PREVIOUS_OUTPUT_HEADER}\n{previous_output}"));
    out
}

/// Previous-output section of an envelope (best effort; used by mocks).
pub fn envelope_previous_output(envelope: &str) -> &str {
    let marker = format!("{PREVIOUS_OUTPUT_HEADER}\n");
    envelope.find(&marker).map(|i| &envelope[i + marker.len()..]).unwrap_or("")
}

/// Question section of an envelope (best effort; used by mocks).
pub fn envelope_question(envelope: &str) -> &str {
    let marker = format!("{QUESTION_HEADER}\n");
    let Some(start) = envelope.find(&marker).map(|i| i + marker.len()) else {
        return "";
    };
    let rest = &envelope[start..];
    let end = [CONTEXT_HEADER, PREVIOUS_OUTPUT_HEADER]
        .iter()
        .filter_map(|h| rest.find(&format!("\n\n{h}\n")))
        .min()
        .unwrap_or(rest.len());
    &rest[..end]
}

/// Label from a leading `ROUTE: <label>` line.
pub fn parse_route_label(output: &str) -> Option<&str> {
    let first = output.lines().find(|l| !l.trim().is_empty())?;
    let label = first.trim().strip_prefix("ROUTE:")?.trim();
    (!label.is_empty()).then_some(label)
}

pub fn has_sentinel(output: &str, sentinel: &str) -> bool {
    output.lines().any(|l| l.trim() == sentinel)
}

fn control_instruction(step: &StepSpec, sentinel: &str) -> String {
    match &step.control {
        Control::Sequential => String::new(),
        Control::Route { routes } => {
            let labels: Vec<&str> = routes.keys().map(String::as_str).collect();
            format!(
                "Begin your reply with a line `ROUTE: <label>` where <label> is one of: {}.",
                labels.join(", ")
            )
        }
        Control::Loop { .. } => {
            format!("When your result is final, include a line `{sentinel}`. Otherwise your output is fed back to you for another pass.")
        }
    }
}

struct StepOutcome {
    output: String,
    usage: TokenUsage,
    latency_ms: u64,
    invocations: Vec<ToolInvocation>,
    error: Option<String>,
    warnings: Vec<String>,
}

fn run_one(engine: &Engine, state: &WorkflowState, step: &StepSpec, envelope: &str) -> Result<StepOutcome, LlmError> {
    let Some(executor) = state.executors.get(&step.executor_name) else {
        return Ok(StepOutcome {
            output: String::new(),
            usage: TokenUsage::default(),
            latency_ms: 0,
            invocations: Vec::new(),
            error: Some(format!("executor {:?} is not registered", step.executor_name)),
            warnings: Vec::new(),
        });
    };
    let extra = control_instruction(step, &engine.settings.done_sentinel);
    let result = match executor.kind {
        ExecutorKind::Tool => {
            run_tool_step(&engine.client, &engine.tools, &engine.templates, executor, &extra, envelope).map(|o| {
                let (error, warnings) = match o.fault {
                    None => (None, Vec::new()),
                    Some(ToolFault::RoundLimitExceeded) => (
                        None,
                        vec![format!("tool round limit reached; kept last model text")],
                    ),
                    Some(ToolFault::UnknownTool(t)) => (Some(format!("unknown tool {t:?}")), Vec::new()),
                };
                StepOutcome {
                    output: o.output,
                    usage: o.usage,
                    latency_ms: o.latency_ms,
                    invocations: o.invocations,
                    error,
                    warnings,
                }
            })
        }
        ExecutorKind::Llm => {
            let mut system = executor.prompt.trim_end().to_string();
            if !extra.is_empty() {
                system.push_str("\n\n");
                system.push_str(&extra);
            }
            let req = engine
                .client
                .executor_request(PurposeTag::Forward, vec![Message::system(system), Message::user(envelope)]);
            engine.client.complete(&req).map(|r| StepOutcome {
                output: r.content,
                usage: TokenUsage {
                    input_tokens: r.input_tokens,
                    output_tokens: r.output_tokens,
                },
                latency_ms: r.latency_ms,
                invocations: Vec::new(),
                error: None,
                warnings: Vec::new(),
            })
        }
    };
    match result {
        Ok(o) => Ok(o),
        Err(e) if e.is_fatal() => Err(e),
        Err(e) => Ok(StepOutcome {
            output: String::new(),
            usage: TokenUsage::default(),
            latency_ms: 0,
            invocations: Vec::new(),
            error: Some(e.to_string()),
            warnings: Vec::new(),
        }),
    }
}

/// Runs `state` on `sample`. Step failures produce a partial trace with a
/// failure marker; only fatal client errors are returned as `Err`.
pub fn run_workflow(engine: &Engine, state: &WorkflowState, sample: &Sample) -> Result<ExecutionTrace, LlmError> {
    let mut trace = ExecutionTrace {
        sample_id: sample.id.clone(),
        question: sample.question.clone(),
        records: Vec::new(),
        final_output: String::new(),
        failure: None,
    };
    let mut previous = String::new();
    let mut idx = 0;
    while idx < state.sketch.len() {
        let step = &state.sketch[idx];
        let iterations = match step.control {
            Control::Loop { max_iterations } => max_iterations.max(1),
            _ => 1,
        };
        for iteration in 1..=iterations {
            let envelope = render_envelope_with_context(&sample.question, sample.context.as_deref(), &previous, step);
            let o = run_one(engine, state, step, &envelope)?;
            let failed = o.error.clone();
            trace.records.push(StepRecord {
                step_id: step.step_id,
                executor_name: step.executor_name.clone(),
                iteration,
                input_text: envelope,
                output_text: o.output.clone(),
                tool_invocations: o.invocations,
                token_usage: o.usage,
                wall_time_ms: o.latency_ms,
                error: o.error,
                warnings: o.warnings,
            });
            if let Some(message) = failed {
                trace.final_output = String::new();
                trace.failure = Some(StepFailure {
                    step_id: step.step_id,
                    message,
                });
                return Ok(trace);
            }
            previous = o.output;
            if has_sentinel(&previous, &engine.settings.done_sentinel) {
                break;
            }
        }
        idx += 1;
        if let Control::Route { routes } = &step.control {
            let record = trace.records.last_mut().expect("step just ran");
            match parse_route_label(&previous) {
                Some(label) => match routes.get(label) {
                    Some(&target) if target > step.step_id => {
                        if let Some(pos) = state.sketch.iter().position(|s| s.step_id == target) {
                            idx = pos;
                        }
                    }
                    _ => record
                        .warnings
                        .push(format!("route label {label:?} has no forward target; falling through")),
                },
                None => record
                    .warnings
                    .push("RouteLabelUnparseable: no leading `ROUTE: <label>` line; falling through".into()),
            }
        }
    }
    trace.final_output = previous;
    Ok(trace)
}
