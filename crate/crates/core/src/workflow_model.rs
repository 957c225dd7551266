//! Workflow sketch, executor registry, execution traces and textual gradients.
//!
//! A [`WorkflowState`] is an immutable value: every mutation goes through a
//! method that returns a new state with a bumped revision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum number of steps a sketch may hold.
pub const MAX_STEPS: usize = 12;

/// Default upper bound on `Loop.max_iterations`.
pub const DEFAULT_LOOP_CAP: u32 = 5;

/// Control behaviour attached to a step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Control {
    #[default]
    Sequential,
    /// The executor emits `ROUTE: <label>` on its first line; the label picks
    /// the next step. Unknown labels fall through to the next step.
    Route { routes: BTreeMap<String, u32> },
    /// Re-run this step until it emits `VERDICT: DONE` or the cap is hit.
    Loop { max_iterations: u32 },
}


#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub step_id: u32,
    pub description: String,
    pub executor_name: String,
    #[serde(rename = "tools", default)]
    pub tool_names: Vec<String>,
    #[serde(default)]
    pub control: Control,
    /// Guideline the executor was generated from (empty for reused executors).
    #[serde(default)]
    pub generation_guideline: String,
}

impl StepSpec {
    pub fn new(step_id: u32, description: impl Into<String>, executor_name: impl Into<String>) -> Self {
        Self {
            step_id,
            description: description.into(),
            executor_name: executor_name.into(),
            tool_names: Vec::new(),
            control: Control::Sequential,
            generation_guideline: String::new(),
        }
    }

    pub fn with_tools(mut self, tools: &[&str]) -> Self {
        self.tool_names = tools.iter().map(|t| t.to_string()).collect();
        self
    }

    pub fn with_control(mut self, control: Control) -> Self {
        self.control = control;
        self
    }

    pub fn uses_tools(&self) -> bool {
        !self.tool_names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExecutorKind {
    #[serde(rename = "LLMExecutor")]
    Llm,
    #[serde(rename = "ToolExecutor")]
    Tool,
}

impl ExecutorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutorKind::Llm => "LLMExecutor",
            ExecutorKind::Tool => "ToolExecutor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "LLMExecutor" => Some(ExecutorKind::Llm),
            "ToolExecutor" => Some(ExecutorKind::Tool),
            _ => None,
        }
    }

    pub fn for_tools(tools: &[String]) -> Self {
        if tools.is_empty() {
            ExecutorKind::Llm
        } else {
            ExecutorKind::Tool
        }
    }
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The runnable realisation of a step: its prompt and tool access.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ExecutorKind,
    pub description: String,
    pub prompt: String,
    #[serde(default)]
    pub tool_names: Vec<String>,
    #[serde(default)]
    pub version: u32,
}

impl ExecutorSpec {
    pub fn llm(name: impl Into<String>, description: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ExecutorKind::Llm,
            description: description.into(),
            prompt: prompt.into(),
            tool_names: Vec::new(),
            version: 0,
        }
    }

    pub fn tool(
        name: impl Into<String>,
        description: impl Into<String>,
        prompt: impl Into<String>,
        tools: &[&str],
    ) -> Self {
        Self {
            name: name.into(),
            kind: ExecutorKind::Tool,
            description: description.into(),
            prompt: prompt.into(),
            tool_names: tools.iter().map(|t| t.to_string()).collect(),
            version: 0,
        }
    }
}

/// Returns true when `name` matches `[A-Za-z0-9_]+`.
pub fn is_identifier(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub sketch: Vec<StepSpec>,
    pub executors: BTreeMap<String, ExecutorSpec>,
    /// Bumped on every applied change, structural or prompt.
    pub revision: u64,
    /// Bumped only when the sketch itself changes.
    #[serde(default)]
    pub sketch_revision: u64,
}

/// One invariant violation found by [`validate_state`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Violation {
    EmptySketch,
    TooManySteps { steps: usize, cap: usize },
    NonContiguousStepIds { position: usize, found: u32 },
    UnresolvedExecutor { step_id: u32, executor: String },
    RouteTargetMissing { step_id: u32, label: String, target: u32 },
    RouteTargetNotForward { step_id: u32, label: String, target: u32 },
    EmptyRoute { step_id: u32 },
    LoopIterationsOutOfRange { step_id: u32, max_iterations: u32, cap: u32 },
    StepToolKindMismatch { step_id: u32, executor: String },
    ExecutorToolKindMismatch { executor: String },
    EmptyPrompt { executor: String },
    InvalidExecutorName { executor: String },
    ExecutorKeyMismatch { key: String, name: String },
    UnregisteredTool { step_id: u32, tool: String },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::EmptySketch => "empty_sketch",
            Violation::TooManySteps { .. } => "too_many_steps",
            Violation::NonContiguousStepIds { .. } => "non_contiguous_step_ids",
            Violation::UnresolvedExecutor { .. } => "unresolved_executor",
            Violation::RouteTargetMissing { .. } => "route_target_missing",
            Violation::RouteTargetNotForward { .. } => "route_target_not_forward",
            Violation::EmptyRoute { .. } => "empty_route",
            Violation::LoopIterationsOutOfRange { .. } => "loop_iterations_out_of_range",
            Violation::StepToolKindMismatch { .. } => "step_tool_kind_mismatch",
            Violation::ExecutorToolKindMismatch { .. } => "executor_tool_kind_mismatch",
            Violation::EmptyPrompt { .. } => "empty_prompt",
            Violation::InvalidExecutorName { .. } => "invalid_executor_name",
            Violation::ExecutorKeyMismatch { .. } => "executor_key_mismatch",
            Violation::UnregisteredTool { .. } => "unregistered_tool",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnresolvedExecutor { step_id, executor } => {
                write!(f, "unresolved_executor: step {step_id} references unknown executor {executor:?}")
            }
            other => write!(f, "{}: {:?}", other.code(), other),
        }
    }
}

/// Limits applied by [`validate_state`].
#[derive(Debug, Clone, Copy)]
pub struct ValidationLimits {
    pub max_steps: usize,
    pub loop_cap: u32,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self {
            max_steps: MAX_STEPS,
            loop_cap: DEFAULT_LOOP_CAP,
        }
    }
}

/// Checks every structural invariant of `state`. An empty list means valid.
pub fn validate_state(state: &WorkflowState) -> Vec<Violation> {
    validate_with(state, ValidationLimits::default(), None)
}

/// Like [`validate_state`], additionally checking step tools against
/// `registered_tools` when given.
pub fn validate_with(
    state: &WorkflowState,
    limits: ValidationLimits,
    registered_tools: Option<&BTreeSet<String>>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = state.sketch.len();
    if k == 0 {
        out.push(Violation::EmptySketch);
    }
    if k > limits.max_steps {
        out.push(Violation::TooManySteps {
            steps: k,
            cap: limits.max_steps,
        });
    }
    for (pos, step) in state.sketch.iter().enumerate() {
        if step.step_id as usize != pos + 1 {
            out.push(Violation::NonContiguousStepIds {
                position: pos + 1,
                found: step.step_id,
            });
        }
    }
    let ids: BTreeSet<u32> = state.sketch.iter().map(|s| s.step_id).collect();

    for step in &state.sketch {
        match state.executors.get(&step.executor_name) {
            None => out.push(Violation::UnresolvedExecutor {
                step_id: step.step_id,
                executor: step.executor_name.clone(),
            }),
            Some(exec) => {
                if step.uses_tools() != (exec.kind == ExecutorKind::Tool) {
                    out.push(Violation::StepToolKindMismatch {
                        step_id: step.step_id,
                        executor: exec.name.clone(),
                    });
                }
            }
        }
        match &step.control {
            Control::Sequential => {}
            Control::Route { routes } => {
                if routes.is_empty() {
                    out.push(Violation::EmptyRoute { step_id: step.step_id });
                }
                for (label, &target) in routes {
                    if !ids.contains(&target) {
                        out.push(Violation::RouteTargetMissing {
                            step_id: step.step_id,
                            label: label.clone(),
                            target,
                        });
                    } else if target <= step.step_id {
                        out.push(Violation::RouteTargetNotForward {
                            step_id: step.step_id,
                            label: label.clone(),
                            target,
                        });
                    }
                }
            }
            Control::Loop { max_iterations } => {
                if *max_iterations < 1 || *max_iterations > limits.loop_cap {
                    out.push(Violation::LoopIterationsOutOfRange {
                        step_id: step.step_id,
                        max_iterations: *max_iterations,
                        cap: limits.loop_cap,
                    });
                }
            }
        }
        if let Some(tools) = registered_tools {
            for t in &step.tool_names {
                if !tools.contains(t) {
                    out.push(Violation::UnregisteredTool {
                        step_id: step.step_id,
                        tool: t.clone(),
                    });
                }
            }
        }
    }

    for (key, exec) in &state.executors {
        if key != &exec.name {
            out.push(Violation::ExecutorKeyMismatch {
                key: key.clone(),
                name: exec.name.clone(),
            });
        }
        if !is_identifier(&exec.name) {
            out.push(Violation::InvalidExecutorName {
                executor: exec.name.clone(),
            });
        }
        if (exec.kind == ExecutorKind::Tool) != !exec.tool_names.is_empty() {
            out.push(Violation::ExecutorToolKindMismatch {
                executor: exec.name.clone(),
            });
        }
        if exec.prompt.trim().is_empty() {
            out.push(Violation::EmptyPrompt {
                executor: exec.name.clone(),
            });
        }
    }
    out
}

impl WorkflowState {
    pub fn new(sketch: Vec<StepSpec>, executors: impl IntoIterator<Item = ExecutorSpec>) -> Self {
        Self {
            sketch,
            executors: executors.into_iter().map(|e| (e.name.clone(), e)).collect(),
            revision: 0,
            sketch_revision: 0,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.sketch.len()
    }

    pub fn step(&self, step_id: u32) -> Option<&StepSpec> {
        self.sketch.iter().find(|s| s.step_id == step_id)
    }

    pub fn executor_for(&self, step_id: u32) -> Option<&ExecutorSpec> {
        self.step(step_id).and_then(|s| self.executors.get(&s.executor_name))
    }

    /// Executors referenced by at least one step, in first-use order.
    pub fn live_executors(&self) -> Vec<&ExecutorSpec> {
        let mut seen = BTreeSet::new();
        self.sketch
            .iter()
            .filter(|s| seen.insert(s.executor_name.as_str()))
            .filter_map(|s| self.executors.get(&s.executor_name))
            .collect()
    }

    /// New state with `executor`'s prompt replaced and its version bumped.
    pub fn with_prompt(&self, executor: &str, prompt: impl Into<String>) -> Option<Self> {
        let mut next = self.clone();
        let exec = next.executors.get_mut(executor)?;
        exec.prompt = prompt.into();
        exec.version += 1;
        next.revision += 1;
        Some(next)
    }

    /// New state with a replaced sketch and extra executors registered.
    /// Existing executors are never removed.
    pub fn with_sketch(&self, sketch: Vec<StepSpec>, new_executors: Vec<ExecutorSpec>) -> Self {
        let mut next = self.clone();
        next.sketch = sketch;
        for e in new_executors {
            next.executors.insert(e.name.clone(), e);
        }
        next.revision += 1;
        next.sketch_revision += 1;
        next
    }

    /// Returns `base` if unused, else `base_2`, `base_3`, ...
    pub fn unique_executor_name(&self, base: &str, reserved: &BTreeSet<String>) -> String {
        let taken = |n: &str| self.executors.contains_key(n) || reserved.contains(n);
        if !taken(base) {
            return base.to_string();
        }
        (2..)
            .map(|i| format!("{base}_{i}"))
            .find(|n| !taken(n))
            .expect("unbounded suffix search")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn add(&mut self, other: TokenUsage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool: String,
    pub query: String,
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_id: u32,
    pub executor_name: String,
    /// 1-based iteration for loop steps.
    pub iteration: u32,
    pub input_text: String,
    pub output_text: String,
    #[serde(default)]
    pub tool_invocations: Vec<ToolInvocation>,
    pub token_usage: TokenUsage,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    pub step_id: u32,
    pub message: String,
}

/// Forward record of one sample through the workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub sample_id: String,
    pub question: String,
    pub records: Vec<StepRecord>,
    pub final_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StepFailure>,
}

impl ExecutionTrace {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    /// Distinct executed step ids in first-execution order.
    pub fn executed_steps(&self) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .map(|r| r.step_id)
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Last record produced by `step_id` (the final iteration for loops).
    pub fn last_record(&self, step_id: u32) -> Option<&StepRecord> {
        self.records.iter().rev().find(|r| r.step_id == step_id)
    }

    pub fn token_usage(&self) -> TokenUsage {
        let mut total = TokenUsage::default();
        for r in &self.records {
            total.add(r.token_usage.clone());
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientScope {
    Step { step_id: u32 },
    Workflow,
}

/// A natural-language gradient attached to one step or to the sketch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualGradient {
    pub scope: GradientScope,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub sample_id: String,
    /// Placeholder produced without a meta call (step not executed).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthesized: bool,
}

impl TextualGradient {
    pub fn step(step_id: u32, text: impl Into<String>, sample_id: impl Into<String>) -> Self {
        Self {
            scope: GradientScope::Step { step_id },
            text: text.into(),
            reasoning: None,
            sample_id: sample_id.into(),
            synthesized: false,
        }
    }

    pub fn workflow(text: impl Into<String>, reasoning: Option<String>, sample_id: impl Into<String>) -> Self {
        Self {
            scope: GradientScope::Workflow,
            text: text.into(),
            reasoning,
            sample_id: sample_id.into(),
            synthesized: false,
        }
    }

    pub fn step_id(&self) -> Option<u32> {
        match self.scope {
            GradientScope::Step { step_id } => Some(step_id),
            GradientScope::Workflow => None,
        }
    }
}

/// How one step of the `after` sketch is obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DiffEntry {
    /// Copied from `before` step `from`, renumbered to `to`.
    Kept { from: u32, to: u32 },
    Added { step: StepSpec },
}

/// Lossless structural diff between two sketches.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SketchDiff {
    pub entries: Vec<DiffEntry>,
    pub added: Vec<u32>,
    pub removed: Vec<u32>,
    /// Kept steps whose position changed, as (from, to).
    pub moved: Vec<(u32, u32)>,
    pub new_executors: Vec<String>,
    pub reused_executors: Vec<String>,
}

impl SketchDiff {
    /// True when the two sketches are identical.
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.moved.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiffError {
    #[error("invalid input state: {0:?}")]
    InvalidState(Vec<Violation>),
    #[error("diff references step {0} missing from the base sketch")]
    MissingBaseStep(u32),
}

fn same_modulo_id(a: &StepSpec, b: &StepSpec) -> bool {
    a.description == b.description
        && a.executor_name == b.executor_name
        && a.tool_names == b.tool_names
        && a.control == b.control
        && a.generation_guideline == b.generation_guideline
}

/// Structural diff from `before` to `after`.
pub fn diff_sketch(before: &WorkflowState, after: &WorkflowState) -> Result<SketchDiff, DiffError> {
    for s in [before, after] {
        let v = validate_state(s);
        if !v.is_empty() {
            return Err(DiffError::InvalidState(v));
        }
    }
    let mut used = vec![false; before.sketch.len()];
    let mut diff = SketchDiff::default();
    for step in &after.sketch {
        let hit = before
            .sketch
            .iter()
            .enumerate()
            .find(|(i, b)| !used[*i] && same_modulo_id(b, step));
        match hit {
            Some((i, b)) => {
                used[i] = true;
                diff.entries.push(DiffEntry::Kept {
                    from: b.step_id,
                    to: step.step_id,
                });
                if b.step_id != step.step_id {
                    diff.moved.push((b.step_id, step.step_id));
                }
            }
            None => {
                diff.entries.push(DiffEntry::Added { step: step.clone() });
                diff.added.push(step.step_id);
            }
        }
    }
    diff.removed = before
        .sketch
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|(s, _)| s.step_id)
        .collect();
    let mut seen = BTreeSet::new();
    for step in &after.sketch {
        if !seen.insert(step.executor_name.clone()) {
            continue;
        }
        if before.executors.contains_key(&step.executor_name) {
            diff.reused_executors.push(step.executor_name.clone());
        } else {
            diff.new_executors.push(step.executor_name.clone());
        }
    }
    Ok(diff)
}

/// Rebuilds the `after` sketch from `before` and a diff.
pub fn apply_diff(diff: &SketchDiff, before: &WorkflowState) -> Result<Vec<StepSpec>, DiffError> {
    diff.entries
        .iter()
        .map(|e| match e {
            DiffEntry::Kept { from, to } => {
                let mut s = before.step(*from).cloned().ok_or(DiffError::MissingBaseStep(*from))?;
                s.step_id = *to;
                Ok(s)
            }
            DiffEntry::Added { step } => Ok(step.clone()),
        })
        .collect()
}

/// Renders the sketch as a step table (`(T)` marks tool steps).
pub fn render_sketch_table(state: &WorkflowState) -> String {
    let mut out = String::from("| Step | Type | Tools | Executor | Description |\n|---|---|---|---|---|\n");
    for s in &state.sketch {
        let kind = match (&s.control, s.uses_tools()) {
            (Control::Route { .. }, _) => "Cond. / LLM".to_string(),
            (Control::Loop { .. }, true) => "Loop / Tool".to_string(),
            (Control::Loop { .. }, false) => "Loop / LLM".to_string(),
            (_, true) => "Tool".to_string(),
            (_, false) => "LLM".to_string(),
        };
        let tools = if s.uses_tools() {
            s.tool_names.join(", ")
        } else {
            "None".to_string()
        };
        let mut desc = s.description.replace('\n', " ");
        match &s.control {
            Control::Route { routes } => {
                let r: Vec<String> = routes.iter().map(|(l, t)| format!("{l} -> {t}")).collect();
                desc.push_str(&format!(" [routes: {}]", r.join("; ")));
            }
            Control::Loop { max_iterations } => {
                desc.push_str(&format!(" [loop: up to {max_iterations} iterations]"));
            }
            Control::Sequential => {}
        }
        out.push_str(&format!("| {} | {} | {} | {} | {} |\n", s.step_id, kind, tools, s.executor_name, desc));
    }
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub const SEARCH_TOOL: &str = "wikipedia_search_topk";

    /// The 4-step sketch before the outer-loop update in the worked example.
    pub fn before_state() -> WorkflowState {
        WorkflowState::new(
            vec![
                StepSpec::new(1, "Wikipedia search", "WikiSearch").with_tools(&[SEARCH_TOOL]),
                StepSpec::new(2, "Answer extraction", "AnswerExtractor"),
                StepSpec::new(3, "Verification", "Verifier"),
                StepSpec::new(4, "Final answer", "FinalAnswer"),
            ],
            vec![
                ExecutorSpec::tool("WikiSearch", "search", "Search Wikipedia.", &[SEARCH_TOOL]),
                ExecutorSpec::llm("AnswerExtractor", "extract", "Extract the answer."),
                ExecutorSpec::llm("Verifier", "verify", "Verify candidates."),
                ExecutorSpec::llm("FinalAnswer", "final", "Give the final answer."),
            ],
        )
    }

    /// The 6-step sketch after the update: steps 2 and 3 are new.
    pub fn after_state() -> WorkflowState {
        let before = before_state();
        let mut g2 = StepSpec::new(2, "Entity disambiguation", "EntityDisambiguator");
        g2.generation_guideline = "Identify the entity.".into();
        let mut g3 = StepSpec::new(3, "Targeted attribute retrieval", "AttributeRetriever").with_tools(&[SEARCH_TOOL]);
        g3.generation_guideline = "Retrieve the attribute.".into();
        before.with_sketch(
            vec![
                StepSpec::new(1, "Wikipedia search", "WikiSearch").with_tools(&[SEARCH_TOOL]),
                g2,
                g3,
                StepSpec::new(4, "Answer extraction", "AnswerExtractor"),
                StepSpec::new(5, "Verification", "Verifier"),
                StepSpec::new(6, "Final answer", "FinalAnswer"),
            ],
            vec![
                ExecutorSpec::llm("EntityDisambiguator", "disambiguate", "Identify the entity."),
                ExecutorSpec::tool("AttributeRetriever", "retrieve", "Retrieve attributes.", &[SEARCH_TOOL]),
            ],
        )
    }
}
