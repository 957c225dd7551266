//! Bilevel training loop, validation tracking and best-checkpoint selection.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::evaluation::{EvalResult, Metric, Sample};
use crate::forward::run_workflow;
use crate::gradient::{backward, backward_joint, grad_single_layer, grad_workflow, GradError};
use crate::llm::{Budget, LlmError};
use crate::optimizer::{update_prompt, update_prompts_joint, update_single_layer, update_workflow, OptimError};
use crate::run_store::{checkpoint_json, micro_to_usd, write_jsonl, RunDir, StoreError};
use crate::workflow_model::{ExecutionTrace, TextualGradient, WorkflowState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Inner loop only; the sketch never changes.
    PromptOnly,
    /// The whole workflow is one layer updated by a single combined call.
    NoBilevel,
    /// Bilevel, but all step gradients come from one call per sample.
    NoLayerwise,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::PromptOnly, Mode::NoBilevel, Mode::NoLayerwise];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::PromptOnly => "prompt_only",
            Mode::NoBilevel => "no_bilevel",
            Mode::NoLayerwise => "no_layerwise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub bilevel_rounds_per_batch: usize,
    pub inner_steps_per_round: usize,
    pub outer_steps_per_round: usize,
    pub epochs: usize,
    pub mode: Mode,
    pub budget: Budget,
    pub seed: u64,
    pub shuffle: bool,
    /// Validate on this many samples (fixed subset) instead of the full set.
    pub val_subsample: Option<usize>,
    /// Fresh forward pass for every inner step rather than once per round.
    pub recompute_inner_forward: bool,
    pub save_traces: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            bilevel_rounds_per_batch: 2,
            inner_steps_per_round: 5,
            outer_steps_per_round: 1,
            epochs: 1,
            mode: Mode::Full,
            budget: Budget::default(),
            seed: 0,
            shuffle: true,
            val_subsample: None,
            recompute_inner_forward: true,
            save_traces: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let counts = [
            ("batch_size", self.batch_size),
            ("bilevel_rounds_per_batch", self.bilevel_rounds_per_batch),
            ("inner_steps_per_round", self.inner_steps_per_round),
            ("outer_steps_per_round", self.outer_steps_per_round),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.val_subsample == Some(0) {
            return Err("val_subsample must be at least 1".into());
        }
        if self.budget.max_calls == Some(0) {
            return Err("budget.max_calls must be positive".into());
        }
        if let Some(c) = self.budget.max_cost_usd {
            if c.is_nan() || c <= 0.0 {
                return Err("budget.max_cost_usd must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub batch_index: usize,
    pub val_score: f64,
    pub revision: u64,
    pub sketch_revision: u64,
    pub api_calls_so_far: u64,
    pub cost_so_far_usd: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub score: f64,
    pub prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub metric: String,
    pub mean_score: f64,
    pub per_sample: Vec<SampleScore>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrainStats {
    pub batches: usize,
    pub outer_steps: usize,
    pub inner_rounds: usize,
    pub single_layer_steps: usize,
    pub prompt_updates: usize,
    pub plans_applied: usize,
    pub skipped_gradients: usize,
    pub skipped_updates: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_state: WorkflowState,
    pub best_batch: Option<usize>,
    pub best_score: Option<f64>,
    pub final_state: WorkflowState,
    pub records: Vec<RunRecord>,
    pub stats: TrainStats,
    /// Set when the budget stopped the run early.
    pub halted: Option<LlmError>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("initial state is invalid: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Fatal(LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Runs `state` on every sample and averages the metric. Step failures and
/// judge failures score 0 with the error kept on the sample.
pub fn evaluate(engine: &Engine, state: &WorkflowState, dataset: &[Sample], metric: &Metric) -> Result<EvalSummary, LlmError> {
    Ok(evaluate_with_traces(engine, state, dataset, metric)?.0)
}

fn evaluate_with_traces(
    engine: &Engine,
    state: &WorkflowState,
    dataset: &[Sample],
    metric: &Metric,
) -> Result<(EvalSummary, Vec<ExecutionTrace>), LlmError> {
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut traces = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let trace = run_workflow(engine, state, sample)?;
        let (score, error) = match &trace.failure {
            Some(f) => (0.0, Some(format!("step {} failed: {}", f.step_id, f.message))),
            None => match metric.score(engine, &trace.final_output, &sample.answer) {
                Ok(r) => (r.score, None),
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => (0.0, Some(format!("metric failed: {e}"))),
            },
        };
        per_sample.push(SampleScore {
            sample_id: sample.id.clone(),
            score,
            prediction: trace.final_output.clone(),
            error,
        });
        traces.push(trace);
    }
    let mean_score = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|s| s.score).sum::<f64>() / per_sample.len() as f64
    };
    Ok((
        EvalSummary {
            metric: metric.short_name().to_string(),
            mean_score,
            per_sample,
        },
        traces,
    ))
}

/// Index of the first maximum; NaN scores never win.
pub fn earliest_argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Running maximum of `scores`.
pub fn best_so_far(scores: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.len());
    let mut best = f64::NEG_INFINITY;
    for &s in scores {
        if s > best {
            best = s;
        }
        out.push(best);
    }
    out
}

struct Scored {
    trace: ExecutionTrace,
    eval: EvalResult,
}

/// Signals that stop the current batch.
enum Stop {
    Budget(LlmError),
    Fatal(LlmError),
}

impl From<LlmError> for Stop {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::BudgetExceeded { .. } => Stop::Budget(e),
            other => Stop::Fatal(other),
        }
    }
}

struct Trainer<'a> {
    engine: &'a Engine,
    config: &'a TrainConfig,
    metric: &'a Metric,
    metrics_info: String,
    stats: TrainStats,
}

impl<'a> Trainer<'a> {
    fn note(&self, kind: &str, message: String) {
        self.engine.client.ledger().note(kind, message);
    }

    fn forward_batch(&self, state: &WorkflowState, batch: &[Sample]) -> Result<Vec<Scored>, Stop> {
        let mut out = Vec::with_capacity(batch.len());
        for sample in batch {
            let trace = run_workflow(self.engine, state, sample)?;
            let eval = match self.metric.score(self.engine, &trace.final_output, &sample.answer) {
                Ok(r) => r,
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => {
                    self.note("metric_failed", format!("sample {}: {e}", sample.id));
                    EvalResult {
                        metric_name: self.metric.short_name().into(),
                        score: 0.0,
                        feedback: format!("The metric could not be computed: {e}"),
                    }
                }
            };
            out.push(Scored { trace, eval });
        }
        Ok(out)
    }

    fn grad_failed(&mut self, sample: &Sample, e: GradError) -> Result<(), Stop> {
        match e {
            GradError::Fatal(e) => Err(e.into()),
            other => {
                self.stats.skipped_gradients += 1;
                self.note("gradient_unavailable", format!("sample {}: {other}", sample.id));
                Ok(())
            }
        }
    }

    fn optim_failed(&mut self, e: OptimError) -> Result<(), Stop> {
        match e {
            OptimError::Fatal(e) => Err(e.into()),
            other => {
                self.stats.skipped_updates += 1;
                if !matches!(other, OptimError::Skipped(_)) {
                    self.note("update_rejected", other.to_string());
                }
                Ok(())
            }
        }
    }

    fn outer_step(&mut self, state: &mut WorkflowState, batch: &[Sample]) -> Result<(), Stop> {
        self.stats.outer_steps += 1;
        let scored = self.forward_batch(state, batch)?;
        let mut grads = Vec::new();
        for (s, sample) in scored.iter().zip(batch) {
            match grad_workflow(self.engine, state, &s.trace, sample, &s.eval, &self.metrics_info) {
                Ok(g) => grads.push(g),
                Err(e) => self.grad_failed(sample, e)?,
            }
        }
        if grads.is_empty() {
            return Ok(());
        }
        let questions: Vec<String> = batch.iter().map(|s| s.question.clone()).collect();
        match update_workflow(self.engine, state, &grads, batch.len(), &questions, &self.metrics_info) {
            Ok((next, decision)) => {
                if decision.should_update {
                    self.stats.plans_applied += 1;
                }
                *state = next;
                Ok(())
            }
            Err(e) => self.optim_failed(e),
        }
    }

    fn step_gradients(
        &mut self,
        state: &WorkflowState,
        scored: &[Scored],
        batch: &[Sample],
    ) -> Result<BTreeMap<String, Vec<TextualGradient>>, Stop> {
        let mut by_exec: BTreeMap<String, Vec<TextualGradient>> = BTreeMap::new();
        for (s, sample) in scored.iter().zip(batch) {
            let result = match self.config.mode {
                Mode::NoLayerwise => backward_joint(self.engine, state, &s.trace, sample, &s.eval, &self.metrics_info),
                _ => backward(self.engine, state, &s.trace, sample, &s.eval, &self.metrics_info),
            };
            match result {
                Ok(grads) => {
                    for (step_id, g) in grads {
                        if g.synthesized {
                            continue;
                        }
                        if let Some(step) = state.step(step_id) {
                            by_exec.entry(step.executor_name.clone()).or_default().push(g);
                        }
                    }
                }
                Err(e) => self.grad_failed(sample, e)?,
            }
        }
        Ok(by_exec)
    }

    fn inner_step(&mut self, state: &mut WorkflowState, batch: &[Sample], cached: &mut Option<Vec<Scored>>) -> Result<(), Stop> {
        self.stats.inner_rounds += 1;
        let scored = match cached.take() {
            Some(s) if !self.config.recompute_inner_forward => s,
            _ => self.forward_batch(state, batch)?,
        };
        let by_exec = self.step_gradients(state, &scored, batch)?;
        if !self.config.recompute_inner_forward {
            *cached = Some(scored);
        }
        if by_exec.is_empty() {
            return Ok(());
        }
        if self.config.mode == Mode::NoLayerwise {
            match update_prompts_joint(self.engine, state, &by_exec, batch.len()) {
                Ok((next, updated)) => {
                    self.stats.prompt_updates += updated.len();
                    *state = next;
                }
                Err(e) => self.optim_failed(e)?,
            }
            return Ok(());
        }
        let live: Vec<String> = state.live_executors().iter().map(|e| e.name.clone()).collect();
        for name in live {
            let Some(grads) = by_exec.get(&name) else { continue };
            match update_prompt(self.engine, state, &name, grads, batch.len()) {
                Ok((next, _)) => {
                    self.stats.prompt_updates += 1;
                    *state = next;
                }
                Err(e) => self.optim_failed(e)?,
            }
        }
        Ok(())
    }

    fn single_layer_step(&mut self, state: &mut WorkflowState, batch: &[Sample]) -> Result<(), Stop> {
        self.stats.single_layer_steps += 1;
        let scored = self.forward_batch(state, batch)?;
        let mut grads = Vec::new();
        for (s, sample) in scored.iter().zip(batch) {
            match grad_single_layer(self.engine, state, &s.trace, sample, &s.eval, &self.metrics_info) {
                Ok(g) => grads.push(g),
                Err(e) => self.grad_failed(sample, e)?,
            }
        }
        if grads.is_empty() {
            return Ok(());
        }
        match update_single_layer(self.engine, state, &grads, batch.len(), &self.metrics_info) {
            Ok((next, decision)) => {
                if decision.should_update {
                    self.stats.plans_applied += 1;
                }
                *state = next;
                Ok(())
            }
            Err(e) => self.optim_failed(e),
        }
    }

    fn run_batch(&mut self, state: &mut WorkflowState, batch: &[Sample]) -> Result<(), Stop> {
        let c = self.config;
        for _ in 0..c.bilevel_rounds_per_batch {
            match c.mode {
                Mode::NoBilevel => {
                    for _ in 0..c.outer_steps_per_round + c.inner_steps_per_round {
                        self.single_layer_step(state, batch)?;
                    }
                }
                Mode::Full | Mode::NoLayerwise | Mode::PromptOnly => {
                    if c.mode != Mode::PromptOnly {
                        for _ in 0..c.outer_steps_per_round {
                            self.outer_step(state, batch)?;
                        }
                    }
                    let mut cached = None;
                    for _ in 0..c.inner_steps_per_round {
                        self.inner_step(state, batch, &mut cached)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn validation_subset(val_set: &[Sample], config: &TrainConfig) -> Vec<Sample> {
    match config.val_subsample {
        Some(n) if n < val_set.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f7a1);
            let mut idx: Vec<usize> = (0..val_set.len()).collect();
            idx.shuffle(&mut rng);
            let mut chosen: Vec<usize> = idx.into_iter().take(n).collect();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| val_set[i].clone()).collect()
        }
        _ => val_set.to_vec(),
    }
}

/// Trains from `state0`. With a run directory, writes one checkpoint per
/// batch, `records.jsonl`, `best.json` and the ledger as it goes.
pub fn train(
    engine: &Engine,
    config: &TrainConfig,
    metric: &Metric,
    train_set: &[Sample],
    val_set: &[Sample],
    state0: WorkflowState,
    run_dir: Option<&RunDir>,
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let violations = engine.validate(&state0);
    if !violations.is_empty() {
        let codes: Vec<&str> = violations.iter().map(|v| v.code()).collect();
        return Err(TrainError::InvalidState(codes.join(", ")));
    }
    if let Some(dir) = run_dir {
        if config.save_traces {
            std::fs::create_dir_all(dir.traces_dir()).map_err(|e| StoreError::Io {
                path: dir.traces_dir(),
                source: e,
            })?;
        }
        write_jsonl::<RunRecord>(&dir.records(), &[])?;
        crate::run_store::save_checkpoint(&dir.initial_checkpoint(), &state0)?;
    }
    let val = validation_subset(val_set, config);
    let mut trainer = Trainer {
        engine,
        config,
        metric,
        metrics_info: metric.info(),
        stats: TrainStats::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = state0.clone();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, WorkflowState)> = None;
    let mut halted = None;
    let mut batch_index = 0;
    'epochs: for _ in 0..config.epochs {
        let mut order: Vec<&Sample> = train_set.iter().collect();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|s| (*s).clone()).collect();
            batch_index += 1;
            let mut working = state.clone();
            match trainer.run_batch(&mut working, &batch) {
                Ok(()) => {}
                Err(Stop::Budget(e)) => {
                    halted = Some(e);
                    break 'epochs;
                }
                Err(Stop::Fatal(e)) => return Err(TrainError::Fatal(e)),
            }
            state = working;
            trainer.stats.batches += 1;
            let (summary, traces) = match evaluate_with_traces(engine, &state, &val, metric) {
                Ok(v) => v,
                Err(e @ LlmError::BudgetExceeded { .. }) => {
                    halted = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(TrainError::Fatal(e)),
            };
            let totals = engine.client.ledger().totals();
            let record = RunRecord {
                batch_index,
                val_score: summary.mean_score,
                revision: state.revision,
                sketch_revision: state.sketch_revision,
                api_calls_so_far: totals.calls,
                cost_so_far_usd: micro_to_usd(totals.cost_micro_usd),
                timestamp: engine.client.ledger().clock().now(),
            };
            let improved = best.as_ref().is_none_or(|(_, s, _)| summary.mean_score > *s);
            if let Some(dir) = run_dir {
                let text = checkpoint_json(&state);
                write_file(&dir.batch_checkpoint(batch_index), &text)?;
                if improved {
                    write_file(&dir.best(), &text)?;
                }
                dir.append_jsonl(&dir.records(), &record)?;
                if config.save_traces {
                    write_jsonl(&dir.traces_dir().join(format!("val_batch_{batch_index}.jsonl")), &traces)?;
                }
                dir.write_ledger(engine.client.ledger())?;
            }
            if improved {
                best = Some((batch_index, summary.mean_score, state.clone()));
            }
            records.push(record);
        }
    }
    if let Some(e) = &halted {
        engine.client.ledger().note("budget_halt", e.to_string());
    }
    if let Some(dir) = run_dir {
        if best.is_none() {
            write_file(&dir.best(), &checkpoint_json(&state0))?;
        }
        dir.write_ledger(engine.client.ledger())?;
    }
    let (best_batch, best_score, best_state) = match best {
        Some((i, s, st)) => (Some(i), Some(s), st),
        None => (None, None, state0),
    };
    Ok(TrainOutcome {
        best_state,
        best_batch,
        best_score,
        final_state: state,
        records,
        stats: trainer.stats,
        halted,
    })
}

fn write_file(path: &std::path::Path, text: &str) -> Result<(), StoreError> {
    std::fs::write(path, text).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
