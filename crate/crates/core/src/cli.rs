//! `wfi` subcommands. Exit codes: 0 success, 2 usage or config error,
//! 3 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{Config, ConfigError, ReplayConfig};
use crate::evaluation::{load_dataset, Metric, Sample};
use crate::llm::ReplayMode;
use crate::optimizer::bootstrap_workflow;
use crate::run_store::{load_checkpoint, micro_to_usd, read_jsonl, RunDir};
use crate::trainer::{best_so_far, evaluate, train, Mode, RunRecord};
use crate::workflow_model::WorkflowState;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wfi", version, about = "Induce and optimize LLM workflows with textual gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bootstrap (unless the config names an initial checkpoint) and train.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; prints one JSON line.
    Eval(EvalArgs),
    /// Print the validation curve of a run as CSV.
    Curve { run_dir: PathBuf },
    /// Print a checkpoint's sketch as a table.
    Inspect { checkpoint: PathBuf },
    /// Re-run a recorded run from its store and compare outputs byte for byte.
    Replay {
        run_dir: PathBuf,
        /// Where the re-run writes its files (default: <RUN_DIR>/replay).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_calls: Option<u64>,
    #[arg(long)]
    max_cost_usd: Option<f64>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config's test split.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Without a config the built-in toy mock backend is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// em, f1 or judge; overrides the config.
    #[arg(long)]
    metric: Option<String>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (expected full, prompt_only, no_bilevel or no_layerwise)"))
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if code == EXIT_OK {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Curve { run_dir } => cmd_curve(&run_dir, out),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint, out),
        Command::Replay { run_dir, out: dest } => cmd_replay(&run_dir, dest, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "{}", json!({"error": m, "kind": "usage"}));
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            let _ = writeln!(err, "{}", json!({"error": m, "kind": "runtime"}));
            EXIT_RUNTIME
        }
    }
}

fn dataset(path: Option<&PathBuf>, what: &'static str) -> Result<Vec<Sample>, CliError> {
    let path = path.ok_or_else(|| usage(format!("no {what} dataset configured")))?;
    if !path.exists() {
        return Err(ConfigError::Missing {
            what: "dataset",
            path: path.clone(),
        }
        .into());
    }
    let samples = load_dataset(path).map_err(usage)?;
    if samples.is_empty() {
        return Err(usage(format!("{what} dataset {} is empty", path.display())));
    }
    Ok(samples)
}

fn checkpoint(path: &Path) -> Result<WorkflowState, CliError> {
    load_checkpoint(path).map_err(usage)
}

const RUN_FILES: [&str; 6] = ["best.json", "records.jsonl", "ledger.jsonl", "notes.jsonl", "store.jsonl", "config.toml"];

fn prepare_run_dir(root: &Path, force: bool) -> Result<RunDir, CliError> {
    let dir = RunDir::open(root);
    if dir.records().exists() && !force {
        return Err(usage(format!(
            "run directory {} already holds a run; pass --force to overwrite",
            root.display()
        )));
    }
    for f in RUN_FILES {
        let p = root.join(f);
        if p.exists() {
            std::fs::remove_file(&p).map_err(runtime)?;
        }
    }
    for d in [root.join("checkpoints"), dir.traces_dir()] {
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(runtime)?;
        }
    }
    RunDir::create(root).map_err(runtime)
}

/// Shared by `train` and `replay`: bootstrap if needed, train, write the run.
fn execute_run(cfg: &Config, dir: &RunDir, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let train_set = dataset(cfg.data.train.as_ref(), "train")?;
    let val_set = dataset(cfg.data.val.as_ref(), "validation")?;
    let engine = cfg.build_engine()?;
    std::fs::write(dir.config_snapshot(), cfg.to_toml()).map_err(runtime)?;
    let state0 = match &cfg.initial_checkpoint {
        Some(p) => checkpoint(p)?,
        None => {
            let n = cfg.train.batch_size.min(train_set.len());
            let state = bootstrap_workflow(&engine, &train_set[..n], &cfg.metric).map_err(|e| {
                let _ = dir.write_ledger(engine.client.ledger());
                runtime(format!("bootstrap failed: {e}"))
            })?;
            let _ = writeln!(err, "bootstrapped a {}-step workflow", state.num_steps());
            state
        }
    };
    let outcome = train(&engine, &cfg.train, &cfg.metric, &train_set, &val_set, state0, Some(dir)).map_err(|e| {
        let _ = dir.write_ledger(engine.client.ledger());
        match e {
            crate::trainer::TrainError::Config(_)
            | crate::trainer::TrainError::EmptyDataset(_)
            | crate::trainer::TrainError::InvalidState(_) => usage(e),
            _ => runtime(e),
        }
    })?;
    let totals = engine.client.ledger().totals();
    let summary = json!({
        "best_batch": outcome.best_batch,
        "best_val": outcome.best_score,
        "batches": outcome.stats.batches,
        "calls": totals.calls,
        "cost_usd": micro_to_usd(totals.cost_micro_usd),
        "halted": outcome.halted.as_ref().map(|e| e.to_string()),
    });
    writeln!(out, "{summary}").map_err(runtime)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let mut cfg = Config::load(&a.config)?;
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if a.max_calls.is_some() {
        cfg.train.budget.max_calls = a.max_calls;
    }
    if a.max_cost_usd.is_some() {
        cfg.train.budget.max_cost_usd = a.max_cost_usd;
    }
    cfg.validate()?;
    let dir = prepare_run_dir(&a.run_dir, a.force)?;
    if cfg.replay.is_none() {
        cfg.replay = Some(ReplayConfig {
            mode: ReplayMode::Record,
            store: absolute(&dir.store())?,
        });
    }
    execute_run(&cfg, &dir, out, err)
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    Ok(std::env::current_dir().map_err(runtime)?.join(p))
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(name) = &a.metric {
        cfg.metric = Metric::parse(name).ok_or_else(|| usage(format!("unknown metric {name:?}")))?;
    }
    let state = checkpoint(&a.checkpoint)?;
    let samples = dataset(a.dataset.as_ref().or(cfg.data.test.as_ref()), "evaluation")?;
    let engine = cfg.build_engine()?;
    let violations = engine.validate(&state);
    if !violations.is_empty() {
        let codes: Vec<&str> = violations.iter().map(|v| v.code()).collect();
        return Err(usage(format!("checkpoint is invalid here: {}", codes.join(", "))));
    }
    let summary = evaluate(&engine, &state, &samples, &cfg.metric).map_err(runtime)?;
    writeln!(
        out,
        "{}",
        json!({"metric": summary.metric, "mean": summary.mean_score, "n": samples.len()})
    )
    .map_err(runtime)
}

fn cmd_curve(run_dir: &Path, out: &mut dyn Write) -> CliResult {
    let path = RunDir::open(run_dir).records();
    if !path.exists() {
        return Err(runtime(format!("records file not found: {}", path.display())));
    }
    let records: Vec<RunRecord> = read_jsonl(&path).map_err(runtime)?;
    write!(out, "{}", curve_csv(&records)).map_err(runtime)
}

pub fn curve_csv(records: &[RunRecord]) -> String {
    let scores: Vec<f64> = records.iter().map(|r| r.val_score).collect();
    let best = best_so_far(&scores);
    let mut csv = String::from("batch_index,val_score,best_so_far,calls,cost\n");
    for (r, b) in records.iter().zip(best) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.batch_index, r.val_score, b, r.api_calls_so_far, r.cost_so_far_usd
        ));
    }
    csv
}

const EXCERPT_CHARS: usize = 60;

fn excerpt(prompt: &str) -> String {
    let flat = prompt.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= EXCERPT_CHARS {
        return flat;
    }
    let cut: String = flat.chars().take(EXCERPT_CHARS).collect();
    format!("{}...", cut.trim_end())
}

/// Fixed-width table; tool steps carry a `(T)` marker.
pub fn inspect_table(state: &WorkflowState) -> String {
    let mut rows = vec![["step", "type", "tools", "executor", "prompt"].map(String::from)];
    for s in &state.sketch {
        let exec = state.executor_for(s.step_id);
        let step = if s.uses_tools() {
            format!("{} (T)", s.step_id)
        } else {
            s.step_id.to_string()
        };
        let kind = exec.map(|e| e.kind.as_str()).unwrap_or("?").to_string();
        let tools = if s.uses_tools() { s.tool_names.join(",") } else { "-".into() };
        let prompt = exec.map(|e| excerpt(&e.prompt)).unwrap_or_default();
        rows.push([step, kind, tools, s.executor_name.clone(), prompt]);
    }
    let widths: Vec<usize> = (0..5)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = format!(
        "revision {} (sketch revision {}), {} steps\n",
        state.revision,
        state.sketch_revision,
        state.num_steps()
    );
    for r in &rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 4 {
                line.push_str(cell);
            } else {
                line.push_str(&format!("{:<w$}  ", cell, w = widths[c]));
            }
        }
        text.push_str(line.trim_end());
        text.push('\n');
    }
    text
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> CliResult {
    let state = checkpoint(path)?;
    write!(out, "{}", inspect_table(&state)).map_err(runtime)
}

fn strip_times(text: &str) -> String {
    text.lines()
        .map(|l| match serde_json::from_str::<serde_json::Value>(l) {
            Ok(serde_json::Value::Object(mut m)) => {
                m.remove("ts");
                m.remove("timestamp");
                serde_json::Value::Object(m).to_string()
            }
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn compared_files(dir: &RunDir) -> Result<Vec<PathBuf>, CliError> {
    let mut files = vec![PathBuf::from("best.json"), "records.jsonl".into(), "ledger.jsonl".into(), "notes.jsonl".into()];
    let ck = dir.root().join("checkpoints");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&ck)
        .map_err(|e| runtime(format!("{}: {e}", ck.display())))?
        .filter_map(|e| e.ok())
        .map(|e| PathBuf::from("checkpoints").join(e.file_name()))
        .collect();
    names.sort();
    files.extend(names);
    Ok(files)
}

fn cmd_replay(run_dir: &Path, dest: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let original = RunDir::open(run_dir);
    let snapshot = original.config_snapshot();
    if !snapshot.exists() {
        return Err(usage(format!("config snapshot not found: {}", snapshot.display())));
    }
    let store = match Config::load(&snapshot)?.replay {
        Some(r) => r.store,
        None => original.store(),
    };
    let mut cfg = Config::load(&snapshot)?;
    cfg.replay = Some(ReplayConfig {
        mode: ReplayMode::Replay,
        store,
    });
    let dest = dest.unwrap_or_else(|| run_dir.join("replay"));
    let dir = prepare_run_dir(&dest, true)?;
    let mut quiet = Vec::new();
    execute_run(&cfg, &dir, &mut quiet, err)?;
    let system_clock = cfg.clock == crate::config::ClockKind::System;
    let mut differing = Vec::new();
    let files = compared_files(&original)?;
    for f in &files {
        let a = std::fs::read_to_string(original.root().join(f)).unwrap_or_default();
        let b = std::fs::read_to_string(dir.root().join(f)).unwrap_or_default();
        let same = if system_clock { strip_times(&a) == strip_times(&b) } else { a == b };
        if !same {
            differing.push(f.display().to_string());
        }
    }
    writeln!(
        out,
        "{}",
        json!({"identical": differing.is_empty(), "files_compared": files.len(), "differing": differing})
    )
    .map_err(runtime)?;
    if differing.is_empty() {
        Ok(())
    } else {
        Err(runtime("replayed run differs from the recorded run"))
    }
}
