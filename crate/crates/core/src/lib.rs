//! Workflow induction by textual backpropagation: a forward engine over
//! multi-step LLM workflows, textual gradients, and a bilevel optimizer that
//! rewrites both executor prompts and the workflow sketch.

pub mod cli;
pub mod config;
pub mod engine;
pub mod evaluation;
pub mod forward;
pub mod gradient;
pub mod llm;
pub mod optimizer;
pub mod prompts;
pub mod run_store;
pub mod tools;
pub mod trainer;
pub mod workflow_model;
