//! Shared context handed to forward, backward and update passes.

use crate::llm::LlmClient;
use crate::prompts::Templates;
use crate::tools::ToolRegistry;
use crate::workflow_model::{validate_with, ValidationLimits, Violation, WorkflowState, DEFAULT_LOOP_CAP, MAX_STEPS};

pub const DONE_SENTINEL: &str = "VERDICT: DONE";
pub const GRADIENT_CHAR_CAP: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub max_steps: usize,
    pub loop_cap: u32,
    /// A Loop step stops once its output contains this as a whole line.
    pub done_sentinel: String,
    pub gradient_char_cap: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            max_steps: MAX_STEPS,
            loop_cap: DEFAULT_LOOP_CAP,
            done_sentinel: DONE_SENTINEL.into(),
            gradient_char_cap: GRADIENT_CHAR_CAP,
        }
    }
}

pub struct Engine {
    pub client: LlmClient,
    pub tools: ToolRegistry,
    pub templates: Templates,
    pub settings: EngineSettings,
}

impl Engine {
    pub fn new(client: LlmClient, tools: ToolRegistry) -> Self {
        Self {
            client,
            tools,
            templates: Templates::builtin(),
            settings: EngineSettings::default(),
        }
    }

    pub fn limits(&self) -> ValidationLimits {
        ValidationLimits {
            max_steps: self.settings.max_steps,
            loop_cap: self.settings.loop_cap,
        }
    }

    /// Structural validation plus tool registration.
    pub fn validate(&self, state: &WorkflowState) -> Vec<Violation> {
        validate_with(state, self.limits(), Some(&self.tools.names()))
    }
}
