//! Meta-prompt templates and their renderer.
//!
//! Templates use `{name}` placeholders and `{{` / `}}` for literal braces.
//! The built-in set ships with the crate; any file in an override directory
//! with the same name (e.g. `grad_loss.user.txt`) replaces the built-in.

use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("template placeholder {{{0}}} has no value")]
    MissingVar(String),
    #[error("unbalanced brace at byte {0}")]
    UnbalancedBrace(usize),
    #[error("cannot read template override {path}: {message}")]
    Io { path: String, message: String },
}

/// Substitutes `{name}` placeholders from `vars`.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let bytes = template.as_bytes();
    let mut out = String::with_capacity(template.len() + 256);
    let mut i = 0;
    let mut literal_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push_str(&template[literal_start..i]);
                out.push('{');
                i += 2;
                literal_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push_str(&template[literal_start..i]);
                out.push('}');
                i += 2;
                literal_start = i;
            }
            b'{' => {
                let end = template[i + 1..]
                    .find('}')
                    .map(|e| i + 1 + e)
                    .ok_or(TemplateError::UnbalancedBrace(i))?;
                let name = &template[i + 1..end];
                let valid = !name.is_empty()
                    && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                    && !name.starts_with(|c: char| c.is_ascii_digit());
                if !valid {
                    return Err(TemplateError::UnbalancedBrace(i));
                }
                let value = vars.get(name).ok_or_else(|| TemplateError::MissingVar(name.to_string()))?;
                out.push_str(&template[literal_start..i]);
                out.push_str(value);
                i = end + 1;
                literal_start = i;
            }
            b'}' => return Err(TemplateError::UnbalancedBrace(i)),
            _ => i += 1,
        }
    }
    out.push_str(&template[literal_start..]);
    Ok(out)
}

/// System + user prompt pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateId {
    GradWorkflow,
    GradLoss,
    GradBackprop,
    OptimWorkflow,
    OptimCall,
    InitExecutor,
    JointGrad,
    JointUpdate,
    SingleLayerGrad,
    SingleLayerUpdate,
    Judge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::GradWorkflow,
        TemplateId::GradLoss,
        TemplateId::GradBackprop,
        TemplateId::OptimWorkflow,
        TemplateId::OptimCall,
        TemplateId::InitExecutor,
        TemplateId::JointGrad,
        TemplateId::JointUpdate,
        TemplateId::SingleLayerGrad,
        TemplateId::SingleLayerUpdate,
        TemplateId::Judge,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateId::GradWorkflow => "grad_workflow",
            TemplateId::GradLoss => "grad_loss",
            TemplateId::GradBackprop => "grad_backprop",
            TemplateId::OptimWorkflow => "optim_workflow",
            TemplateId::OptimCall => "optim_call",
            TemplateId::InitExecutor => "init_executor",
            TemplateId::JointGrad => "joint_grad",
            TemplateId::JointUpdate => "joint_update",
            TemplateId::SingleLayerGrad => "single_layer_grad",
            TemplateId::SingleLayerUpdate => "single_layer_update",
            TemplateId::Judge => "judge",
        }
    }

    fn builtin(self) -> (&'static str, &'static str) {
        macro_rules! pair {
            ($stem:literal) => {
                (
                    include_str!(concat!("../templates/", $stem, ".system.txt")),
                    include_str!(concat!("../templates/", $stem, ".user.txt")),
                )
            };
        }
        match self {
            TemplateId::GradWorkflow => pair!("grad_workflow"),
            TemplateId::GradLoss => pair!("grad_loss"),
            TemplateId::GradBackprop => pair!("grad_backprop"),
            TemplateId::OptimWorkflow => pair!("optim_workflow"),
            TemplateId::OptimCall => pair!("optim_call"),
            TemplateId::InitExecutor => pair!("init_executor"),
            TemplateId::JointGrad => pair!("joint_grad"),
            TemplateId::JointUpdate => pair!("joint_update"),
            TemplateId::SingleLayerGrad => pair!("single_layer_grad"),
            TemplateId::SingleLayerUpdate => pair!("single_layer_update"),
            TemplateId::Judge => pair!("judge"),
        }
    }
}

const TOOL_PROTOCOL: &str = include_str!("../templates/tool_protocol.txt");

/// Header of the sketch section appended to step-level grad/optim prompts.
pub const SKETCH_SECTION_HEADER: &str = "## Workflow Sketch";

/// Fills `{output_format_instruction}` in the outer-loop prompt.
pub const OUTPUT_FORMAT_INSTRUCTION: &str = "Output format: a single JSON object with keys \"reasoning\" (string), \"should_update\" (boolean) and \"updated_execution_plan\" (list of steps with step_id, description, tools, executor_type, executor_name, generation_guideline); no prose outside the JSON.";

#[derive(Debug, Clone)]
pub struct Templates {
    pairs: BTreeMap<TemplateId, (String, String)>,
    tool_protocol: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        let pairs = TemplateId::ALL
            .into_iter()
            .map(|id| {
                let (s, u) = id.builtin();
                (id, (s.to_string(), u.to_string()))
            })
            .collect();
        Self {
            pairs,
            tool_protocol: TOOL_PROTOCOL.to_string(),
        }
    }

    /// Built-ins, with any `<stem>.system.txt` / `<stem>.user.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut t = Self::builtin();
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| TemplateError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        for id in TemplateId::ALL {
            let entry = t.pairs.get_mut(&id).expect("all ids present");
            let sys = dir.join(format!("{}.system.txt", id.file_stem()));
            if sys.exists() {
                entry.0 = read(&sys)?;
            }
            let user = dir.join(format!("{}.user.txt", id.file_stem()));
            if user.exists() {
                entry.1 = read(&user)?;
            }
        }
        let tp = dir.join("tool_protocol.txt");
        if tp.exists() {
            t.tool_protocol = read(&tp)?;
        }
        Ok(t)
    }

    pub fn raw(&self, id: TemplateId) -> (&str, &str) {
        let (s, u) = &self.pairs[&id];
        (s, u)
    }

    pub fn render(&self, id: TemplateId, vars: &BTreeMap<&str, String>) -> Result<PromptPair, TemplateError> {
        let (s, u) = self.raw(id);
        Ok(PromptPair {
            system: render(s, vars)?.trim_end().to_string(),
            user: render(u, vars)?.trim_end().to_string(),
        })
    }

    pub fn tool_protocol(&self, tool_list: &str) -> Result<String, TemplateError> {
        let vars = BTreeMap::from([("tool_list", tool_list.to_string())]);
        Ok(render(&self.tool_protocol, &vars)?.trim_end().to_string())
    }
}

/// Appends the workflow sketch section to a rendered user prompt.
pub fn with_sketch_section(user: String, sketch_table: &str) -> String {
    format!("{user}\n\n{SKETCH_SECTION_HEADER}\n{}", sketch_table.trim_end())
}
