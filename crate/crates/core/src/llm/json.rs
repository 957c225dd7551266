use serde_json::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JsonError {
    #[error("no JSON found in model output")]
    NoJsonFound { raw: String },
    #[error("malformed JSON in model output: {message}")]
    MalformedJson { raw: String, message: String },
    #[error("JSON does not match the expected shape: {message}")]
    Schema { raw: String, message: String },
}

impl JsonError {
    pub fn raw(&self) -> &str {
        match self {
            JsonError::NoJsonFound { raw } | JsonError::MalformedJson { raw, .. } | JsonError::Schema { raw, .. } => raw,
        }
    }
}

/// Bodies of every ```json fenced block, in order.
fn fenced_json_blocks(content: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = content;
    while let Some(start) = find_fence_open(rest) {
        let after_tag = &rest[start..];
        let body_start = match after_tag.find('\n') {
            Some(nl) => nl + 1,
            None => break,
        };
        let body = &after_tag[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => break,
        }
    }
    out
}

fn find_fence_open(s: &str) -> Option<usize> {
    let lower = s.to_ascii_lowercase();
    lower.find("```json")
}

/// Parses the first well-formed fenced ```json block, else the whole body.
pub fn extract_json(content: &str) -> Result<Value, JsonError> {
    let blocks = fenced_json_blocks(content);
    let mut first_err = None;
    for b in &blocks {
        match serde_json::from_str::<Value>(b.trim()) {
            Ok(v) => return Ok(v),
            Err(e) => {
                first_err.get_or_insert(e.to_string());
            }
        }
    }
    let body = content.trim();
    match serde_json::from_str::<Value>(body) {
        Ok(v) => Ok(v),
        Err(e) => {
            let looks_like_json = body.starts_with('{') || body.starts_with('[');
            if let Some(message) = first_err {
                Err(JsonError::MalformedJson {
                    raw: content.to_string(),
                    message,
                })
            } else if looks_like_json {
                Err(JsonError::MalformedJson {
                    raw: content.to_string(),
                    message: e.to_string(),
                })
            } else {
                Err(JsonError::NoJsonFound {
                    raw: content.to_string(),
                })
            }
        }
    }
}

/// Wraps a value in a ```json fence.
pub fn render_fenced(value: &Value) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(value).expect("json"))
}
