use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diff::approx_tokens;
use crate::types::AgentRole;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_output_tokens: u64,
    /// Ceiling on prompt size; oversized user input is truncated to fit.
    pub max_input_tokens: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            temperature: 0.0,
            seed: 42,
            max_output_tokens: 2048,
            max_input_tokens: 8192,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.max_output_tokens == 0 || self.max_input_tokens == 0 {
            return Err(BackendError::Config("token caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, o: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + o.input_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
        }
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("ScriptExhaustedError: no script entry matches a {role} call (input starts {input_start:?})")]
    ScriptExhausted { role: AgentRole, input_start: String },
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest<'a> {
    pub role: AgentRole,
    pub system_prompt: &'a str,
    pub user_input: &'a str,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

/// A language model. `on_token` receives the output incrementally; the chunks
/// concatenate to `Completion::text`.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> String;
    fn complete(&self, request: &ModelRequest<'_>, on_token: &mut dyn FnMut(&str)) -> Result<Completion, BackendError>;
}

/// Cuts `text` after its `max`-th whitespace-delimited word, keeping the
/// original bytes of the kept prefix.
pub fn truncate_tokens(text: &str, max: u64) -> &str {
    let mut words = 0u64;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word && words == max {
                return &text[..i];
            }
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
            if words > max {
                return &text[..i];
            }
        }
    }
    text
}

/// Splits text into streaming chunks (one word plus its trailing whitespace).
pub fn token_chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let word_end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let end = rest[word_end..]
            .find(|c: char| !c.is_whitespace())
            .map_or(rest.len(), |o| word_end + o);
        let (chunk, tail) = rest.split_at(end);
        rest = tail;
        Some(chunk)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matcher {
    /// Role the call must come from; any role when absent.
    #[serde(default)]
    pub role: Option<AgentRole>,
    /// Substring the user input must contain.
    #[serde(default)]
    pub contains: Option<String>,
}

impl Matcher {
    fn matches(&self, role: AgentRole, input: &str) -> bool {
        self.role.map_or(true, |r| r == role) && self.contains.as_deref().map_or(true, |s| input.contains(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub response: String,
    /// Reusable entries are never consumed.
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptEntry {
    pub fn once(role: Option<AgentRole>, contains: Option<&str>, response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: Matcher {
                role,
                contains: contains.map(String::from),
            },
            response: response.into(),
            repeat: false,
        }
    }

    pub fn always(role: Option<AgentRole>, contains: Option<&str>, response: impl Into<String>) -> Self {
        ScriptEntry {
            repeat: true,
            ..Self::once(role, contains, response)
        }
    }
}

/// On-disk script: `{"entries": [{"role": "coder", "contains": "...", "response": "...", "repeat": false}]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub name: String,
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Script, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub role: AgentRole,
    pub user_input: String,
    pub response: String,
}

/// Deterministic test double: each call takes the first entry whose matcher
/// accepts (role, input). Usage is counted in whitespace-delimited words.
#[derive(Debug)]
pub struct ScriptedBackend {
    state: Mutex<(Vec<ScriptEntry>, Vec<RecordedCall>)>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        if entries.is_empty() {
            return Err(BackendError::Config("script has no entries".into()));
        }
        Ok(ScriptedBackend {
            state: Mutex::new((entries, Vec::new())),
        })
    }

    pub fn from_script(script: Script) -> Result<Self, BackendError> {
        Self::new(script.entries)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Self::from_script(Script::load(path)?)
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).1.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).0.len()
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, req: &ModelRequest<'_>, on_token: &mut dyn FnMut(&str)) -> Result<Completion, BackendError> {
        let response = {
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            let (entries, calls) = &mut *state;
            let Some(at) = entries.iter().position(|e| e.matcher.matches(req.role, req.user_input)) else {
                return Err(BackendError::ScriptExhausted {
                    role: req.role,
                    input_start: req.user_input.chars().take(60).collect(),
                });
            };
            let response = if entries[at].repeat {
                entries[at].response.clone()
            } else {
                entries.remove(at).response
            };
            let response = truncate_tokens(&response, req.params.max_output_tokens).to_string();
            calls.push(RecordedCall {
                role: req.role,
                user_input: req.user_input.to_string(),
                response: response.clone(),
            });
            response
        };
        for chunk in token_chunks(&response) {
            on_token(chunk);
        }
        Ok(Completion {
            usage: TokenUsage {
                input_tokens: (approx_tokens(req.system_prompt) + approx_tokens(req.user_input)) as u64,
                output_tokens: approx_tokens(&response) as u64,
            },
            text: response,
        })
    }
}

/// Streaming client for an OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base_url: String,
    model: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    /// `token_env` names the environment variable holding the API token.
    pub fn new(base_url: &str, model: &str, token_env: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(RemoteBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            token: std::env::var(token_env).ok().filter(|t| !t.is_empty()),
            client,
        })
    }

    fn body(&self, req: &ModelRequest<'_>) -> Value {
        json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": req.system_prompt },
                { "role": "user", "content": req.user_input },
            ],
            "temperature": req.params.temperature,
            "seed": req.params.seed,
            "max_tokens": req.params.max_output_tokens,
            "stream": true,
            "stream_options": { "include_usage": true },
        })
    }
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote/{}", self.model)
    }

    fn complete(&self, req: &ModelRequest<'_>, on_token: &mut dyn FnMut(&str)) -> Result<Completion, BackendError> {
        let mut http = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&self.body(req));
        if let Some(token) = &self.token {
            http = http.bearer_auth(token);
        }
        let resp = http.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        let mut text = String::new();
        let mut usage = None;
        for line in BufReader::new(resp).lines() {
            let line = line.map_err(|e| BackendError::Transport(e.to_string()))?;
            let Some(data) = line.strip_prefix("data:").map(str::trim) else {
                continue;
            };
            if data == "[DONE]" {
                break;
            }
            let event: Value = serde_json::from_str(data).map_err(|e| BackendError::Protocol(format!("{e}: {data}")))?;
            if let Some(delta) = event["choices"][0]["delta"]["content"].as_str() {
                if !delta.is_empty() {
                    on_token(delta);
                    text.push_str(delta);
                }
            }
            if let Some(u) = event.get("usage").filter(|u| u.is_object()) {
                usage = Some(TokenUsage {
                    input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
                    output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
                });
            }
        }
        let usage = usage.unwrap_or_else(|| TokenUsage {
            input_tokens: (approx_tokens(req.system_prompt) + approx_tokens(req.user_input)) as u64,
            output_tokens: approx_tokens(&text) as u64,
        });
        Ok(Completion { text, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req<'a>(role: AgentRole, input: &'a str) -> ModelRequest<'a> {
        ModelRequest {
            role,
            system_prompt: "sys",
            user_input: input,
            params: ModelParams::default(),
        }
    }

    #[test]
    fn catch_all_repeats() {
        let b = ScriptedBackend::new(vec![ScriptEntry::always(None, None, "same")]).unwrap();
        for _ in 0..3 {
            assert_eq!(b.complete(&req(AgentRole::Coder, "x"), &mut |_| {}).unwrap().text, "same");
        }
        assert_eq!(b.calls().len(), 3);
    }

    #[test]
    fn role_matchers_and_exhaustion() {
        let b = ScriptedBackend::new(vec![
            ScriptEntry::once(Some(AgentRole::Planner), None, "plan"),
            ScriptEntry::once(Some(AgentRole::Coder), Some("calc"), "code"),
        ])
        .unwrap();
        assert_eq!(b.complete(&req(AgentRole::Coder, "fix calc"), &mut |_| {}).unwrap().text, "code");
        assert_eq!(b.complete(&req(AgentRole::Planner, "t"), &mut |_| {}).unwrap().text, "plan");
        assert!(matches!(
            b.complete(&req(AgentRole::Planner, "t"), &mut |_| {}),
            Err(BackendError::ScriptExhausted { .. })
        ));
        assert!(ScriptedBackend::new(vec![]).is_err());
    }

    #[test]
    fn streamed_chunks_concatenate_to_output() {
        let text = "def f(x):\n    return x  + 1\n\n";
        let b = ScriptedBackend::new(vec![ScriptEntry::always(None, None, text)]).unwrap();
        let mut streamed = String::new();
        let out = b.complete(&req(AgentRole::Coder, "x"), &mut |t| streamed.push_str(t)).unwrap();
        assert_eq!(streamed, text);
        assert_eq!(out.usage.output_tokens, 6);
        assert_eq!(out.usage.input_tokens, 2);
    }

    #[test]
    fn output_cap_truncates() {
        assert_eq!(truncate_tokens("a b  c d", 2), "a b");
        assert_eq!(truncate_tokens("  a b", 5), "  a b");
        assert_eq!(truncate_tokens("a", 0), "");
        let mut params = ModelParams::default();
        params.max_output_tokens = 2;
        let b = ScriptedBackend::new(vec![ScriptEntry::always(None, None, "one two three")]).unwrap();
        let r = ModelRequest { params, ..req(AgentRole::Coder, "x") };
        assert_eq!(b.complete(&r, &mut |_| {}).unwrap().text, "one two");
    }

    #[test]
    fn script_json_format() {
        let s: Script = serde_json::from_str(
            r#"{"entries":[{"role":"critic","response":"PASS"},{"contains":"x","response":"y","repeat":true}]}"#,
        )
        .unwrap();
        assert_eq!(s.entries[0].matcher.role, Some(AgentRole::Critic));
        assert!(s.entries[1].repeat);
    }
}
