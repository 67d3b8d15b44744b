//! The five agents as typed operations over a [`ModelBackend`].
//!
//! Every backend call goes through an [`AgentSession`], which records one
//! [`AgentTranscript`] per call and forwards streamed tokens to an observer.

mod backend;
pub mod prompts;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use backend::{
    token_chunks, truncate_tokens, BackendError, Completion, Matcher, ModelBackend, ModelParams, ModelRequest,
    RecordedCall, RemoteBackend, Script, ScriptEntry, ScriptedBackend, TokenUsage,
};
pub use prompts::PromptTemplate;

use crate::diff::{approx_tokens, make_diff, parse_unified_diff};
use crate::retrieval::RetrievalHit;
use crate::types::{AgentRole, CodeArtifact, Plan, RelPath, Step, Task, TestSuite, TypeError};

/// Target for coder steps that name no file.
pub const DEFAULT_NEW_FILE: &str = "solution.py";

const TRUNCATED: &str = "\n[truncated]";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("PlanParseError: {0}")]
    PlanParse(String),
    #[error("EmptyPlanError: plan has no steps")]
    EmptyPlan,
    #[error("SchemaError at {field}: {message}")]
    Schema { field: String, message: String },
    #[error("CoderEmptyError: coder returned no content")]
    CoderEmpty,
    #[error("TesterEmptyError: tester returned no content")]
    TesterEmpty,
    #[error("DebuggerEmptyError: debugger returned no content")]
    DebuggerEmpty,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictValue {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub rationale: String,
}

impl Verdict {
    pub fn pass(rationale: impl Into<String>) -> Self {
        Verdict {
            value: VerdictValue::Pass,
            rationale: rationale.into(),
        }
    }

    pub fn fail(rationale: impl Into<String>) -> Self {
        Verdict {
            value: VerdictValue::Fail,
            rationale: rationale.into(),
        }
    }

    pub fn is_pass(&self) -> bool {
        self.value == VerdictValue::Pass
    }
}

/// One backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub agent: AgentRole,
    pub system_prompt_id: String,
    /// SHA-256 of the user input actually sent.
    pub input_digest: String,
    pub raw_output: String,
    pub usage: TokenUsage,
}

/// Character budgets for context serialized into prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub memory_chars: usize,
    pub repo_chars: usize,
    /// Cap on a single entry of the step-results digest.
    pub result_entry_chars: usize,
    pub results_chars: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        ContextBudget {
            memory_chars: 4000,
            repo_chars: 8000,
            result_entry_chars: 1500,
            results_chars: 4000,
        }
    }
}

/// Coder result. A diff that fails to parse or apply leaves the file as it was
/// and carries the error, which the orchestrator feeds to the debugger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoderOutput {
    pub artifact: CodeArtifact,
    pub apply_error: Option<String>,
}

type TokenObserver<'a> = Box<dyn FnMut(AgentRole, &str) + Send + 'a>;

/// Agent calls for one run.
pub struct AgentSession<'a> {
    backend: &'a dyn ModelBackend,
    params: ModelParams,
    budget: ContextBudget,
    transcripts: Vec<AgentTranscript>,
    on_token: TokenObserver<'a>,
}

impl std::fmt::Debug for AgentSession<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentSession")
            .field("backend", &self.backend.name())
            .field("params", &self.params)
            .field("transcripts", &self.transcripts.len())
            .finish()
    }
}

/// Keeps at most `max` characters, marking the cut.
pub fn clip(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        None => text.to_string(),
        Some((i, _)) => format!("{}{TRUNCATED}", &text[..i]),
    }
}

/// Unwraps a reply wrapped in a triple-backtick fence, dropping any language
/// tag. Unfenced text is returned unchanged.
pub fn strip_fences(text: &str) -> String {
    let trimmed = text.trim();
    let Some(after) = trimmed.strip_prefix("```") else {
        return text.to_string();
    };
    let Some((_tag, body)) = after.split_once('\n') else {
        return String::new();
    };
    let body = body.trim_end();
    let body = body.strip_suffix("```").unwrap_or(body);
    if body.is_empty() || body.ends_with('\n') {
        body.to_string()
    } else {
        format!("{body}\n")
    }
}

/// Step results for later prompts: most recent first, each entry capped, and
/// entries dropped once the total budget is spent.
pub fn digest_results(results: &[String], budget: &ContextBudget) -> String {
    let mut out = String::new();
    for entry in results.iter().rev() {
        let entry = clip(entry, budget.result_entry_chars);
        let used = out.chars().count();
        if used > 0 && used + entry.chars().count() + 2 > budget.results_chars {
            out.push_str("[earlier results omitted]\n");
            break;
        }
        out.push_str(&entry);
        out.push_str("\n\n");
    }
    out
}

fn serialize_hits(hits: &[RetrievalHit], budget: usize, render: impl Fn(&RetrievalHit) -> String) -> String {
    let mut hits: Vec<&RetrievalHit> = hits.iter().collect();
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
    let mut out = String::new();
    for h in hits {
        out.push_str(&render(h));
        out.push('\n');
    }
    clip(&out, budget)
}

/// The pre-edit file as a patched artifact with an empty diff.
fn unchanged(path: &RelPath, original: &str) -> CodeArtifact {
    CodeArtifact::patched(path.clone(), original, make_diff(path.as_str(), original, original))
        .expect("an empty diff always applies")
}

fn text_field<'v>(v: &'v Value, key: &str) -> &'v str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> AgentError {
    AgentError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

fn extract_json(text: &str) -> Result<Value, String> {
    let body = strip_fences(text);
    match serde_json::from_str::<Value>(body.trim()) {
        Ok(v) => Ok(v),
        Err(first) => {
            let (Some(start), Some(end)) = (body.find('{'), body.rfind('}')) else {
                return Err(first.to_string());
            };
            if end <= start {
                return Err(first.to_string());
            }
            serde_json::from_str(&body[start..=end]).map_err(|_| first.to_string())
        }
    }
}

/// Validates a plan object against the plan schema.
pub fn plan_from_json(value: &Value) -> Result<Plan, AgentError> {
    let obj = value.as_object().ok_or_else(|| schema("$", "plan must be a JSON object"))?;
    let explanation = match obj.get("explanation") {
        None | Some(Value::Null) => "",
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(schema("explanation", "must be a string")),
    };
    let steps = obj
        .get("steps")
        .ok_or_else(|| schema("steps", "missing"))?
        .as_array()
        .ok_or_else(|| schema("steps", "must be an array"))?;
    if steps.is_empty() {
        return Err(AgentError::EmptyPlan);
    }
    let mut parsed = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        let field = |name: &str| format!("steps[{i}].{name}");
        let s = s.as_object().ok_or_else(|| schema(format!("steps[{i}]"), "must be an object"))?;
        let agent_raw = s
            .get("agent")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(field("agent"), "missing or not a string"))?;
        let agent =
            AgentRole::parse(agent_raw).ok_or_else(|| schema(field("agent"), format!("unknown agent {agent_raw:?}")))?;
        if agent == AgentRole::Planner {
            return Err(schema(field("agent"), "a plan cannot contain planner steps"));
        }
        let description = s
            .get("description")
            .and_then(Value::as_str)
            .filter(|d| !d.trim().is_empty())
            .ok_or_else(|| schema(field("description"), "missing or empty"))?;
        let target = match s.get("file") {
            None | Some(Value::Null) => None,
            Some(Value::String(p)) => {
                Some(RelPath::new(p).map_err(|e: TypeError| schema(field("file"), e.to_string()))?)
            }
            Some(_) => return Err(schema(field("file"), "must be a string or null")),
        };
        parsed.push(Step::new(agent, description, target));
    }
    Plan::new(explanation, parsed).map_err(|e| match e {
        TypeError::NoCoderStep => schema("steps", "plan needs at least one coder step"),
        other => schema("steps", other.to_string()),
    })
}

/// Maps the first line of a critic reply to a verdict; anything other than an
/// exact PASS or FAIL token is unparseable.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let text = strip_fences(text);
    let text = text.trim_start();
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let value = match first.trim() {
        "PASS" => VerdictValue::Pass,
        "FAIL" => VerdictValue::Fail,
        _ => return None,
    };
    Some(Verdict {
        value,
        rationale: rest.trim().to_string(),
    })
}

impl<'a> AgentSession<'a> {
    pub fn new(backend: &'a dyn ModelBackend, params: ModelParams, budget: ContextBudget) -> Self {
        AgentSession {
            backend,
            params,
            budget,
            transcripts: Vec::new(),
            on_token: Box::new(|_, _| {}),
        }
    }

    /// Observer for streamed output tokens.
    pub fn with_token_observer(mut self, f: impl FnMut(AgentRole, &str) + Send + 'a) -> Self {
        self.on_token = Box::new(f);
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn budget(&self) -> &ContextBudget {
        &self.budget
    }

    pub fn transcripts(&self) -> &[AgentTranscript] {
        &self.transcripts
    }

    pub fn into_transcripts(self) -> Vec<AgentTranscript> {
        self.transcripts
    }

    pub fn usage(&self) -> TokenUsage {
        self.transcripts.iter().map(|t| t.usage).sum()
    }

    fn call(&mut self, role: AgentRole, template: &PromptTemplate, input: &str) -> Result<String, AgentError> {
        let system_tokens = approx_tokens(template.text) as u64;
        let allowed = self.params.max_input_tokens.saturating_sub(system_tokens);
        let user_input = if approx_tokens(input) as u64 > allowed {
            // The marker itself is two words.
            format!("{}{TRUNCATED}", truncate_tokens(input, allowed.saturating_sub(1)))
        } else {
            input.to_string()
        };
        let request = ModelRequest {
            role,
            system_prompt: template.text,
            user_input: &user_input,
            params: self.params,
        };
        let on_token = &mut self.on_token;
        let completion = self.backend.complete(&request, &mut |t| on_token(role, t))?;
        self.transcripts.push(AgentTranscript {
            agent: role,
            system_prompt_id: template.id(),
            input_digest: hex::encode(Sha256::digest(user_input.as_bytes())),
            raw_output: completion.text.clone(),
            usage: completion.usage,
        });
        Ok(completion.text)
    }

    /// Planner. Malformed JSON earns one re-prompt; schema violations fail at once.
    pub fn plan(&mut self, task: &Task, memory: &[RetrievalHit], repo: &[RetrievalHit]) -> Result<Plan, AgentError> {
        let memory_ctx = serialize_hits(memory, self.budget.memory_chars, |h| {
            format!(
                "### Similar solved task (similarity {:.3})\nTask: {}\nSolution:\n{}",
                h.similarity,
                text_field(&h.payload, "task_text"),
                text_field(&h.payload, "code"),
            )
        });
        let repo_ctx = serialize_hits(repo, self.budget.repo_chars, |h| {
            format!("### {} (similarity {:.3})\n{}", h.id, h.similarity, text_field(&h.payload, "content"))
        });
        let mut files = String::new();
        for f in &task.context_files {
            files.push_str(&format!("### {}\n{}\n", f.path, f.content));
        }
        let input = format!(
            "Task: {}\n\nTask files:\n{}\nRepository context:\n{}\nPast solutions:\n{}",
            task.description,
            clip(&files, self.budget.repo_chars),
            repo_ctx,
            memory_ctx,
        );
        let output = self.call(AgentRole::Planner, &prompts::PLANNER, &input)?;
        let value = match extract_json(&output) {
            Ok(v) => v,
            Err(e) => {
                let retry = format!(
                    "{input}\n\nYour previous reply was not valid JSON ({e}). Reply with only the JSON plan object."
                );
                let output = self.call(AgentRole::Planner, &prompts::PLANNER, &retry)?;
                extract_json(&output).map_err(AgentError::PlanParse)?
            }
        };
        plan_from_json(&value)
    }

    /// Coder. With `pre_edit` the backend is asked for a diff against it,
    /// otherwise for a whole new file.
    pub fn generate_code(
        &mut self,
        task: &Task,
        step: &Step,
        pre_edit: Option<&str>,
        prior_results: &[String],
    ) -> Result<CoderOutput, AgentError> {
        if step.agent != AgentRole::Coder {
            return Err(AgentError::Precondition(format!("generate_code called for a {} step", step.agent)));
        }
        let path = match &step.target_file {
            Some(p) => p.clone(),
            None => RelPath::new(DEFAULT_NEW_FILE).expect("constant path is valid"),
        };
        let results = digest_results(prior_results, &self.budget);
        match pre_edit {
            Some(original) => {
                let input = format!(
                    "Task: {}\nStep: {}\nFile: {path}\n\nCurrent contents of {path}:\n{original}\nResults so far:\n{results}",
                    task.description, step.description,
                );
                let output = self.call(AgentRole::Coder, &prompts::CODER_DIFF, &input)?;
                let text = strip_fences(&output);
                if text.trim().is_empty() {
                    return Err(AgentError::CoderEmpty);
                }
                let applied = parse_unified_diff(&text).map_err(|e| e.to_string()).and_then(|d| {
                    match d.path() {
                        Some(p) if p != &path => Err(format!("ApplyError: diff targets {p}, expected {path}")),
                        _ => CodeArtifact::patched(path.clone(), original, d).map_err(|e| e.to_string()),
                    }
                });
                Ok(match applied {
                    Ok(artifact) => CoderOutput {
                        artifact,
                        apply_error: None,
                    },
                    Err(e) => CoderOutput {
                        artifact: unchanged(&path, original),
                        apply_error: Some(format!("{e}\nThe proposed diff was:\n{text}")),
                    },
                })
            }
            None => {
                let input = format!(
                    "Task: {}\nStep: {}\nFile: {path}\n\nResults so far:\n{results}",
                    task.description, step.description,
                );
                let output = self.call(AgentRole::Coder, &prompts::CODER_NEW, &input)?;
                let text = strip_fences(&output);
                if text.trim().is_empty() {
                    return Err(AgentError::CoderEmpty);
                }
                Ok(CoderOutput {
                    artifact: CodeArtifact::new_file(path, text),
                    apply_error: None,
                })
            }
        }
    }

    /// Tester. The suite lives next to the code as `test_<file name>`.
    pub fn generate_tests(&mut self, code: &CodeArtifact, step: &Step) -> Result<TestSuite, AgentError> {
        let module = code.path.file_name().split('.').next().unwrap_or_default();
        let input = format!(
            "Step: {}\nCode file: {} (import it as module `{module}`)\n\n{}",
            step.description, code.path, code.content,
        );
        let output = self.call(AgentRole::Tester, &prompts::TESTER, &input)?;
        let content = strip_fences(&output);
        if content.trim().is_empty() {
            return Err(AgentError::TesterEmpty);
        }
        Ok(TestSuite {
            path: code.path.test_path(),
            content,
        })
    }

    /// Debugger: whole-file replacement at the same path.
    pub fn debug(&mut self, code: &CodeArtifact, error_output: &str) -> Result<CodeArtifact, AgentError> {
        if error_output.trim().is_empty() {
            return Err(AgentError::Precondition("debug needs non-empty error output".into()));
        }
        let input = format!(
            "File: {}\n\n{}\nError output:\n{}",
            code.path,
            code.content,
            clip(error_output, self.budget.results_chars),
        );
        let output = self.call(AgentRole::Debugger, &prompts::DEBUGGER, &input)?;
        let content = strip_fences(&output);
        if content.trim().is_empty() {
            return Err(AgentError::DebuggerEmpty);
        }
        Ok(code.replaced(content))
    }

    /// Critic. Fails closed: an unparseable reply after one re-prompt is FAIL.
    pub fn critique(&mut self, task: &Task, results: &[String]) -> Result<Verdict, AgentError> {
        if results.is_empty() {
            return Err(AgentError::Precondition("critique needs at least one result".into()));
        }
        let input = format!("Task: {}\n\nResults:\n{}", task.description, digest_results(results, &self.budget));
        let output = self.call(AgentRole::Critic, &prompts::CRITIC, &input)?;
        if let Some(v) = parse_verdict(&output) {
            return Ok(v);
        }
        let retry = format!("{input}\n\nYour previous reply did not start with PASS or FAIL. Reply PASS or FAIL on the first line.");
        let output = self.call(AgentRole::Critic, &prompts::CRITIC, &retry)?;
        Ok(parse_verdict(&output).unwrap_or_else(|| Verdict::fail("unparseable verdict")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_fences("```python\ndef f():\n    pass\n```"), "def f():\n    pass\n");
        assert_eq!(strip_fences("  ```\nx = 1\n```\n"), "x = 1\n");
        assert_eq!(strip_fences("x = 1\n"), "x = 1\n");
    }

    #[test]
    fn verdict_parsing_is_strict() {
        assert!(parse_verdict("PASS\nall good").unwrap().is_pass());
        assert_eq!(parse_verdict("FAIL\nregression").unwrap().rationale, "regression");
        for bad in ["MAYBE", "pass", "PASSED", "PASS FAIL", "", "Verdict: PASS"] {
            assert_eq!(parse_verdict(bad), None, "{bad:?}");
        }
    }

    #[test]
    fn clip_marks_cuts() {
        assert_eq!(clip("abc", 5), "abc");
        assert_eq!(clip("abcdef", 3), format!("abc{TRUNCATED}"));
        assert_eq!(clip("ééé", 2), format!("éé{TRUNCATED}"));
    }

    #[test]
    fn results_digest_most_recent_first() {
        let budget = ContextBudget {
            result_entry_chars: 10,
            results_chars: 45,
            ..ContextBudget::default()
        };
        let r = vec!["first".to_string(), "second".into(), "x".repeat(50)];
        let d = digest_results(&r, &budget);
        assert!(d.starts_with(&"x".repeat(10)));
        assert!(d.find("second").unwrap() < d.find("first").unwrap_or(usize::MAX));
        let tight = ContextBudget {
            results_chars: 25,
            ..budget
        };
        assert!(digest_results(&r, &tight).contains("omitted"));
    }

    #[test]
    fn plan_schema_errors_name_fields() {
        let v: Value = serde_json::from_str(r#"{"steps":[{"agent":"coder","description":"x"},{"agent":"reviewer","description":"y"}]}"#).unwrap();
        match plan_from_json(&v) {
            Err(AgentError::Schema { field, .. }) => assert_eq!(field, "steps[1].agent"),
            other => panic!("{other:?}"),
        }
        let v: Value = serde_json::from_str(r#"{"explanation":"e","steps":[]}"#).unwrap();
        assert_eq!(plan_from_json(&v), Err(AgentError::EmptyPlan));
        let v: Value = serde_json::from_str(r#"{"steps":[{"agent":"tester","description":"t"}]}"#).unwrap();
        assert!(matches!(plan_from_json(&v), Err(AgentError::Schema { .. })));
    }
}
