//! The pipeline: retrieve, plan, dispatch steps, repair against real test runs,
//! judge, and persist successful solutions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{
    AgentError, AgentSession, AgentTranscript, ContextBudget, ModelBackend, ModelParams, TokenUsage, Verdict,
    DEFAULT_NEW_FILE,
};
use crate::diff::make_diff;
use crate::retrieval::{EpisodicMemory, RepoIndex, RetrievalError, RetrievalHit};
use crate::sandbox::{pass_predicate, ExecutionOutcome, PredicateConfig, ResourceLimits, Sandbox, SandboxError};
use crate::types::{AgentRole, CodeArtifact, Plan, RelPath, Step, Task, TaskId, TestSuite};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("ConfigError: {0}")]
pub struct ConfigError(pub String);

/// USD per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Pricing {
            input_per_million: 2.50,
            output_per_million: 10.00,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: f64,
}

/// Exact token totals over `transcripts` and their price.
pub fn account_cost(transcripts: &[AgentTranscript], pricing: &Pricing) -> Result<CostReport, ConfigError> {
    if !(pricing.input_per_million >= 0.0 && pricing.output_per_million >= 0.0) {
        return Err(ConfigError("pricing must be non-negative".into()));
    }
    let usage: TokenUsage = transcripts.iter().map(|t| t.usage).sum();
    Ok(CostReport {
        input_tokens: usage.input_tokens,
        output_tokens: usage.output_tokens,
        cost_usd: cost_of(usage.input_tokens, usage.output_tokens, pricing),
    })
}

pub fn cost_of(input_tokens: u64, output_tokens: u64, pricing: &Pricing) -> f64 {
    input_tokens as f64 * pricing.input_per_million / 1e6 + output_tokens as f64 * pricing.output_per_million / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_retry: u32,
    pub retrieval_k: usize,
    pub disabled_agents: BTreeSet<AgentRole>,
    pub params: ModelParams,
    pub budget: ContextBudget,
    pub limits: ResourceLimits,
    pub pricing: Pricing,
    /// Stop the debug loop when the debugger returns the code unchanged.
    pub stagnation: bool,
    pub predicate: PredicateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_retry: 3,
            retrieval_k: 5,
            disabled_agents: BTreeSet::new(),
            params: ModelParams::default(),
            budget: ContextBudget::default(),
            limits: ResourceLimits::default(),
            pricing: Pricing::default(),
            stagnation: true,
            predicate: PredicateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn without(mut self, role: AgentRole) -> Self {
        self.disabled_agents.insert(role);
        self
    }

    pub fn enabled(&self, role: AgentRole) -> bool {
        !self.disabled_agents.contains(&role)
    }

    /// Retries the debug loop may actually use.
    pub fn effective_retries(&self) -> u32 {
        if self.enabled(AgentRole::Debugger) {
            self.n_retry
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.disabled_agents.len() == AgentRole::ALL.len() {
            return Err(ConfigError("all five agents are disabled".into()));
        }
        if !self.enabled(AgentRole::Coder) {
            return Err(ConfigError("the coder cannot be disabled: no plan could produce code".into()));
        }
        self.params.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.limits.validate().map_err(|e| ConfigError(e.to_string()))?;
        if !(self.pricing.input_per_million >= 0.0 && self.pricing.output_per_million >= 0.0) {
            return Err(ConfigError("pricing must be non-negative".into()));
        }
        Ok(())
    }

    /// Name used in ablation reports.
    pub fn label(&self) -> String {
        if self.disabled_agents.is_empty() {
            return "full".into();
        }
        self.disabled_agents
            .iter()
            .map(|r| format!("-{r}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Plan used when the planner is disabled.
pub fn fallback_plan() -> Plan {
    Plan::new(
        "fixed plan: implement, test, review",
        vec![
            Step::new(AgentRole::Coder, "Implement the task.", None),
            Step::new(AgentRole::Tester, "Test the implementation.", None),
            Step::new(AgentRole::Critic, "Review the results.", None),
        ],
    )
    .expect("fallback plan is valid")
}

/// Drops steps of disabled agents; a disabled planner swaps in [`fallback_plan`].
pub fn apply_ablation(config: &RunConfig, plan: &Plan) -> Result<Plan, ConfigError> {
    config.validate()?;
    let base = if config.enabled(AgentRole::Planner) {
        plan.clone()
    } else {
        fallback_plan()
    };
    let steps: Vec<Step> = base
        .steps
        .into_iter()
        .filter(|s| config.enabled(s.agent))
        .collect();
    Plan::new(base.explanation, steps).map_err(|e| ConfigError(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStarted,
    StepStarted,
    Token,
    DebugAttempt,
    ExecutionResult,
    Verdict,
    RunCompleted,
    Error,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RunStarted => "run_started",
            EventKind::StepStarted => "step_started",
            EventKind::Token => "token",
            EventKind::DebugAttempt => "debug_attempt",
            EventKind::ExecutionResult => "execution_result",
            EventKind::Verdict => "verdict",
            EventKind::RunCompleted => "run_completed",
            EventKind::Error => "error",
        }
    }
}

/// Receives pipeline progress. Token payloads carry `agent` and `text`.
pub trait EventSink: Send + Sync {
    fn emit(&self, kind: EventKind, payload: Value);
}

#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _: EventKind, _: Value) {}
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct CollectingSink {
    events: Mutex<Vec<(EventKind, Value)>>,
}

impl CollectingSink {
    pub fn events(&self) -> Vec<(EventKind, Value)> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl EventSink for CollectingSink {
    fn emit(&self, kind: EventKind, payload: Value) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push((kind, payload));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub outcome: ExecutionOutcome,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebugAttempt {
    pub attempt: u32,
    pub artifact: CodeArtifact,
    /// Absent when the repair was byte-identical and the loop stopped.
    pub execution: Option<ExecutionRecord>,
    pub stagnated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoderRecord {
    pub artifact: CodeArtifact,
    pub apply_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TesterRecord {
    pub tests: TestSuite,
    pub initial: ExecutionRecord,
    pub attempts: Vec<DebugAttempt>,
    pub stagnated: bool,
    pub passed: bool,
}

impl TesterRecord {
    pub fn debug_attempts(&self) -> u32 {
        self.attempts.len() as u32
    }

    /// Sandbox runs made for this step.
    pub fn executions(&self) -> usize {
        1 + self.attempts.iter().filter(|a| a.execution.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLog {
    pub index: usize,
    pub step: Step,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coder: Option<CoderRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tester: Option<TesterRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    PlanParse,
    EmptyPlan,
    Schema,
    Agent,
    Backend,
    Infrastructure,
    Retrieval,
    Config,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl RunFailure {
    pub fn is_infrastructure(&self) -> bool {
        self.kind == FailureKind::Infrastructure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRef {
    pub id: String,
    pub similarity: f64,
}

impl From<&RetrievalHit> for HitRef {
    fn from(h: &RetrievalHit) -> Self {
        HitRef {
            id: h.id.clone(),
            similarity: h.similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub task_id: TaskId,
    pub verdict: Verdict,
    pub final_artifact: Option<CodeArtifact>,
    /// Unified diff of every changed file against the task's files.
    pub patch: Option<String>,
    pub plan: Option<Plan>,
    pub memory_hits: Vec<HitRef>,
    pub repo_hits: Vec<HitRef>,
    pub steps: Vec<StepLog>,
    /// Verdict of the closing critique; absent when the critic is disabled.
    pub final_critique: Option<Verdict>,
    pub failure: Option<RunFailure>,
    pub memory_episode: Option<String>,
    pub sandbox_executions: u32,
    pub transcripts: Vec<AgentTranscript>,
    pub usage: TokenUsage,
    pub cost: CostReport,
    pub wall_time_ms: u64,
}

fn strip_wall_times(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_time_ms");
            map.values_mut().for_each(strip_wall_times);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall_times),
        _ => {}
    }
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.verdict.is_pass()
    }

    pub fn debug_attempts(&self) -> u32 {
        self.steps
            .iter()
            .filter_map(|s| s.tester.as_ref())
            .map(TesterRecord::debug_attempts)
            .sum()
    }

    /// Serialization with wall-clock times removed; byte-identical across
    /// repeated deterministic runs.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("RunResult serializes");
        strip_wall_times(&mut v);
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

/// What a run needs besides its task and configuration.
#[derive(Clone, Copy)]
pub struct PipelineDeps<'a> {
    pub backend: &'a dyn ModelBackend,
    pub sandbox: &'a Sandbox,
    pub memory: Option<&'a EpisodicMemory>,
    pub repo: Option<&'a RepoIndex>,
    pub events: &'a dyn EventSink,
}

#[derive(Debug, thiserror::Error)]
enum PipelineError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("sandbox: {0}")]
    Sandbox(#[from] SandboxError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl PipelineError {
    fn into_failure(self) -> RunFailure {
        let kind = match &self {
            PipelineError::Agent(AgentError::PlanParse(_)) => FailureKind::PlanParse,
            PipelineError::Agent(AgentError::EmptyPlan) => FailureKind::EmptyPlan,
            PipelineError::Agent(AgentError::Schema { .. }) => FailureKind::Schema,
            PipelineError::Agent(AgentError::Backend(_)) => FailureKind::Backend,
            PipelineError::Agent(_) => FailureKind::Agent,
            PipelineError::Sandbox(_) => FailureKind::Infrastructure,
            PipelineError::Retrieval(_) => FailureKind::Retrieval,
            PipelineError::Config(_) => FailureKind::Config,
        };
        RunFailure {
            kind,
            message: self.to_string(),
        }
    }
}

/// Result of [`debug_loop`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebugLoopOutcome {
    pub artifact: CodeArtifact,
    pub last: ExecutionRecord,
    pub attempts: Vec<DebugAttempt>,
    pub stagnated: bool,
}

fn error_text(outcome: &ExecutionOutcome) -> String {
    let out = outcome.combined_output();
    if out.trim().is_empty() {
        format!(
            "test run produced no output (exit status {}{})",
            outcome.exit_status,
            if outcome.timed_out { ", timed out" } else { "" }
        )
    } else {
        out
    }
}

fn workspace_without(workspace: &BTreeMap<RelPath, String>, skip: &[&RelPath]) -> Vec<(RelPath, String)> {
    workspace
        .iter()
        .filter(|(p, _)| !skip.contains(p))
        .map(|(p, c)| (p.clone(), c.clone()))
        .collect()
}

fn execute(
    sandbox: &Sandbox,
    config: &RunConfig,
    workspace: &BTreeMap<RelPath, String>,
    code: &CodeArtifact,
    tests: &TestSuite,
) -> Result<ExecutionRecord, SandboxError> {
    let files = workspace_without(workspace, &[&code.path, &tests.path]);
    let outcome = sandbox.execute_with_limits(code, tests, &files, &config.limits)?;
    let passed = pass_predicate(&outcome, &config.predicate);
    Ok(ExecutionRecord { outcome, passed })
}

fn execution_payload(step: usize, attempt: u32, r: &ExecutionRecord) -> Value {
    json!({
        "step": step,
        "attempt": attempt,
        "passed": r.passed,
        "exit_status": r.outcome.exit_status,
        "timed_out": r.outcome.timed_out,
        "oom_killed": r.outcome.oom_killed,
        "stdout": r.outcome.stdout,
        "stderr": r.outcome.stderr,
    })
}

/// Debugger/execute iterations after a failed run: at most the effective retry
/// budget, stopping at the first pass or (if enabled) the first byte-identical
/// repair. `preamble` is prepended to the first error report.
#[allow(clippy::too_many_arguments)]
fn debug_loop(
    session: &mut AgentSession<'_>,
    sandbox: &Sandbox,
    config: &RunConfig,
    workspace: &mut BTreeMap<RelPath, String>,
    artifact: CodeArtifact,
    tests: &TestSuite,
    initial: ExecutionRecord,
    preamble: Option<&str>,
    events: &dyn EventSink,
    step: usize,
) -> Result<DebugLoopOutcome, PipelineError> {
    let mut current = artifact;
    let mut last = initial;
    let mut attempts = Vec::new();
    let mut stagnated = false;
    let budget = config.effective_retries();
    let mut n = 0;
    while !last.passed && n < budget {
        let mut report = error_text(&last.outcome);
        if n == 0 {
            if let Some(p) = preamble {
                report = format!("{p}\n\n{report}");
            }
        }
        let repaired = session.debug(&current, &report)?;
        n += 1;
        if config.stagnation && repaired.content == current.content {
            stagnated = true;
            events.emit(
                EventKind::DebugAttempt,
                json!({"step": step, "attempt": n, "stagnated": true}),
            );
            attempts.push(DebugAttempt {
                attempt: n,
                artifact: repaired,
                execution: None,
                stagnated: true,
            });
            break;
        }
        events.emit(EventKind::DebugAttempt, json!({"step": step, "attempt": n, "stagnated": false}));
        workspace.insert(repaired.path.clone(), repaired.content.clone());
        let record = execute(sandbox, config, workspace, &repaired, tests)?;
        events.emit(EventKind::ExecutionResult, execution_payload(step, n, &record));
        attempts.push(DebugAttempt {
            attempt: n,
            artifact: repaired.clone(),
            execution: Some(record.clone()),
            stagnated: false,
        });
        current = repaired;
        last = record;
    }
    Ok(DebugLoopOutcome {
        artifact: current,
        last,
        attempts,
        stagnated,
    })
}

fn coder_entry(record: &CoderRecord) -> String {
    let a = &record.artifact;
    let mut s = format!("[coder] {}:\n{}", a.path, a.content);
    if let Some(e) = &record.apply_error {
        s.push_str(&format!("\n(diff not applied: {e})"));
    }
    s
}

fn tester_entry(record: &TesterRecord) -> String {
    let o = &record.attempts.iter().rev().find_map(|a| a.execution.as_ref()).unwrap_or(&record.initial).outcome;
    format!(
        "[tester] execution {} for {} (exit {}{}, {} debug attempts)\nstdout:\n{}\nstderr:\n{}",
        if record.passed { "passed" } else { "failed" },
        record.tests.path,
        o.exit_status,
        if o.timed_out { ", timed out" } else { "" },
        record.attempts.len(),
        o.stdout,
        o.stderr,
    )
}

fn critic_entry(v: &Verdict) -> String {
    let value = if v.is_pass() { "PASS" } else { "FAIL" };
    format!("[critic] {value}: {}", v.rationale)
}

/// Unified diffs of changed files, sorted by path.
pub fn workspace_patch(original: &BTreeMap<RelPath, String>, current: &BTreeMap<RelPath, String>) -> String {
    let mut out = String::new();
    for (path, content) in current {
        let before = original.get(path).map(String::as_str).unwrap_or("");
        if before != content {
            out.push_str(&make_diff(path.as_str(), before, content).to_string());
        }
    }
    out
}

struct Draft {
    plan: Option<Plan>,
    memory_hits: Vec<HitRef>,
    repo_hits: Vec<HitRef>,
    steps: Vec<StepLog>,
    final_artifact: Option<CodeArtifact>,
    final_critique: Option<Verdict>,
    verdict: Option<Verdict>,
    memory_episode: Option<String>,
    workspace: BTreeMap<RelPath, String>,
}

/// Runs the full pipeline for one task. Never panics on agent, sandbox or
/// retrieval failures: they become a FAIL result carrying a typed cause.
pub fn run_pipeline(task: &Task, config: &RunConfig, deps: &PipelineDeps<'_>) -> RunResult {
    let started = Instant::now();
    let events = deps.events;
    events.emit(
        EventKind::RunStarted,
        json!({"task_id": task.id, "description": task.description, "config": config.label()}),
    );
    let original: BTreeMap<RelPath, String> =
        task.context_files.iter().map(|f| (f.path.clone(), f.content.clone())).collect();
    let mut draft = Draft {
        plan: None,
        memory_hits: Vec::new(),
        repo_hits: Vec::new(),
        steps: Vec::new(),
        final_artifact: None,
        final_critique: None,
        verdict: None,
        memory_episode: None,
        workspace: original.clone(),
    };
    let mut session = AgentSession::new(deps.backend, config.params, config.budget)
        .with_token_observer(move |role, text| events.emit(EventKind::Token, json!({"agent": role, "text": text})));

    let outcome = run_steps(task, config, deps, &mut session, &mut draft);
    let failure = outcome.err().map(PipelineError::into_failure);
    if let Some(f) = &failure {
        events.emit(EventKind::Error, json!({"kind": f.kind, "message": f.message}));
    }
    let verdict = match (&failure, draft.verdict.take()) {
        (None, Some(v)) => v,
        (Some(f), _) => Verdict::fail(f.message.clone()),
        (None, None) => Verdict::fail("no verdict"),
    };
    let transcripts = session.into_transcripts();
    let usage: TokenUsage = transcripts.iter().map(|t| t.usage).sum();
    let cost = account_cost(&transcripts, &config.pricing).unwrap_or(CostReport {
        input_tokens: usage.input_tokens,
        output_tokens: usage.output_tokens,
        cost_usd: 0.0,
    });
    let patch = Some(workspace_patch(&original, &draft.workspace)).filter(|p| !p.is_empty());
    let sandbox_executions = draft
        .steps
        .iter()
        .filter_map(|s| s.tester.as_ref())
        .map(|t| t.executions() as u32)
        .sum();
    let result = RunResult {
        schema_version: SCHEMA_VERSION,
        task_id: task.id.clone(),
        final_artifact: draft.final_artifact,
        patch,
        plan: draft.plan,
        memory_hits: draft.memory_hits,
        repo_hits: draft.repo_hits,
        steps: draft.steps,
        final_critique: draft.final_critique,
        failure,
        memory_episode: draft.memory_episode,
        sandbox_executions,
        transcripts,
        usage,
        cost,
        wall_time_ms: started.elapsed().as_millis() as u64,
        verdict,
    };
    events.emit(
        EventKind::RunCompleted,
        json!({
            "verdict": result.verdict,
            "failure": result.failure,
            "debug_attempts": result.debug_attempts(),
            "usage": result.usage,
            "cost_usd": result.cost.cost_usd,
        }),
    );
    result
}

fn run_steps(
    task: &Task,
    config: &RunConfig,
    deps: &PipelineDeps<'_>,
    session: &mut AgentSession<'_>,
    draft: &mut Draft,
) -> Result<(), PipelineError> {
    config.validate()?;
    let events = deps.events;

    let (memory_hits, repo_hits) = if config.retrieval_k == 0 {
        (Vec::new(), Vec::new())
    } else {
        let m = match deps.memory {
            Some(m) if !m.is_empty() => m.query(&task.description, config.retrieval_k)?,
            _ => Vec::new(),
        };
        let r = match deps.repo {
            Some(r) if !r.is_empty() => r.query(&task.description, config.retrieval_k)?,
            _ => Vec::new(),
        };
        (m, r)
    };
    draft.memory_hits = memory_hits.iter().map(HitRef::from).collect();
    draft.repo_hits = repo_hits.iter().map(HitRef::from).collect();

    let planned = if config.enabled(AgentRole::Planner) {
        events.emit(EventKind::StepStarted, json!({"index": null, "agent": "planner", "phase": "plan"}));
        session.plan(task, &memory_hits, &repo_hits)?
    } else {
        fallback_plan()
    };
    let plan = apply_ablation(config, &planned)?;
    draft.plan = Some(plan.clone());

    let mut current: Option<CodeArtifact> = None;
    let mut pending_apply_error: Option<String> = None;
    let mut results: Vec<String> = Vec::new();
    let mut last_pass: Option<bool> = None;

    for (index, step) in plan.steps.iter().enumerate() {
        events.emit(
            EventKind::StepStarted,
            json!({"index": index, "agent": step.agent, "description": step.description, "file": step.target_file}),
        );
        let mut log = StepLog {
            index,
            step: step.clone(),
            coder: None,
            tester: None,
            verdict: None,
            note: None,
        };
        match step.agent {
            AgentRole::Coder => {
                let path = step
                    .target_file
                    .clone()
                    .unwrap_or_else(|| RelPath::new(DEFAULT_NEW_FILE).expect("constant path is valid"));
                let pre_edit = draft.workspace.get(&path).cloned();
                let out = session.generate_code(task, step, pre_edit.as_deref(), &results)?;
                draft.workspace.insert(out.artifact.path.clone(), out.artifact.content.clone());
                let record = CoderRecord {
                    artifact: out.artifact.clone(),
                    apply_error: out.apply_error.clone(),
                };
                results.push(coder_entry(&record));
                pending_apply_error = out.apply_error;
                current = Some(out.artifact);
                log.coder = Some(record);
            }
            AgentRole::Tester => {
                let Some(code) = current.clone() else {
                    log.note = Some("no code to test yet; step skipped".into());
                    draft.steps.push(log);
                    continue;
                };
                let tests = session.generate_tests(&code, step)?;
                let mut initial = execute(deps.sandbox, config, &draft.workspace, &code, &tests)?;
                if pending_apply_error.is_some() {
                    // The coder's change never landed, so the step has not succeeded.
                    initial.passed = false;
                }
                events.emit(EventKind::ExecutionResult, execution_payload(index, 0, &initial));
                let looped = debug_loop(
                    session,
                    deps.sandbox,
                    config,
                    &mut draft.workspace,
                    code,
                    &tests,
                    initial.clone(),
                    pending_apply_error.take().as_deref(),
                    events,
                    index,
                )?;
                let record = TesterRecord {
                    tests,
                    initial,
                    passed: looped.last.passed,
                    attempts: looped.attempts,
                    stagnated: looped.stagnated,
                };
                results.push(tester_entry(&record));
                last_pass = Some(record.passed);
                current = Some(looped.artifact);
                log.tester = Some(record);
            }
            AgentRole::Critic => {
                let v = session.critique(task, &results)?;
                events.emit(EventKind::Verdict, json!({"final": false, "step": index, "verdict": v}));
                results.push(critic_entry(&v));
                log.verdict = Some(v);
            }
            AgentRole::Debugger => {
                log::warn!("plan step {index} assigns the debugger; debugger steps are no-ops");
                log.note = Some("debugger steps outside the repair loop are no-ops".into());
            }
            AgentRole::Planner => unreachable!("plans never contain planner steps"),
        }
        draft.steps.push(log);
    }
    draft.final_artifact = current.clone();

    let verdict = if config.enabled(AgentRole::Critic) {
        events.emit(EventKind::StepStarted, json!({"index": null, "agent": "critic", "phase": "final"}));
        let v = session.critique(task, &results)?;
        draft.final_critique = Some(v.clone());
        v
    } else {
        match last_pass {
            Some(true) => Verdict::pass("critic disabled; last execution passed"),
            Some(false) => Verdict::fail("critic disabled; last execution failed"),
            None => Verdict::fail("critic disabled and nothing was executed"),
        }
    };
    let verdict = match (&current, verdict.is_pass()) {
        (None, true) => Verdict::fail("no code was produced"),
        _ => verdict,
    };
    events.emit(EventKind::Verdict, json!({"final": true, "verdict": verdict}));
    if verdict.is_pass() {
        if let (Some(memory), Some(code)) = (deps.memory, &current) {
            draft.memory_episode = Some(memory.store_episode(task, &code.content)?);
        }
    }
    draft.verdict = Some(verdict);
    Ok(())
}
