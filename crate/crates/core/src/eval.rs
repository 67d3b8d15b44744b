//! Benchmark evaluation: check out an instance, apply a candidate patch, run its
//! FAIL_TO_PASS and PASS_TO_PASS tests in the sandbox, and score resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::ModelBackend;
use crate::diff::{apply_diff, parse_patch_set, DiffError};
use crate::mdp::reward;
use crate::orchestrator::{run_pipeline, ConfigError, NullSink, PipelineDeps, RunConfig, RunResult};
use crate::retrieval::{Collection, Embedder, EpisodicMemory, HashingEmbedder, RepoIndex, SearchBackend, SourceFilter};
use crate::sandbox::{ExecutionJob, ResourceLimits, Sandbox};
use crate::types::{AgentRole, ContextFile, RelPath, Task, TestOutcomes, TestResult};

pub const DEFAULT_INSTALL: &str = "pip install -e .";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("cannot read suite {path}: {message}")]
    Io { path: String, message: String },
    #[error("suite line {line}: instance {instance:?}: field {field}: {message}")]
    Schema {
        line: usize,
        instance: String,
        field: String,
        message: String,
    },
    #[error("DuplicateError: instance id {0:?} appears more than once")]
    Duplicate(String),
    #[error("EmptyReportError: no records to report")]
    EmptyReport,
    #[error("inconsistent records: {0}")]
    Inconsistent(String),
}

fn string_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    // Accepts a JSON list or a string holding one, as some published suites do.
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        List(Vec<String>),
        Encoded(String),
    }
    match Either::deserialize(d)? {
        Either::List(v) => Ok(v),
        Either::Encoded(s) => serde_json::from_str(&s).map_err(serde::de::Error::custom),
    }
}

fn default_image() -> String {
    crate::sandbox::DEFAULT_IMAGE.to_string()
}

fn default_install() -> Option<String> {
    Some(DEFAULT_INSTALL.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub instance_id: String,
    /// Local directory (relative to the suite file), git URL, or `owner/name`.
    #[serde(alias = "repo")]
    pub repo_source: String,
    /// A git revision, or `sha256:<tree digest>` for plain directories.
    pub base_commit: String,
    pub problem_statement: String,
    #[serde(default, alias = "patch")]
    pub gold_patch: Option<String>,
    /// Test files added on top of the candidate patch before running tests.
    #[serde(default)]
    pub test_patch: Option<String>,
    #[serde(alias = "FAIL_TO_PASS", deserialize_with = "string_list")]
    pub fail_to_pass: Vec<String>,
    #[serde(default, alias = "PASS_TO_PASS", deserialize_with = "string_list")]
    pub pass_to_pass: Vec<String>,
    #[serde(default = "default_image")]
    pub image: String,
    /// Empty or null skips installation.
    #[serde(default = "default_install")]
    pub install_command: Option<String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl BenchmarkInstance {
    fn install(&self) -> Option<&str> {
        self.install_command.as_deref().map(str::trim).filter(|c| !c.is_empty())
    }
}

/// Reads a JSON-lines suite. Blank lines are ignored.
pub fn load_suite(path: &Path) -> Result<Vec<BenchmarkInstance>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = BTreeSet::new();
    let mut suite = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| EvalError::Schema {
            line: i + 1,
            instance: String::new(),
            field: "$".into(),
            message: e.to_string(),
        })?;
        let id = raw.get("instance_id").and_then(|v| v.as_str()).unwrap_or("").to_string();
        let schema = |field: &str, message: String| EvalError::Schema {
            line: i + 1,
            instance: id.clone(),
            field: field.into(),
            message,
        };
        let mut inst: BenchmarkInstance = serde_json::from_value(raw.clone()).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(String::from)
                .unwrap_or_else(|| "$".into());
            schema(&field, msg)
        })?;
        if inst.instance_id.trim().is_empty() {
            return Err(schema("instance_id", "must not be empty".into()));
        }
        if inst.problem_statement.trim().is_empty() {
            return Err(schema("problem_statement", "must not be empty".into()));
        }
        if inst.fail_to_pass.is_empty() {
            return Err(schema("fail_to_pass", "must not be empty".into()));
        }
        if !seen.insert(inst.instance_id.clone()) {
            return Err(EvalError::Duplicate(inst.instance_id));
        }
        inst.base_dir = base_dir.clone();
        suite.push(inst);
    }
    Ok(suite)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    ApplyFail,
    F2pFail,
    P2pRegress,
    Timeout,
    Infra,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub instance_id: String,
    pub patch_applied: bool,
    pub outcomes: TestOutcomes,
    pub resolved: bool,
    pub failure_class: Option<FailureClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ResolutionRecord {
    fn unresolved(instance: &BenchmarkInstance, applied: bool, class: Option<FailureClass>, detail: String) -> Self {
        ResolutionRecord {
            instance_id: instance.instance_id.clone(),
            patch_applied: applied,
            outcomes: TestOutcomes {
                fail_to_pass: instance.fail_to_pass.iter().map(|t| TestResult::new(t, false)).collect(),
                pass_to_pass: instance.pass_to_pass.iter().map(|t| TestResult::new(t, false)).collect(),
            },
            resolved: false,
            failure_class: class,
            detail: Some(detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Limits for each test-suite run; the timeout applies per run.
    pub limits: ResourceLimits,
    /// Wall-clock budget for one instance; exceeding it is an infra failure.
    pub instance_timeout_s: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            limits: ResourceLimits {
                timeout_seconds: 120.0,
                ..ResourceLimits::default()
            },
            instance_timeout_s: 300.0,
        }
    }
}

/// SHA-256 over sorted `(path, content)` pairs of a directory, excluding `.git`
/// and `__pycache__`.
pub fn tree_digest(root: &Path) -> Result<String, String> {
    let files = read_tree(root)?;
    let mut h = Sha256::new();
    for (path, content) in &files {
        h.update(path.as_str().as_bytes());
        h.update([0]);
        h.update(content.as_bytes());
        h.update([0]);
    }
    Ok(format!("sha256:{}", hex::encode(h.finalize())))
}

fn read_tree(root: &Path) -> Result<BTreeMap<RelPath, String>, String> {
    let mut files = BTreeMap::new();
    let walker = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || (e.file_name() != ".git" && e.file_name() != "__pycache__"));
    for entry in walker {
        let entry = entry.map_err(|e| e.to_string())?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).map_err(|e| e.to_string())?;
        let rel = RelPath::new(rel.to_string_lossy()).map_err(|e| e.to_string())?;
        match std::fs::read(entry.path()) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) => {
                    files.insert(rel, text);
                }
                Err(_) => log::warn!("skipping non-UTF-8 file {rel}"),
            },
            Err(e) => return Err(format!("{rel}: {e}")),
        }
    }
    Ok(files)
}

fn git(args: &[&str], cwd: Option<&Path>) -> Result<(), String> {
    let mut cmd = Command::new("git");
    cmd.args(args);
    if let Some(c) = cwd {
        cmd.current_dir(c);
    }
    let out = cmd.output().map_err(|e| format!("git: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("git {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Materializes the instance's repository at its base revision in a fresh
/// scratch directory; the source is never modified.
pub fn checkout(instance: &BenchmarkInstance) -> Result<(tempfile::TempDir, BTreeMap<RelPath, String>), String> {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dest = scratch.path().join("repo");
    let src = &instance.repo_source;
    let local = if Path::new(src).is_absolute() {
        PathBuf::from(src)
    } else {
        instance.base_dir.join(src)
    };
    let remote = if src.contains("://") || src.starts_with("git@") {
        Some(src.clone())
    } else if !local.exists() && src.split('/').count() == 2 {
        Some(format!("https://github.com/{src}.git"))
    } else {
        None
    };
    let dest_str = dest.to_string_lossy().to_string();
    if let Some(url) = remote {
        git(&["clone", "--quiet", "--no-checkout", &url, &dest_str], None)?;
        git(&["checkout", "--quiet", &instance.base_commit], Some(&dest))?;
    } else if local.join(".git").exists() {
        git(&["clone", "--quiet", "--no-checkout", &local.to_string_lossy(), &dest_str], None)?;
        git(&["checkout", "--quiet", &instance.base_commit], Some(&dest))?;
    } else if local.is_dir() {
        let digest = tree_digest(&local)?;
        if digest != instance.base_commit {
            return Err(format!(
                "{} is at {digest}, expected {}",
                local.display(),
                instance.base_commit
            ));
        }
        let files = read_tree(&local)?;
        return Ok((scratch, files));
    } else {
        return Err(format!("repository source {} not found", local.display()));
    }
    let files = read_tree(&dest)?;
    Ok((scratch, files))
}

/// Applies every file diff in `patch` to `files`.
pub fn apply_patch_set(files: &mut BTreeMap<RelPath, String>, patch: &str) -> Result<usize, String> {
    let diffs = parse_patch_set(patch).map_err(|e| e.to_string())?;
    if diffs.is_empty() {
        return Err("patch contains no file diffs".into());
    }
    for d in &diffs {
        let source = d.source_path.as_ref();
        let original = match source {
            Some(p) => files
                .get(p)
                .cloned()
                .ok_or_else(|| format!("ApplyError: {p} does not exist"))?,
            None => String::new(),
        };
        let updated = apply_diff(d, &original).map_err(|e: DiffError| format!("{}: {e}", d.path().map(|p| p.as_str()).unwrap_or("?")))?;
        if let Some(p) = source {
            if d.target_path.as_ref() != Some(p) {
                files.remove(p);
            }
        }
        if let Some(t) = &d.target_path {
            files.insert(t.clone(), updated);
        }
    }
    Ok(diffs.len())
}

/// Per-test pass/fail from pytest `-rA` summary lines. Tests with no line failed.
pub fn parse_test_report(stdout: &str, ids: &[String]) -> Vec<TestResult> {
    let mut passed = BTreeSet::new();
    for line in stdout.lines() {
        if let Some(rest) = line.strip_prefix("PASSED ").or_else(|| line.strip_prefix("XPASS ")) {
            passed.insert(rest.split(" - ").next().unwrap_or(rest).trim().to_string());
        }
    }
    ids.iter().map(|id| TestResult::new(id, passed.contains(id))).collect()
}

struct SuiteRun {
    results: Vec<TestResult>,
    timed_out: bool,
    stdout: String,
    stderr: String,
}

fn run_tests(
    sandbox: &Sandbox,
    instance: &BenchmarkInstance,
    files: &BTreeMap<RelPath, String>,
    ids: &[String],
    limits: &ResourceLimits,
) -> Result<SuiteRun, String> {
    let mut command: Vec<String> = vec!["sh".into(), "-c".into()];
    let install = instance.install();
    command.push(match install {
        Some(i) => format!("{i} >/dev/null 2>&1 || {{ echo 'install failed' >&2; exit 97; }}; exec \"$@\""),
        None => "exec \"$@\"".into(),
    });
    command.push("sh".into());
    command.extend(["python3", "-m", "pytest", "-q", "-rA", "-p", "no:cacheprovider"].map(String::from));
    command.extend(ids.iter().cloned());
    let job = ExecutionJob {
        files: files.iter().map(|(p, c)| (p.clone(), c.clone())).collect(),
        command,
        image: instance.image.clone(),
    };
    let outcome = sandbox.run_job(&job, limits).map_err(|e| e.to_string())?;
    if outcome.exit_status == 97 && outcome.stderr.contains("install failed") {
        return Err("install command failed".into());
    }
    Ok(SuiteRun {
        results: parse_test_report(&outcome.stdout, ids),
        timed_out: outcome.timed_out,
        stdout: outcome.stdout,
        stderr: outcome.stderr,
    })
}

/// The five evaluation steps: checkout, apply, install, FAIL_TO_PASS, PASS_TO_PASS.
pub fn evaluate_patch(
    instance: &BenchmarkInstance,
    patch: &str,
    sandbox: &Sandbox,
    options: &EvalOptions,
) -> ResolutionRecord {
    let started = Instant::now();
    let budget = Duration::from_secs_f64(options.instance_timeout_s.max(0.001));
    let (_scratch, mut files) = match checkout(instance) {
        Ok(x) => x,
        Err(e) => return ResolutionRecord::unresolved(instance, false, Some(FailureClass::Infra), format!("checkout: {e}")),
    };
    if let Err(e) = apply_patch_set(&mut files, patch) {
        return ResolutionRecord::unresolved(instance, false, Some(FailureClass::ApplyFail), e);
    }
    if let Some(tp) = instance.test_patch.as_deref().filter(|t| !t.trim().is_empty()) {
        if let Err(e) = apply_patch_set(&mut files, tp) {
            return ResolutionRecord::unresolved(instance, true, Some(FailureClass::Infra), format!("test patch: {e}"));
        }
    }
    let mut outcomes = TestOutcomes::default();
    let mut timed_out = false;
    let mut details = Vec::new();
    for (ids, slot) in [
        (&instance.fail_to_pass, &mut outcomes.fail_to_pass),
        (&instance.pass_to_pass, &mut outcomes.pass_to_pass),
    ] {
        if ids.is_empty() {
            continue;
        }
        let remaining = budget.saturating_sub(started.elapsed());
        if remaining.is_zero() {
            return ResolutionRecord::unresolved(instance, true, Some(FailureClass::Infra), "instance timeout exceeded".into());
        }
        let limits = ResourceLimits {
            timeout_seconds: options.limits.timeout_seconds.min(remaining.as_secs_f64()),
            ..options.limits.clone()
        };
        let run = match run_tests(sandbox, instance, &files, ids, &limits) {
            Ok(r) => r,
            Err(e) => return ResolutionRecord::unresolved(instance, true, Some(FailureClass::Infra), e),
        };
        if run.timed_out {
            if started.elapsed() >= budget {
                return ResolutionRecord::unresolved(instance, true, Some(FailureClass::Infra), "instance timeout exceeded".into());
            }
            timed_out = true;
        }
        if run.results.iter().any(|r| !r.passed) {
            details.push(format!("{}{}", run.stdout, run.stderr));
        }
        *slot = run.results;
    }
    let (resolved, failure_class) = match judge(&outcomes, timed_out) {
        Ok(x) => x,
        Err(e) => return ResolutionRecord::unresolved(instance, true, Some(FailureClass::Infra), e.to_string()),
    };
    ResolutionRecord {
        instance_id: instance.instance_id.clone(),
        patch_applied: true,
        outcomes,
        resolved,
        failure_class,
        detail: (!details.is_empty()).then(|| crate::agents::clip(&details.join("\n"), 4000)),
    }
}

/// Resolution and failure class for the test outcomes of an applied patch.
pub fn judge(outcomes: &TestOutcomes, timed_out: bool) -> Result<(bool, Option<FailureClass>), crate::mdp::MdpError> {
    let resolved = reward(outcomes)? == 1;
    let class = if resolved {
        None
    } else if timed_out {
        Some(FailureClass::Timeout)
    } else if !outcomes.all_f2p_pass() {
        Some(FailureClass::F2pFail)
    } else {
        Some(FailureClass::P2pRegress)
    };
    Ok((resolved, class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub total: usize,
    pub resolved: usize,
    pub applied: usize,
    /// Percentages.
    pub resolve_rate: f64,
    pub patch_rate: f64,
}

pub fn resolve_rate(records: &[ResolutionRecord]) -> Result<RateReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    if let Some(r) = records.iter().find(|r| r.resolved && !r.patch_applied) {
        return Err(EvalError::Inconsistent(format!(
            "{} is resolved but its patch was not applied",
            r.instance_id
        )));
    }
    let total = records.len();
    let resolved = records.iter().filter(|r| r.resolved).count();
    let applied = records.iter().filter(|r| r.patch_applied).count();
    Ok(RateReport {
        total,
        resolved,
        applied,
        resolve_rate: 100.0 * resolved as f64 / total as f64,
        patch_rate: 100.0 * applied as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ResolutionRecord>,
    pub summary: RateReport,
}

impl EvalReport {
    pub fn new(records: Vec<ResolutionRecord>) -> Result<Self, EvalError> {
        let summary = resolve_rate(&records)?;
        Ok(EvalReport { records, summary })
    }

    pub fn has_infra_failures(&self) -> bool {
        self.records.iter().any(|r| r.failure_class == Some(FailureClass::Infra))
    }

    pub fn to_text(&self) -> String {
        let width = self.records.iter().map(|r| r.instance_id.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:<width$}  {:<8}  {:<8}  {}\n", "instance", "applied", "resolved", "class");
        for r in &self.records {
            let class = r
                .failure_class
                .map(|c| serde_json::to_value(c).unwrap().as_str().unwrap_or("").to_string())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<width$}  {:<8}  {:<8}  {}\n",
                r.instance_id,
                yes_no(r.patch_applied),
                yes_no(r.resolved),
                class
            ));
        }
        let s = &self.summary;
        out.push_str(&format!(
            "resolved {}/{} ({:.1}%), patches applied {}/{} ({:.1}%)\n",
            s.resolved, s.total, s.resolve_rate, s.applied, s.total, s.patch_rate
        ));
        out
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Supplies a fresh backend for each pipeline run on an instance.
pub type BackendFactory<'a> = dyn Fn(&BenchmarkInstance) -> Result<Arc<dyn ModelBackend>, String> + Sync + 'a;

/// Backends from a directory of per-instance scripts named `<instance_id>.json`.
pub fn script_dir_backends(dir: PathBuf) -> impl Fn(&BenchmarkInstance) -> Result<Arc<dyn ModelBackend>, String> + Sync {
    move |instance| {
        let path = dir.join(format!("{}.json", instance.instance_id));
        crate::agents::ScriptedBackend::load(&path)
            .map(|b| Arc::new(b) as Arc<dyn ModelBackend>)
            .map_err(|e| e.to_string())
    }
}

/// Outcome of running the pipeline on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRun {
    pub record: ResolutionRecord,
    pub run: Option<RunResult>,
}

/// Runs the pipeline on an instance and evaluates the patch it returns. A FAIL
/// verdict submits nothing and is unresolved.
pub fn solve_instance(
    instance: &BenchmarkInstance,
    config: &RunConfig,
    backend: &dyn ModelBackend,
    sandbox: &Sandbox,
    memory: Option<&EpisodicMemory>,
    options: &EvalOptions,
) -> InstanceRun {
    let (scratch, files) = match checkout(instance) {
        Ok(x) => x,
        Err(e) => {
            return InstanceRun {
                record: ResolutionRecord::unresolved(instance, false, Some(FailureClass::Infra), format!("checkout: {e}")),
                run: None,
            }
        }
    };
    let task = match Task::new(
        instance.instance_id.clone(),
        instance.problem_statement.clone(),
        files
            .iter()
            .map(|(path, content)| ContextFile {
                path: path.clone(),
                content: content.clone(),
            })
            .collect(),
    ) {
        Ok(t) => t,
        Err(e) => {
            return InstanceRun {
                record: ResolutionRecord::unresolved(instance, false, Some(FailureClass::Infra), e.to_string()),
                run: None,
            }
        }
    };
    let repo_dir = scratch.path().join("repo");
    let _ = std::fs::create_dir_all(&repo_dir);
    for (p, c) in &files {
        let dest = repo_dir.join(p.as_str());
        if let Some(parent) = dest.parent() {
            let _ = std::fs::create_dir_all(parent);
        }
        let _ = std::fs::write(dest, c);
    }
    let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
    let collection = Arc::new(Collection::in_memory(embedder.dimension(), embedder.id(), SearchBackend::Exact));
    let repo = RepoIndex::new(&repo_dir, collection, embedder, SourceFilter::default())
        .and_then(|r| r.index_repository().map(|_| r))
        .ok();
    let deps = PipelineDeps {
        backend,
        sandbox,
        memory,
        repo: repo.as_ref(),
        events: &NullSink,
    };
    let run = run_pipeline(&task, config, &deps);
    let record = match (&run.failure, run.passed(), &run.patch) {
        (Some(f), _, _) if f.is_infrastructure() => {
            ResolutionRecord::unresolved(instance, false, Some(FailureClass::Infra), f.message.clone())
        }
        (_, true, Some(patch)) => evaluate_patch(instance, patch, sandbox, options),
        _ => ResolutionRecord::unresolved(instance, false, None, format!("pipeline verdict FAIL: {}", run.verdict.rationale)),
    };
    InstanceRun { record, run: Some(run) }
}

/// Configurations of the standard ablation table, in row order.
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    let mut rows = vec![base.clone()];
    for role in [AgentRole::Critic, AgentRole::Debugger, AgentRole::Tester, AgentRole::Planner] {
        rows.push(base.clone().without(role));
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub disabled: Vec<AgentRole>,
    pub resolved: usize,
    pub total: usize,
    pub applied: usize,
    /// Set when the configuration itself was rejected; no runs happened.
    pub error: Option<String>,
    pub records: Vec<ResolutionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn resolved(&self, label: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.resolved)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>8}  {:>7}  {:>5}\n", "config", "resolved", "applied", "total");
        for r in &self.rows {
            match &r.error {
                Some(e) => out.push_str(&format!("{:<width$}  {e}\n", r.label)),
                None => out.push_str(&format!(
                    "{:<width$}  {:>8}  {:>7}  {:>5}\n",
                    r.label, r.resolved, r.applied, r.total
                )),
            }
        }
        out
    }
}

/// Runs every (instance, configuration) pair. Instances of one row run
/// concurrently, `parallelism` at a time; each row gets a fresh in-memory
/// episodic store.
pub fn run_ablation_suite(
    suite: &[BenchmarkInstance],
    configs: &[RunConfig],
    backends: &BackendFactory<'_>,
    sandbox: &Sandbox,
    options: &EvalOptions,
    parallelism: usize,
) -> Result<AblationReport, ConfigError> {
    let labels: BTreeSet<String> = configs.iter().map(RunConfig::label).collect();
    if labels.len() != configs.len() {
        return Err(ConfigError("ablation configurations must be distinct".into()));
    }
    let mut rows = Vec::new();
    for config in configs {
        let disabled: Vec<AgentRole> = config.disabled_agents.iter().copied().collect();
        if let Err(e) = config.validate() {
            rows.push(AblationRow {
                label: config.label(),
                disabled,
                resolved: 0,
                total: suite.len(),
                applied: 0,
                error: Some(e.to_string()),
                records: Vec::new(),
            });
            continue;
        }
        let memory = EpisodicMemory::in_memory(Arc::new(HashingEmbedder::default()), SearchBackend::Exact);
        let records = solve_all(suite, config, backends, sandbox, Some(&memory), options, parallelism)
            .into_iter()
            .map(|r| r.record)
            .collect::<Vec<_>>();
        rows.push(AblationRow {
            label: config.label(),
            disabled,
            resolved: records.iter().filter(|r| r.resolved).count(),
            total: records.len(),
            applied: records.iter().filter(|r| r.patch_applied).count(),
            error: None,
            records,
        });
    }
    Ok(AblationReport { rows })
}

/// Pipeline runs over a suite, results in suite order.
pub fn solve_all(
    suite: &[BenchmarkInstance],
    config: &RunConfig,
    backends: &BackendFactory<'_>,
    sandbox: &Sandbox,
    memory: Option<&EpisodicMemory>,
    options: &EvalOptions,
    parallelism: usize,
) -> Vec<InstanceRun> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<InstanceRun>>> = suite.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, suite.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(instance) = suite.get(i) else {
                    break;
                };
                let run = match backends(instance) {
                    Ok(backend) => solve_instance(instance, config, backend.as_ref(), sandbox, memory, options),
                    Err(e) => InstanceRun {
                        record: ResolutionRecord::unresolved(instance, false, Some(FailureClass::Infra), format!("backend: {e}")),
                        run: None,
                    },
                };
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(run);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every instance ran"))
        .collect()
}
