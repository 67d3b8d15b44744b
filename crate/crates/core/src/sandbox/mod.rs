//! Verified execution of (code, tests) under resource limits.
//!
//! Two executors share one contract: [`ContainerExecutor`] drives a container
//! runtime over its local API socket, [`SubprocessExecutor`] runs the payload
//! as a host process (optionally inside a network namespace and cgroups) for
//! environments without a container runtime.

mod archive;
mod container;
mod predicate;
mod subprocess;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::types::{CodeArtifact, RelPath, TestSuite, TypeError};

pub use archive::{build_archive, build_archive_with_prefix};
pub use container::{ContainerExecutor, DockerClient, SANDBOX_LABEL};
pub use predicate::{contains_token, pass_predicate, stream_predicate, PredicateConfig, TokenMatch};
pub use subprocess::SubprocessExecutor;

/// Cap on captured bytes per stream.
pub const STREAM_CAP: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SandboxError {
    #[error("PathError: {0}")]
    Path(#[from] TypeError),
    #[error("duplicate archive entry {0}")]
    DuplicatePath(String),
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("runtime protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("invalid limits: {0}")]
    Limits(String),
}

impl From<std::io::Error> for SandboxError {
    fn from(e: std::io::Error) -> Self {
        SandboxError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkMode {
    #[default]
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub memory_bytes: u64,
    pub cpu_quota: f64,
    pub pid_cap: u32,
    #[serde(default)]
    pub network: NetworkMode,
    pub timeout_seconds: f64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits {
            memory_bytes: 512 * 1024 * 1024,
            cpu_quota: 0.5,
            pid_cap: 64,
            network: NetworkMode::Disabled,
            timeout_seconds: 30.0,
        }
    }
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.memory_bytes == 0 || self.pid_cap == 0 {
            return Err(SandboxError::Limits("memory and pid cap must be positive".into()));
        }
        if !(self.cpu_quota > 0.0) || !(self.timeout_seconds > 0.0) {
            return Err(SandboxError::Limits("cpu quota and timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Isolation {
    Container,
    Namespace,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enforcement {
    Runtime,
    Cgroup,
    Rlimit,
    #[default]
    Unenforced,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionMetadata {
    pub executor: String,
    pub isolation: Isolation,
    pub memory: Enforcement,
    pub cpu: Enforcement,
    pub pids: Enforcement,
    #[serde(default)]
    pub stdout_truncated: bool,
    #[serde(default)]
    pub stderr_truncated: bool,
    /// No process ran; the outcome stands in for a failure upstream of execution.
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub stdout: String,
    pub stderr: String,
    pub exit_status: i32,
    pub timed_out: bool,
    pub oom_killed: bool,
    pub wall_time_ms: u64,
    #[serde(default)]
    pub metadata: ExecutionMetadata,
}

impl ExecutionOutcome {
    /// An outcome for a failure that happened before anything could run.
    pub fn synthetic_failure(message: impl Into<String>) -> Self {
        ExecutionOutcome {
            stderr: message.into(),
            exit_status: 1,
            metadata: ExecutionMetadata {
                executor: "none".into(),
                synthetic: true,
                ..ExecutionMetadata::default()
            },
            ..ExecutionOutcome::default()
        }
    }

    /// Combined stdout/stderr, as handed to the Debugger.
    pub fn combined_output(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => format!("{}\n{}", self.stdout, self.stderr),
        }
    }
}

/// Everything one execution needs: the files to inject and the command to run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionJob {
    pub files: Vec<(RelPath, String)>,
    pub command: Vec<String>,
    pub image: String,
}

pub trait Executor: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, job: &ExecutionJob, limits: &ResourceLimits) -> Result<ExecutionOutcome, SandboxError>;
}

/// Command used to run a generated test file; `{test}` is replaced by its path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRunner {
    pub command: Vec<String>,
}

impl Default for TestRunner {
    fn default() -> Self {
        TestRunner {
            command: ["python3", "-m", "pytest", "-qq", "-rA", "-p", "no:cacheprovider", "{test}"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl TestRunner {
    pub fn command_for(&self, test_path: &RelPath) -> Vec<String> {
        self.command
            .iter()
            .map(|a| a.replace("{test}", test_path.as_str()))
            .collect()
    }
}

/// Counting semaphore bounding concurrent executions.
#[derive(Debug)]
struct Pool {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PoolPermit<'a>(&'a Pool);

impl Pool {
    fn new(size: usize) -> Self {
        Pool {
            free: Mutex::new(size.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PoolPermit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PoolPermit(self)
    }
}

impl Drop for PoolPermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// An executor bound to an image, limits, and a test runner, with a bounded pool.
#[derive(Clone)]
pub struct Sandbox {
    executor: Arc<dyn Executor>,
    pub limits: ResourceLimits,
    pub image: String,
    pub runner: TestRunner,
    pool: Arc<Pool>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("executor", &self.executor.name())
            .field("limits", &self.limits)
            .field("image", &self.image)
            .finish()
    }
}

pub const DEFAULT_IMAGE: &str = "python:3.10-slim";

impl Sandbox {
    pub fn new(executor: Arc<dyn Executor>, limits: ResourceLimits, image: impl Into<String>, pool_size: usize) -> Self {
        Sandbox {
            executor,
            limits,
            image: image.into(),
            runner: TestRunner::default(),
            pool: Arc::new(Pool::new(pool_size)),
        }
    }

    pub fn with_runner(mut self, runner: TestRunner) -> Self {
        self.runner = runner;
        self
    }

    pub fn executor_name(&self) -> &'static str {
        self.executor.name()
    }

    /// Runs the test suite against `code`, on top of a workspace snapshot.
    pub fn execute(
        &self,
        code: &CodeArtifact,
        tests: &TestSuite,
        workspace: &[(RelPath, String)],
    ) -> Result<ExecutionOutcome, SandboxError> {
        self.execute_with_limits(code, tests, workspace, &self.limits)
    }

    pub fn execute_with_limits(
        &self,
        code: &CodeArtifact,
        tests: &TestSuite,
        workspace: &[(RelPath, String)],
        limits: &ResourceLimits,
    ) -> Result<ExecutionOutcome, SandboxError> {
        let mut files: BTreeMap<RelPath, String> = workspace.iter().cloned().collect();
        files.insert(code.path.clone(), code.content.clone());
        files.insert(tests.path.clone(), tests.content.clone());
        let job = ExecutionJob {
            files: files.into_iter().collect(),
            command: self.runner.command_for(&tests.path),
            image: self.image.clone(),
        };
        self.run_job(&job, limits)
    }

    /// Runs a shell script over the given files.
    pub fn run_script(
        &self,
        files: Vec<(RelPath, String)>,
        script: &str,
        image: &str,
        limits: &ResourceLimits,
    ) -> Result<ExecutionOutcome, SandboxError> {
        let job = ExecutionJob {
            files,
            command: vec!["sh".into(), "-c".into(), script.into()],
            image: image.to_string(),
        };
        self.run_job(&job, limits)
    }

    pub fn run_job(&self, job: &ExecutionJob, limits: &ResourceLimits) -> Result<ExecutionOutcome, SandboxError> {
        limits.validate()?;
        let _permit = self.pool.acquire();
        self.executor.run(job, limits)
    }
}

/// Appends bytes up to the cap; reports whether anything was dropped.
pub(crate) fn capture_capped(buf: &mut Vec<u8>, chunk: &[u8], cap: usize) -> bool {
    let room = cap.saturating_sub(buf.len());
    buf.extend_from_slice(&chunk[..chunk.len().min(room)]);
    chunk.len() > room
}

pub(crate) fn finish_stream(buf: Vec<u8>, truncated: bool) -> String {
    let mut s = String::from_utf8_lossy(&buf).into_owned();
    if truncated {
        s.push_str(&format!("\n[output truncated at {STREAM_CAP} bytes]\n"));
    }
    s
}
