//! TOML settings shared by the CLI and the service.
//!
//! Every key is optional. Secrets never live here: remote backends read their
//! token from the environment variable named by `model.token_env`.
//!
//! ```toml
//! [run]
//! n_retry = 3
//! retrieval_k = 5
//! disabled_agents = []      # any of planner, coder, tester, debugger, critic
//! stagnation = true
//!
//! [model]
//! backend = "remote"        # or "scripted:<file or directory>"
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-4o"
//! token_env = "OPENAI_API_KEY"
//! temperature = 0.0
//! seed = 42
//! max_output_tokens = 2048
//! max_input_tokens = 8192
//! request_timeout_s = 120
//!
//! [sandbox]
//! executor = "auto"         # auto, container, subprocess
//! socket = "/var/run/docker.sock"
//! image = "python:3.10-slim"
//! pull = false
//! timeout_seconds = 30
//! memory_mb = 512
//! cpu_quota = 0.5
//! pid_cap = 64
//! pool_size = 4
//!
//! [retrieval]
//! memory_dir = ".groundloop/memory"
//! index_dir = ".groundloop/index"
//! search = "exact"          # or "hnsw"
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! max_active_runs = 4
//! subscriber_buffer = 1024
//!
//! [pricing]
//! input_per_million = 2.5
//! output_per_million = 10.0
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agents::{ModelBackend, ModelParams, RemoteBackend, ScriptedBackend};
use crate::orchestrator::{ConfigError, Pricing, RunConfig};
use crate::retrieval::{Embedder, EpisodicMemory, HashingEmbedder, HnswParams, SearchBackend};
use crate::sandbox::{ContainerExecutor, DockerClient, Executor, ResourceLimits, Sandbox, SubprocessExecutor};
use crate::types::AgentRole;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub run: RunSettings,
    pub model: ModelSettings,
    pub sandbox: SandboxSettings,
    pub retrieval: RetrievalSettings,
    pub service: ServiceSettings,
    pub pricing: Pricing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub n_retry: u32,
    pub retrieval_k: usize,
    pub disabled_agents: Vec<AgentRole>,
    pub stagnation: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        let d = RunConfig::default();
        RunSettings {
            n_retry: d.n_retry,
            retrieval_k: d.retrieval_k,
            disabled_agents: Vec::new(),
            stagnation: d.stagnation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub backend: String,
    pub base_url: String,
    pub model: String,
    pub token_env: String,
    pub temperature: f64,
    pub seed: u64,
    pub max_output_tokens: u64,
    pub max_input_tokens: u64,
    pub request_timeout_s: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let p = ModelParams::default();
        ModelSettings {
            backend: "remote".into(),
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            token_env: "OPENAI_API_KEY".into(),
            temperature: p.temperature,
            seed: p.seed,
            max_output_tokens: p.max_output_tokens,
            max_input_tokens: p.max_input_tokens,
            request_timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorKind {
    /// Container engine when its socket answers, otherwise the subprocess executor.
    #[default]
    Auto,
    Container,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSettings {
    pub executor: ExecutorKind,
    /// Defaults to `DOCKER_HOST` or the conventional socket path.
    pub socket: Option<PathBuf>,
    pub image: String,
    pub pull: bool,
    pub timeout_seconds: f64,
    pub memory_mb: u64,
    pub cpu_quota: f64,
    pub pid_cap: u32,
    pub pool_size: usize,
}

impl Default for SandboxSettings {
    fn default() -> Self {
        let l = ResourceLimits::default();
        SandboxSettings {
            executor: ExecutorKind::Auto,
            socket: None,
            image: crate::sandbox::DEFAULT_IMAGE.into(),
            pull: false,
            timeout_seconds: l.timeout_seconds,
            memory_mb: l.memory_bytes / (1024 * 1024),
            cpu_quota: l.cpu_quota,
            pid_cap: l.pid_cap,
            pool_size: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    #[default]
    Exact,
    Hnsw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub memory_dir: PathBuf,
    pub index_dir: PathBuf,
    pub search: SearchKind,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            memory_dir: ".groundloop/memory".into(),
            index_dir: ".groundloop/index".into(),
            search: SearchKind::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub bind: String,
    pub max_active_runs: usize,
    /// Events buffered per slow subscriber before it is disconnected.
    pub subscriber_buffer: usize,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: "127.0.0.1:8080".into(),
            max_active_runs: 4,
            subscriber_buffer: 1024,
        }
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Settings, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Settings, ConfigError> {
        let s: Settings = toml::from_str(text).map_err(|e| ConfigError(e.message().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run_config().validate()?;
        BackendSpec::parse(&self.model.backend)?;
        if self.sandbox.pool_size == 0 {
            return Err(ConfigError("sandbox.pool_size must be positive".into()));
        }
        if self.service.max_active_runs == 0 || self.service.subscriber_buffer == 0 {
            return Err(ConfigError("service.max_active_runs and service.subscriber_buffer must be positive".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            temperature: self.model.temperature,
            seed: self.model.seed,
            max_output_tokens: self.model.max_output_tokens,
            max_input_tokens: self.model.max_input_tokens,
        }
    }

    pub fn limits(&self) -> ResourceLimits {
        ResourceLimits {
            memory_bytes: self.sandbox.memory_mb * 1024 * 1024,
            cpu_quota: self.sandbox.cpu_quota,
            pid_cap: self.sandbox.pid_cap,
            timeout_seconds: self.sandbox.timeout_seconds,
            ..ResourceLimits::default()
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            n_retry: self.run.n_retry,
            retrieval_k: self.run.retrieval_k,
            disabled_agents: self.run.disabled_agents.iter().copied().collect(),
            stagnation: self.run.stagnation,
            params: self.params(),
            limits: self.limits(),
            pricing: self.pricing,
            ..RunConfig::default()
        }
    }

    pub fn search_backend(&self) -> SearchBackend {
        match self.retrieval.search {
            SearchKind::Exact => SearchBackend::Exact,
            SearchKind::Hnsw => SearchBackend::Hnsw(HnswParams::default()),
        }
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        Arc::new(HashingEmbedder::default())
    }

    pub fn open_memory(&self) -> Result<EpisodicMemory, ConfigError> {
        EpisodicMemory::open(&self.retrieval.memory_dir, self.embedder(), self.search_backend())
            .map_err(|e| ConfigError(e.to_string()))
    }

    /// Chooses and probes the executor.
    pub fn sandbox(&self) -> Result<Sandbox, ConfigError> {
        let client = || -> Result<DockerClient, ConfigError> {
            match &self.sandbox.socket {
                Some(p) => Ok(DockerClient::new(p)),
                None => DockerClient::from_env().map_err(|e| ConfigError(e.to_string())),
            }
        };
        let executor: Arc<dyn Executor> = match self.sandbox.executor {
            ExecutorKind::Subprocess => Arc::new(SubprocessExecutor::isolated()),
            ExecutorKind::Container => Arc::new(ContainerExecutor::new(client()?, self.sandbox.pull)),
            ExecutorKind::Auto => match client() {
                Ok(c) if c.ping().is_ok() => Arc::new(ContainerExecutor::new(c, self.sandbox.pull)),
                _ => {
                    log::info!("no container engine reachable; using the subprocess executor");
                    Arc::new(SubprocessExecutor::isolated())
                }
            },
        };
        Ok(Sandbox::new(executor, self.limits(), self.sandbox.image.clone(), self.sandbox.pool_size))
    }

    pub fn backends(&self) -> Result<BackendSource, ConfigError> {
        BackendSource::new(BackendSpec::parse(&self.model.backend)?, &self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Remote,
    /// A script file, or a directory of `<task id>.json` scripts.
    Scripted(PathBuf),
}

impl BackendSpec {
    pub fn parse(text: &str) -> Result<BackendSpec, ConfigError> {
        match text.split_once(':') {
            _ if text == "remote" => Ok(BackendSpec::Remote),
            Some(("scripted", path)) if !path.is_empty() => Ok(BackendSpec::Scripted(path.into())),
            _ => Err(ConfigError(format!(
                "backend {text:?} must be \"remote\" or \"scripted:<path>\""
            ))),
        }
    }
}

/// Produces one backend per run, so scripted backends start from a fresh script.
#[derive(Debug, Clone)]
pub struct BackendSource {
    spec: BackendSpec,
    model: ModelSettings,
}

impl BackendSource {
    pub fn new(spec: BackendSpec, model: &ModelSettings) -> Result<Self, ConfigError> {
        if let BackendSpec::Scripted(p) = &spec {
            if !p.exists() {
                return Err(ConfigError(format!("script {} does not exist", p.display())));
            }
        }
        Ok(BackendSource {
            spec,
            model: model.clone(),
        })
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    /// `key` selects the script inside a script directory (a task or instance id).
    pub fn backend(&self, key: &str) -> Result<Arc<dyn ModelBackend>, ConfigError> {
        match &self.spec {
            BackendSpec::Remote => {
                let m = &self.model;
                let b = RemoteBackend::new(&m.base_url, &m.model, &m.token_env, Duration::from_secs(m.request_timeout_s))
                    .map_err(|e| ConfigError(e.to_string()))?;
                Ok(Arc::new(b))
            }
            BackendSpec::Scripted(path) => {
                let file = if path.is_dir() {
                    path.join(format!("{key}.json"))
                } else {
                    path.clone()
                };
                let b = ScriptedBackend::load(&file).map_err(|e| ConfigError(e.to_string()))?;
                Ok(Arc::new(b))
            }
        }
    }
}
