use std::io::{ErrorKind, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    build_archive_with_prefix, capture_capped, finish_stream, Enforcement, ExecutionJob,
    ExecutionMetadata, ExecutionOutcome, Executor, Isolation, ResourceLimits, SandboxError,
    STREAM_CAP,
};

/// Label attached to every container this crate creates; used for leak census.
pub const SANDBOX_LABEL: &str = "groundloop.sandbox";
const API_PREFIX: &str = "/v1.41";
const WORKDIR: &str = "/workspace";
const CONTROL_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug)]
struct Response {
    status: u16,
    body: Vec<u8>,
}

impl Response {
    fn json(&self) -> Result<Value, SandboxError> {
        serde_json::from_slice(&self.body)
            .map_err(|e| SandboxError::Protocol(format!("bad JSON from runtime: {e}")))
    }

    fn message(&self) -> String {
        self.json()
            .ok()
            .and_then(|v| v.get("message").and_then(Value::as_str).map(String::from))
            .unwrap_or_else(|| String::from_utf8_lossy(&self.body).into_owned())
    }
}

enum CallError {
    Timeout,
    Fatal(SandboxError),
}

impl From<SandboxError> for CallError {
    fn from(e: SandboxError) -> Self {
        CallError::Fatal(e)
    }
}

/// Minimal HTTP/1.1 client for the container engine API on a local Unix socket.
#[derive(Debug, Clone)]
pub struct DockerClient {
    socket: PathBuf,
}

fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

fn dechunk(mut body: &[u8]) -> Result<Vec<u8>, SandboxError> {
    let bad = || SandboxError::Protocol("malformed chunked body".into());
    let mut out = Vec::new();
    loop {
        let line_end = body.windows(2).position(|w| w == b"\r\n").ok_or_else(bad)?;
        let size_str = std::str::from_utf8(&body[..line_end]).map_err(|_| bad())?;
        let size = usize::from_str_radix(size_str.split(';').next().unwrap_or("").trim(), 16).map_err(|_| bad())?;
        body = &body[line_end + 2..];
        if size == 0 {
            return Ok(out);
        }
        if body.len() < size + 2 {
            return Err(bad());
        }
        out.extend_from_slice(&body[..size]);
        body = &body[size + 2..];
    }
}

impl DockerClient {
    pub fn new(socket: impl Into<PathBuf>) -> Self {
        DockerClient { socket: socket.into() }
    }

    /// `DOCKER_HOST=unix://...` or the conventional socket path.
    pub fn from_env() -> Result<Self, SandboxError> {
        match std::env::var("DOCKER_HOST") {
            Ok(host) if !host.is_empty() => match host.strip_prefix("unix://") {
                Some(path) => Ok(DockerClient::new(path)),
                None => Err(SandboxError::RuntimeUnavailable(format!(
                    "only unix:// runtime endpoints are supported, got {host}"
                ))),
            },
            _ => Ok(DockerClient::new("/var/run/docker.sock")),
        }
    }

    pub fn socket(&self) -> &Path {
        &self.socket
    }

    fn call(
        &self,
        method: &str,
        path: &str,
        body: Option<(&str, &[u8])>,
        timeout: Duration,
    ) -> Result<Response, CallError> {
        let mut stream = UnixStream::connect(&self.socket).map_err(|e| {
            SandboxError::RuntimeUnavailable(format!("{}: {e}", self.socket.display()))
        })?;
        stream.set_read_timeout(Some(timeout)).map_err(SandboxError::from)?;
        stream.set_write_timeout(Some(CONTROL_TIMEOUT)).map_err(SandboxError::from)?;
        let mut req = format!("{method} {API_PREFIX}{path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n");
        let payload = match body {
            Some((ctype, bytes)) => {
                req.push_str(&format!("Content-Type: {ctype}\r\nContent-Length: {}\r\n", bytes.len()));
                bytes
            }
            None => {
                req.push_str("Content-Length: 0\r\n");
                &[][..]
            }
        };
        req.push_str("\r\n");
        stream.write_all(req.as_bytes()).map_err(SandboxError::from)?;
        stream.write_all(payload).map_err(SandboxError::from)?;

        let mut raw = Vec::new();
        if let Err(e) = stream.read_to_end(&mut raw) {
            return match e.kind() {
                ErrorKind::WouldBlock | ErrorKind::TimedOut => Err(CallError::Timeout),
                _ => Err(SandboxError::from(e).into()),
            };
        }
        let split = raw
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .ok_or_else(|| SandboxError::Protocol("response without header terminator".into()))?;
        let head = String::from_utf8_lossy(&raw[..split]).into_owned();
        let mut lines = head.split("\r\n");
        let status = lines
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|s| s.parse::<u16>().ok())
            .ok_or_else(|| SandboxError::Protocol(format!("bad status line in {head:?}")))?;
        let chunked = lines.any(|l| {
            let l = l.to_ascii_lowercase();
            l.starts_with("transfer-encoding:") && l.contains("chunked")
        });
        let body = &raw[split + 4..];
        let body = if chunked { dechunk(body)? } else { body.to_vec() };
        Ok(Response { status, body })
    }

    fn control(&self, method: &str, path: &str, body: Option<(&str, &[u8])>) -> Result<Response, SandboxError> {
        match self.call(method, path, body, CONTROL_TIMEOUT) {
            Ok(r) => Ok(r),
            Err(CallError::Timeout) => Err(SandboxError::Protocol(format!("{method} {path} timed out"))),
            Err(CallError::Fatal(e)) => Err(e),
        }
    }

    fn expect(r: Response, ok: &[u16], what: &str) -> Result<Response, SandboxError> {
        if ok.contains(&r.status) {
            Ok(r)
        } else {
            Err(SandboxError::Protocol(format!("{what}: HTTP {} {}", r.status, r.message())))
        }
    }

    pub fn ping(&self) -> Result<(), SandboxError> {
        Self::expect(self.control("GET", "/_ping", None)?, &[200], "ping").map(|_| ())
    }

    /// Creates a container; `Ok(None)` when the image is missing.
    pub fn create(&self, spec: &Value) -> Result<Option<String>, SandboxError> {
        let body = serde_json::to_vec(spec).expect("serializable spec");
        let r = self.control("POST", "/containers/create", Some(("application/json", &body)))?;
        if r.status == 404 {
            return Ok(None);
        }
        let r = Self::expect(r, &[201], "create container")?;
        r.json()?
            .get("Id")
            .and_then(Value::as_str)
            .map(|id| Some(id.to_string()))
            .ok_or_else(|| SandboxError::Protocol("create response without Id".into()))
    }

    pub fn pull(&self, image: &str) -> Result<(), SandboxError> {
        let (name, tag) = match image.rsplit_once(':') {
            Some((n, t)) if !t.contains('/') => (n, t),
            _ => (image, "latest"),
        };
        let path = format!("/images/create?fromImage={}&tag={}", encode_component(name), encode_component(tag));
        let r = self.control("POST", &path, None)?;
        Self::expect(r, &[200], "pull image").map(|_| ())
    }

    pub fn put_archive(&self, id: &str, dest: &str, tar: &[u8]) -> Result<(), SandboxError> {
        let path = format!("/containers/{id}/archive?path={}", encode_component(dest));
        let r = self.control("PUT", &path, Some(("application/x-tar", tar)))?;
        Self::expect(r, &[200], "upload archive").map(|_| ())
    }

    pub fn start(&self, id: &str) -> Result<(), SandboxError> {
        let r = self.control("POST", &format!("/containers/{id}/start"), None)?;
        Self::expect(r, &[204, 304], "start container").map(|_| ())
    }

    /// Blocks until the container stops or `timeout` elapses (`Ok(None)`).
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<Option<i64>, SandboxError> {
        match self.call("POST", &format!("/containers/{id}/wait"), None, timeout) {
            Err(CallError::Timeout) => Ok(None),
            Err(CallError::Fatal(e)) => Err(e),
            Ok(r) => {
                let r = Self::expect(r, &[200], "wait container")?;
                Ok(Some(r.json()?.get("StatusCode").and_then(Value::as_i64).unwrap_or(-1)))
            }
        }
    }

    pub fn kill(&self, id: &str) -> Result<(), SandboxError> {
        let r = self.control("POST", &format!("/containers/{id}/kill"), None)?;
        // 409: already stopped.
        Self::expect(r, &[204, 409], "kill container").map(|_| ())
    }

    pub fn inspect(&self, id: &str) -> Result<Value, SandboxError> {
        Self::expect(self.control("GET", &format!("/containers/{id}/json"), None)?, &[200], "inspect")?.json()
    }

    /// Demultiplexed (stdout, stderr, stdout truncated, stderr truncated).
    pub fn logs(&self, id: &str) -> Result<(Vec<u8>, Vec<u8>, bool, bool), SandboxError> {
        let r = self.control("GET", &format!("/containers/{id}/logs?stdout=true&stderr=true"), None)?;
        let r = Self::expect(r, &[200], "logs")?;
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let (mut out_t, mut err_t) = (false, false);
        let mut rest = r.body.as_slice();
        while rest.len() >= 8 {
            let kind = rest[0];
            let len = u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]) as usize;
            let end = (8 + len).min(rest.len());
            let frame = &rest[8..end];
            match kind {
                2 => err_t |= capture_capped(&mut err, frame, STREAM_CAP),
                _ => out_t |= capture_capped(&mut out, frame, STREAM_CAP),
            }
            rest = &rest[end..];
        }
        Ok((out, err, out_t, err_t))
    }

    pub fn remove(&self, id: &str) -> Result<(), SandboxError> {
        let r = self.control("DELETE", &format!("/containers/{id}?force=true&v=true"), None)?;
        Self::expect(r, &[204, 404], "remove container").map(|_| ())
    }

    /// Ids of all containers (any state) carrying the sandbox label.
    pub fn list_labeled(&self) -> Result<Vec<String>, SandboxError> {
        let filters = json!({ "label": [format!("{SANDBOX_LABEL}=1")] }).to_string();
        let path = format!("/containers/json?all=true&filters={}", encode_component(&filters));
        let r = Self::expect(self.control("GET", &path, None)?, &[200], "list containers")?;
        Ok(r.json()?
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|c| c.get("Id").and_then(Value::as_str).map(String::from))
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Force-removes its container when dropped, on every exit path.
struct ContainerGuard<'a> {
    client: &'a DockerClient,
    id: String,
}

impl Drop for ContainerGuard<'_> {
    fn drop(&mut self) {
        if let Err(e) = self.client.remove(&self.id) {
            log::error!("failed to remove sandbox container {}: {e}", self.id);
        }
    }
}

/// One fresh container per job; network disabled, limits set through the runtime.
#[derive(Debug, Clone)]
pub struct ContainerExecutor {
    client: DockerClient,
    pull: bool,
}

impl ContainerExecutor {
    pub fn new(client: DockerClient, pull: bool) -> Self {
        ContainerExecutor { client, pull }
    }

    pub fn client(&self) -> &DockerClient {
        &self.client
    }

    fn spec(job: &ExecutionJob, limits: &ResourceLimits) -> Value {
        json!({
            "Image": job.image,
            "Cmd": job.command,
            "WorkingDir": WORKDIR,
            "Labels": { SANDBOX_LABEL: "1" },
            "NetworkDisabled": true,
            "Tty": false,
            "Env": ["PYTHONDONTWRITEBYTECODE=1", "PYTHONHASHSEED=0", "PYTEST_DISABLE_PLUGIN_AUTOLOAD=1"],
            "HostConfig": {
                "Memory": limits.memory_bytes,
                "MemorySwap": limits.memory_bytes,
                "NanoCpus": (limits.cpu_quota * 1e9).round() as u64,
                "PidsLimit": limits.pid_cap,
                "NetworkMode": "none",
                "AutoRemove": false,
                "CapDrop": ["ALL"],
                "SecurityOpt": ["no-new-privileges"],
            }
        })
    }
}

impl Executor for ContainerExecutor {
    fn name(&self) -> &'static str {
        "container"
    }

    fn run(&self, job: &ExecutionJob, limits: &ResourceLimits) -> Result<ExecutionOutcome, SandboxError> {
        let archive = build_archive_with_prefix(
            job.files.iter().map(|(p, c)| (p.as_str(), c.as_bytes())),
            "workspace/",
        )?;
        let spec = Self::spec(job, limits);
        let id = match self.client.create(&spec)? {
            Some(id) => id,
            None if self.pull => {
                self.client.pull(&job.image)?;
                self.client
                    .create(&spec)?
                    .ok_or_else(|| SandboxError::Image(format!("{} missing after pull", job.image)))?
            }
            None => return Err(SandboxError::Image(format!("image {} not present and pulling is disabled", job.image))),
        };
        let guard = ContainerGuard {
            client: &self.client,
            id,
        };

        self.client.put_archive(&guard.id, "/", &archive)?;
        let started = Instant::now();
        self.client.start(&guard.id)?;
        let mut timed_out = false;
        if self.client.wait(&guard.id, limits.timeout())?.is_none() {
            timed_out = true;
            self.client.kill(&guard.id)?;
            self.client.wait(&guard.id, CONTROL_TIMEOUT)?;
        }
        let wall_time_ms = started.elapsed().as_millis() as u64;

        let state = self.client.inspect(&guard.id)?;
        let state = state.get("State").cloned().unwrap_or(Value::Null);
        let oom_killed = state.get("OOMKilled").and_then(Value::as_bool).unwrap_or(false);
        let mut exit_status = state.get("ExitCode").and_then(Value::as_i64).unwrap_or(-1) as i32;
        if timed_out && exit_status == 0 {
            exit_status = 137;
        }
        let (out, err, out_t, err_t) = self.client.logs(&guard.id)?;
        drop(guard);

        Ok(ExecutionOutcome {
            stdout: finish_stream(out, out_t),
            stderr: finish_stream(err, err_t),
            exit_status,
            timed_out,
            oom_killed,
            wall_time_ms,
            metadata: ExecutionMetadata {
                executor: "container".into(),
                isolation: Isolation::Container,
                memory: Enforcement::Runtime,
                cpu: Enforcement::Runtime,
                pids: Enforcement::Runtime,
                stdout_truncated: out_t,
                stderr_truncated: err_t,
                synthetic: false,
            },
        })
    }
}
