use std::ffi::CString;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    build_archive, capture_capped, finish_stream, Enforcement, ExecutionJob, ExecutionMetadata,
    ExecutionOutcome, Executor, Isolation, ResourceLimits, SandboxError, STREAM_CAP,
};

const CGROUP_ROOT: &str = "/sys/fs/cgroup";
const CPU_PERIOD_US: u64 = 100_000;

/// Runs jobs as host processes in a scratch directory.
///
/// Memory, CPU and PID limits go through cgroup v1 controllers when they are
/// writable (falling back to `RLIMIT_AS` for memory). With network isolation
/// on, the process runs in a fresh network namespace with no interfaces up.
#[derive(Debug, Clone)]
pub struct SubprocessExecutor {
    isolate_network: bool,
    cgroup_root: Option<PathBuf>,
}

impl Default for SubprocessExecutor {
    fn default() -> Self {
        Self::new()
    }
}

static SEQ: AtomicU64 = AtomicU64::new(0);

impl SubprocessExecutor {
    /// No network isolation; results are flagged `isolation: none`.
    pub fn new() -> Self {
        SubprocessExecutor {
            isolate_network: false,
            cgroup_root: probe_cgroups(),
        }
    }

    /// Requests a private network namespace. Degrades to no isolation (and says
    /// so in outcome metadata) when namespaces cannot be created.
    pub fn isolated() -> Self {
        let available = network_namespace_available();
        if !available {
            log::warn!("network namespaces unavailable; subprocess executor runs without isolation");
        }
        SubprocessExecutor {
            isolate_network: available,
            cgroup_root: probe_cgroups(),
        }
    }

    pub fn isolates_network(&self) -> bool {
        self.isolate_network
    }

    pub fn has_cgroups(&self) -> bool {
        self.cgroup_root.is_some()
    }
}

fn probe_cgroups() -> Option<PathBuf> {
    let root = Path::new(CGROUP_ROOT);
    let probe = root.join("memory").join(format!("groundloop-probe-{}", std::process::id()));
    match std::fs::create_dir(&probe) {
        Ok(()) => {
            let _ = std::fs::remove_dir(&probe);
            Some(root.to_path_buf())
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Some(root.to_path_buf()),
        Err(_) => None,
    }
}

fn unshare_network() -> std::io::Result<()> {
    // SAFETY: unshare only affects the calling (freshly forked) process.
    unsafe {
        if libc::unshare(libc::CLONE_NEWNET) == 0 {
            return Ok(());
        }
        if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) == 0 {
            return Ok(());
        }
    }
    Err(std::io::Error::last_os_error())
}

fn network_namespace_available() -> bool {
    let mut cmd = Command::new("true");
    // SAFETY: the closure only calls unshare(2).
    unsafe {
        cmd.pre_exec(unshare_network);
    }
    cmd.stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

/// Per-run cgroups, removed on drop after their processes are killed.
struct Cgroups {
    dirs: Vec<PathBuf>,
    memory: Option<PathBuf>,
    procs_files: Vec<CString>,
    memory_ok: bool,
    cpu_ok: bool,
    pids_ok: bool,
}

impl Cgroups {
    fn create(root: &Path, limits: &ResourceLimits) -> Cgroups {
        let name = format!(
            "groundloop-{}-{}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        );
        let mut cg = Cgroups {
            dirs: Vec::new(),
            memory: None,
            procs_files: Vec::new(),
            memory_ok: false,
            cpu_ok: false,
            pids_ok: false,
        };
        let quota = ((limits.cpu_quota * CPU_PERIOD_US as f64).round() as u64).max(1000);
        let settings: [(&str, Vec<(&str, String)>); 3] = [
            ("memory", vec![("memory.limit_in_bytes", limits.memory_bytes.to_string())]),
            (
                "cpu",
                vec![
                    ("cpu.cfs_period_us", CPU_PERIOD_US.to_string()),
                    ("cpu.cfs_quota_us", quota.to_string()),
                ],
            ),
            ("pids", vec![("pids.max", limits.pid_cap.to_string())]),
        ];
        for (controller, files) in settings {
            let dir = root.join(controller).join(&name);
            if std::fs::create_dir(&dir).is_err() {
                continue;
            }
            let ok = files
                .iter()
                .all(|(file, value)| std::fs::write(dir.join(file), value).is_ok());
            if !ok {
                let _ = std::fs::remove_dir(&dir);
                continue;
            }
            if let Ok(c) = CString::new(dir.join("cgroup.procs").to_string_lossy().as_bytes()) {
                cg.procs_files.push(c);
            }
            match controller {
                "memory" => {
                    cg.memory_ok = true;
                    cg.memory = Some(dir.clone());
                    // Swap would let the job dodge the cap.
                    let _ = std::fs::write(dir.join("memory.memsw.limit_in_bytes"), limits.memory_bytes.to_string());
                    let _ = std::fs::write(dir.join("memory.swappiness"), "0");
                }
                "cpu" => cg.cpu_ok = true,
                _ => cg.pids_ok = true,
            }
            cg.dirs.push(dir);
        }
        cg
    }

    fn oom_killed(&self) -> bool {
        let Some(dir) = &self.memory else { return false };
        std::fs::read_to_string(dir.join("memory.oom_control"))
            .ok()
            .and_then(|s| {
                s.lines()
                    .find_map(|l| l.strip_prefix("oom_kill ").and_then(|n| n.trim().parse::<u64>().ok()))
            })
            .is_some_and(|n| n > 0)
    }

    fn kill_all(&self) {
        for dir in &self.dirs {
            let Ok(procs) = std::fs::read_to_string(dir.join("cgroup.procs")) else {
                continue;
            };
            for pid in procs.lines().filter_map(|l| l.trim().parse::<i32>().ok()) {
                // SAFETY: sending a signal has no memory-safety implications.
                unsafe {
                    libc::kill(pid, libc::SIGKILL);
                }
            }
        }
    }
}

impl Drop for Cgroups {
    fn drop(&mut self) {
        for _ in 0..200 {
            self.kill_all();
            self.dirs.retain(|d| std::fs::remove_dir(d).is_err() && d.exists());
            if self.dirs.is_empty() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        log::warn!("could not remove cgroups {:?}", self.dirs);
    }
}

/// Writes the caller's pid into each cgroup.procs file. Async-signal-safe.
fn join_cgroups(files: &[CString]) -> std::io::Result<()> {
    // SAFETY: getpid/open/write/close are async-signal-safe; buffers are on the stack.
    unsafe {
        let mut pid = libc::getpid() as u64;
        let mut buf = [0u8; 24];
        let mut i = buf.len();
        loop {
            i -= 1;
            buf[i] = b'0' + (pid % 10) as u8;
            pid /= 10;
            if pid == 0 {
                break;
            }
        }
        let digits = &buf[i..];
        for f in files {
            let fd = libc::open(f.as_ptr(), libc::O_WRONLY);
            if fd < 0 {
                return Err(std::io::Error::last_os_error());
            }
            let n = libc::write(fd, digits.as_ptr().cast(), digits.len());
            libc::close(fd);
            if n < 0 {
                return Err(std::io::Error::last_os_error());
            }
        }
    }
    Ok(())
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R) -> (Arc<Mutex<(Vec<u8>, bool)>>, thread::JoinHandle<()>) {
    let shared = Arc::new(Mutex::new((Vec::new(), false)));
    let sink = Arc::clone(&shared);
    let handle = thread::spawn(move || {
        let mut chunk = [0u8; 8192];
        loop {
            match src.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut guard = sink.lock().unwrap_or_else(|e| e.into_inner());
                    let (buf, truncated) = &mut *guard;
                    if capture_capped(buf, &chunk[..n], STREAM_CAP) {
                        *truncated = true;
                    }
                }
            }
        }
    });
    (shared, handle)
}

fn collect(shared: &Arc<Mutex<(Vec<u8>, bool)>>, handle: thread::JoinHandle<()>, grace: Instant) -> (String, bool) {
    // A descendant that escaped the process group may hold the pipe open.
    while !handle.is_finished() && Instant::now() < grace {
        thread::sleep(Duration::from_millis(5));
    }
    if handle.is_finished() {
        let _ = handle.join();
    }
    let guard = shared.lock().unwrap_or_else(|e| e.into_inner());
    (finish_stream(guard.0.clone(), guard.1), guard.1)
}

impl Executor for SubprocessExecutor {
    fn name(&self) -> &'static str {
        "subprocess"
    }

    fn run(&self, job: &ExecutionJob, limits: &ResourceLimits) -> Result<ExecutionOutcome, SandboxError> {
        let Some((program, args)) = job.command.split_first() else {
            return Err(SandboxError::Io("empty command".into()));
        };
        let workdir = tempfile::Builder::new().prefix("groundloop-run-").tempdir()?;
        let archive = build_archive(job.files.iter().map(|(p, c)| (p.as_str(), c.as_bytes())))?;
        tar::Archive::new(archive.as_slice()).unpack(workdir.path())?;

        let cgroups = self.cgroup_root.as_deref().map(|root| Cgroups::create(root, limits));
        let procs_files: Vec<CString> = cgroups.as_ref().map(|c| c.procs_files.clone()).unwrap_or_default();
        let memory_via_rlimit = !cgroups.as_ref().is_some_and(|c| c.memory_ok);
        let memory_bytes = limits.memory_bytes;
        let isolate = self.isolate_network;

        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(workdir.path())
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
            .env("HOME", workdir.path())
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .env("PYTEST_DISABLE_PLUGIN_AUTOLOAD", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // SAFETY: the hook only issues async-signal-safe syscalls on pre-built data.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setsid() < 0 {
                    return Err(std::io::Error::last_os_error());
                }
                join_cgroups(&procs_files)?;
                if memory_via_rlimit {
                    let lim = libc::rlimit {
                        rlim_cur: memory_bytes as libc::rlim_t,
                        rlim_max: memory_bytes as libc::rlim_t,
                    };
                    libc::setrlimit(libc::RLIMIT_AS, &lim);
                }
                if isolate {
                    unshare_network()?;
                }
                Ok(())
            });
        }

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| SandboxError::Io(format!("spawn {program}: {e}")))?;
        let pgid = child.id() as i32;
        let (out_buf, out_handle) = spawn_reader(child.stdout.take().expect("piped stdout"));
        let (err_buf, err_handle) = spawn_reader(child.stderr.take().expect("piped stderr"));

        let deadline = started + limits.timeout();
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                timed_out = true;
                // SAFETY: signalling our own process group.
                unsafe {
                    libc::kill(-pgid, libc::SIGKILL);
                }
                break child.wait()?;
            }
            thread::sleep(Duration::from_millis(5));
        };
        let wall_time_ms = started.elapsed().as_millis() as u64;
        // Stragglers in the group or cgroup must not outlive the run.
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
        if let Some(cg) = &cgroups {
            cg.kill_all();
        }

        let grace = Instant::now() + Duration::from_secs(2);
        let (stdout, stdout_truncated) = collect(&out_buf, out_handle, grace);
        let (stderr, stderr_truncated) = collect(&err_buf, err_handle, grace);

        let mut exit_status = status
            .code()
            .unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
        if timed_out && exit_status == 0 {
            exit_status = 124;
        }
        let oom_killed = cgroups.as_ref().is_some_and(|c| c.oom_killed());
        let enforcement = |ok: bool| if ok { Enforcement::Cgroup } else { Enforcement::Unenforced };
        let metadata = ExecutionMetadata {
            executor: "subprocess".into(),
            isolation: if isolate { Isolation::Namespace } else { Isolation::None },
            memory: match &cgroups {
                Some(c) if c.memory_ok => Enforcement::Cgroup,
                _ => Enforcement::Rlimit,
            },
            cpu: enforcement(cgroups.as_ref().is_some_and(|c| c.cpu_ok)),
            pids: enforcement(cgroups.as_ref().is_some_and(|c| c.pids_ok)),
            stdout_truncated,
            stderr_truncated,
            synthetic: false,
        };
        drop(cgroups);
        Ok(ExecutionOutcome {
            stdout,
            stderr,
            exit_status,
            timed_out,
            oom_killed,
            wall_time_ms,
            metadata,
        })
    }
}
