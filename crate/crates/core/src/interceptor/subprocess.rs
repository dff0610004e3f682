//! Subprocess connectors: process isolation, resource limits, and the
//! server side of the sandbox I/O channel.

use std::io::Read;
use std::os::unix::net::{UnixListener, UnixStream};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

use super::wire::{read_message, write_message, IoRequest, IoResponse};
use super::ExecutionContext;

const STDERR_CAPTURE: usize = 64 * 1024;

#[derive(Clone, Debug)]
pub struct SandboxLimits {
    pub wall_time: Duration,
    pub cpu_seconds: u64,
    pub address_space_bytes: u64,
    pub file_size_bytes: u64,
    pub open_files: u64,
    /// Path to the `station` binary, exported to the function as
    /// `$STATION_IO` so it can run `"$STATION_IO" io ...`.
    pub io_client: Option<PathBuf>,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        SandboxLimits {
            wall_time: Duration::from_secs(60),
            cpu_seconds: 60,
            address_space_bytes: 4 << 30,
            file_size_bytes: 256 << 20,
            open_files: 256,
            io_client: None,
        }
    }
}

fn handle(ctx: &ExecutionContext, stream: &mut UnixStream) -> Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let (req, body): (IoRequest, Vec<u8>) = read_message(stream, 1 << 32)?;
    let (resp, out) = match req {
        IoRequest::List => (
            IoResponse {
                names: ctx.list(),
                ..IoResponse::ok()
            },
            Vec::new(),
        ),
        IoRequest::Read { name } => match ctx.read(&name) {
            Ok(bytes) => (IoResponse::ok(), bytes.to_vec()),
            Err(e) => (IoResponse::err(e.to_string()), Vec::new()),
        },
        IoRequest::Put { inputs } => match ctx.put_output(body, inputs) {
            Ok(()) => (IoResponse::ok(), Vec::new()),
            Err(e) => (IoResponse::err(e.to_string()), Vec::new()),
        },
        IoRequest::ScratchPut { name } => match ctx.write_side_effect(&name, &body) {
            Ok(_) => (IoResponse::ok(), Vec::new()),
            Err(e) => (IoResponse::err(e.to_string()), Vec::new()),
        },
        IoRequest::ScratchGet { name } => match ctx.read_side_effect(&name) {
            Ok(bytes) => (IoResponse::ok(), bytes),
            Err(e) => (IoResponse::err(e.to_string()), Vec::new()),
        },
        IoRequest::Params => (IoResponse::ok(), serde_json::to_vec(ctx.params())?),
    };
    write_message(stream, &resp, &out)
}

struct IoServer {
    socket: PathBuf,
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl IoServer {
    fn start(ctx: Arc<ExecutionContext>) -> Result<Self> {
        let socket = ctx.root().join("io.sock");
        let listener = UnixListener::bind(&socket)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(mut stream) = conn {
                    if let Err(e) = handle(&ctx, &mut stream) {
                        tracing::debug!(invocation = ctx.invocation().0, "sandbox io: {e}");
                    }
                }
            }
        });
        Ok(IoServer {
            socket,
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for IoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = UnixStream::connect(&self.socket);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.socket);
    }
}

fn expand(arg: &str, ctx: &ExecutionContext, connector_dir: &Path) -> String {
    arg.replace("{connector}", &connector_dir.to_string_lossy())
        .replace("{sandbox}", &ctx.root().to_string_lossy())
        .replace("{params}", &ctx.root().join("params.json").to_string_lossy())
        .replace("{outputs}", &ctx.root().join("outputs").to_string_lossy())
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: value as libc::rlim_t,
        rlim_max: value as libc::rlim_t,
    };
    // SAFETY: setrlimit only reads the struct we pass.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

fn drain(mut r: impl Read + Send + 'static) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        while let Ok(n) = r.read(&mut buf) {
            if n == 0 {
                break;
            }
            let room = STDERR_CAPTURE.saturating_sub(kept.len());
            kept.extend_from_slice(&buf[..n.min(room)]);
        }
        kept
    })
}

/// Runs `argv` with the sandbox root as working directory, an empty
/// environment apart from the sandbox variables, and rlimits applied.
/// Returns captured stderr.
pub(super) fn run(
    ctx: &Arc<ExecutionContext>,
    argv: &[String],
    connector_dir: &Path,
    limits: &SandboxLimits,
) -> Result<String> {
    let server = IoServer::start(ctx.clone())?;
    let argv: Vec<String> = argv.iter().map(|a| expand(a, ctx, connector_dir)).collect();
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(ctx.root())
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("HOME", ctx.root())
        .env("LANG", "C.UTF-8")
        .env("STATION_SANDBOX", ctx.root())
        .env("STATION_IO_SOCKET", &server.socket)
        .env("STATION_PARAMS", ctx.root().join("params.json"))
        .env("STATION_OUTPUT_DIR", ctx.root().join("outputs"))
        .env("STATION_INVOCATION", ctx.invocation().0.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(client) = &limits.io_client {
        cmd.env("STATION_IO", client);
    }
    let lim = limits.clone();
    // SAFETY: the closure only calls async-signal-safe libc functions.
    unsafe {
        cmd.pre_exec(move || {
            libc::setpgid(0, 0);
            set_limit(libc::RLIMIT_CPU, lim.cpu_seconds)?;
            set_limit(libc::RLIMIT_AS, lim.address_space_bytes)?;
            set_limit(libc::RLIMIT_FSIZE, lim.file_size_bytes)?;
            set_limit(libc::RLIMIT_NOFILE, lim.open_files)?;
            set_limit(libc::RLIMIT_CORE, 0)?;
            Ok(())
        });
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Sandbox(format!("cannot start `{}`: {e}", argv[0])))?;
    let out = drain(child.stdout.take().expect("piped"));
    let err = drain(child.stderr.take().expect("piped"));
    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if started.elapsed() > limits.wall_time {
            // SAFETY: signals the child's own process group.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.wait();
            break None;
        }
        thread::sleep(Duration::from_millis(2));
    };
    // Reap anything the function left running in its process group.
    // SAFETY: as above.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    drop(server);
    let _ = out.join();
    let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
    match status {
        None => Err(Error::Sandbox(format!(
            "timed out after {:?}; stderr: {stderr}",
            limits.wall_time
        ))),
        Some(s) if s.success() => Ok(stderr),
        Some(s) => Err(Error::Sandbox(format!("{s}; stderr: {}", stderr.trim_end()))),
    }
}
