use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::net::TcpStream;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::protocol::{decode, encode, encode_line, Message, TaskStatus};
use crate::space::Value;

/// Bytes of combined objective output kept for failed tasks.
pub const LOG_TAIL_BYTES: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum WorkerError {
    #[error("gave up reaching {master} after {attempts} attempts: {source}")]
    Unreachable { master: String, attempts: u32, source: io::Error },
    #[error("invalid worker config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub master: String,
    pub worker_id: String,
    pub features: BTreeMap<String, String>,
    /// Shell command run once per task inside its scratch directory.
    pub objective: String,
    pub heartbeat_interval: Duration,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
    /// Consecutive failed connection attempts tolerated before giving up.
    pub max_reconnects: Option<u32>,
    pub scratch_root: Option<PathBuf>,
}

impl WorkerConfig {
    pub fn new(master: impl Into<String>, worker_id: impl Into<String>, objective: impl Into<String>) -> Self {
        Self {
            master: master.into(),
            worker_id: worker_id.into(),
            features: BTreeMap::new(),
            objective: objective.into(),
            heartbeat_interval: Duration::from_secs(15),
            backoff_min: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
            max_reconnects: None,
            scratch_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub status: TaskStatus,
    pub loss: Option<f64>,
    pub duration_s: f64,
    pub log_tail: String,
}

impl TaskOutcome {
    fn failed(duration_s: f64, log_tail: String) -> Self {
        Self { status: TaskStatus::Failed, loss: None, duration_s, log_tail }
    }
}

#[derive(Deserialize)]
struct LossFile {
    loss: f64,
}

fn tail(file: &mut File) -> String {
    let len = file.seek(SeekFrom::End(0)).unwrap_or(0);
    let start = len.saturating_sub(LOG_TAIL_BYTES as u64);
    let mut buf = Vec::new();
    if file.seek(SeekFrom::Start(start)).is_ok() {
        let _ = file.read_to_end(&mut buf);
    }
    String::from_utf8_lossy(&buf).into_owned()
}

fn kill_group(pid: u32) {
    // the child leads its own process group
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

/// Runs `command` under `sh -c` in a fresh scratch directory holding `params.json`.
///
/// The objective reports by writing `{"loss": <number>}` to `loss.json`. The
/// whole process group is killed once `timeout_s` elapses or `cancel` fires;
/// a cancelled task returns `None`.
pub fn run_objective(
    command: &str,
    values: &BTreeMap<String, Value>,
    timeout_s: f64,
    scratch_root: Option<&std::path::Path>,
    cancel: &dyn Fn() -> bool,
) -> Option<TaskOutcome> {
    let started = Instant::now();
    let elapsed = || started.elapsed().as_secs_f64();
    let scratch = match scratch_root {
        Some(root) => tempfile::Builder::new().prefix("task-").tempdir_in(root),
        None => tempfile::Builder::new().prefix("task-").tempdir(),
    };
    let scratch = match scratch {
        Ok(d) => d,
        Err(e) => return Some(TaskOutcome::failed(elapsed(), format!("scratch directory: {e}"))),
    };
    let dir = scratch.path();
    let params = encode_line(values).expect("finite parameters");
    if let Err(e) = std::fs::write(dir.join("params.json"), params) {
        return Some(TaskOutcome::failed(elapsed(), format!("params.json: {e}")));
    }
    let log_path = dir.join("output.log");
    let opened = File::create(&log_path).and_then(|f| Ok((f.try_clone()?, f)));
    let (out, err) = match opened {
        Ok(p) => p,
        Err(e) => return Some(TaskOutcome::failed(elapsed(), format!("output.log: {e}"))),
    };
    let spawned = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(dir)
        .env("HWHPO_PARAMS", dir.join("params.json"))
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return Some(TaskOutcome::failed(elapsed(), format!("spawn failed: {e}"))),
    };

    let status: Option<ExitStatus> = loop {
        match child.try_wait() {
            Ok(Some(s)) => break Some(s),
            Ok(None) => {}
            Err(e) => {
                log::error!("waiting on objective: {e}");
                kill_group(child.id());
                let _ = child.wait();
                return Some(TaskOutcome::failed(elapsed(), format!("wait failed: {e}")));
            }
        }
        if cancel() {
            kill_group(child.id());
            let _ = child.wait();
            return None;
        }
        if elapsed() >= timeout_s {
            kill_group(child.id());
            let _ = child.wait();
            break None;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let duration_s = elapsed();
    let mut log = File::open(&log_path).ok();
    let mut log_tail = || log.as_mut().map(tail).unwrap_or_default();

    let Some(status) = status else {
        let mut t = log_tail();
        t.push_str(&format!("\n[timed out after {timeout_s} s]"));
        return Some(TaskOutcome { status: TaskStatus::Timeout, loss: None, duration_s, log_tail: t });
    };
    if !status.success() {
        let mut t = log_tail();
        t.push_str(&format!("\n[{status}]"));
        return Some(TaskOutcome::failed(duration_s, t));
    }
    let parsed = std::fs::read_to_string(dir.join("loss.json"))
        .map_err(|e| e.to_string())
        .and_then(|s| serde_json::from_str::<LossFile>(&s).map_err(|e| e.to_string()));
    match parsed {
        Ok(LossFile { loss }) if loss.is_finite() => {
            Some(TaskOutcome { status: TaskStatus::Ok, loss: Some(loss), duration_s, log_tail: String::new() })
        }
        Ok(_) => Some(TaskOutcome::failed(duration_s, format!("{}\n[non-finite loss]", log_tail()))),
        Err(e) => Some(TaskOutcome::failed(duration_s, format!("{}\n[loss.json: {e}]", log_tail()))),
    }
}

enum Inbound {
    Message(Message),
    Closed,
}

struct Session {
    writer: Arc<Mutex<TcpStream>>,
    inbox: Receiver<Inbound>,
    alive: Arc<AtomicBool>,
}

impl Session {
    fn open(stream: TcpStream, cfg: &WorkerConfig) -> io::Result<Self> {
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone()?;
        let writer = Arc::new(Mutex::new(stream));
        let alive = Arc::new(AtomicBool::new(true));
        let (tx, inbox) = mpsc::channel();
        {
            let alive = Arc::clone(&alive);
            thread::spawn(move || {
                let mut lines = BufReader::new(reader);
                let mut buf = String::new();
                loop {
                    buf.clear();
                    match lines.read_line(&mut buf) {
                        Ok(0) | Err(_) => break,
                        Ok(_) => match decode(&buf) {
                            Ok(m) => {
                                if tx.send(Inbound::Message(m)).is_err() {
                                    break;
                                }
                            }
                            Err(e) => log::warn!("ignoring line from master: {e}"),
                        },
                    }
                }
                alive.store(false, Ordering::SeqCst);
                let _ = tx.send(Inbound::Closed);
            });
        }
        {
            let alive = Arc::clone(&alive);
            let writer = Arc::clone(&writer);
            let beat = Message::Heartbeat { worker_id: cfg.worker_id.clone() };
            let interval = cfg.heartbeat_interval;
            thread::spawn(move || {
                let step = Duration::from_millis(50).min(interval);
                let mut last = Instant::now();
                while alive.load(Ordering::SeqCst) {
                    thread::sleep(step);
                    if last.elapsed() >= interval {
                        last = Instant::now();
                        if send_on(&writer, &beat).is_err() {
                            break;
                        }
                    }
                }
            });
        }
        Ok(Self { writer, inbox, alive })
    }

    fn send(&self, msg: &Message) -> io::Result<()> {
        send_on(&self.writer, msg)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.alive.store(false, Ordering::SeqCst);
        if let Ok(s) = self.writer.lock() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

fn send_on(writer: &Mutex<TcpStream>, msg: &Message) -> io::Result<()> {
    let line = encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let mut s = writer.lock().map_err(|_| io::Error::other("writer poisoned"))?;
    s.write_all(line.as_bytes())
}

enum SessionEnd {
    Shutdown,
    Lost,
}

/// Connects to the master and evaluates tasks until told to shut down.
///
/// Lost connections are retried with exponential backoff; the task running
/// when the link dropped is abandoned, since the master requeues it.
pub fn worker_run(cfg: &WorkerConfig) -> Result<(), WorkerError> {
    if cfg.worker_id.is_empty() || cfg.objective.trim().is_empty() {
        return Err(WorkerError::Config("worker id and objective must be non-empty".into()));
    }
    let mut backoff = cfg.backoff_min;
    let mut failures = 0u32;
    loop {
        match TcpStream::connect(&cfg.master) {
            Ok(stream) => {
                failures = 0;
                backoff = cfg.backoff_min;
                let session = match Session::open(stream, cfg) {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("session setup failed: {e}");
                        continue;
                    }
                };
                match serve_session(&session, cfg) {
                    SessionEnd::Shutdown => return Ok(()),
                    SessionEnd::Lost => log::warn!("lost connection to {}", cfg.master),
                }
            }
            Err(e) => {
                failures += 1;
                if cfg.max_reconnects.is_some_and(|m| failures > m) {
                    return Err(WorkerError::Unreachable { master: cfg.master.clone(), attempts: failures, source: e });
                }
                log::info!("cannot reach {} ({e}); retrying in {backoff:?}", cfg.master);
                thread::sleep(backoff);
                backoff = (backoff * 2).min(cfg.backoff_max);
            }
        }
    }
}

fn serve_session(session: &Session, cfg: &WorkerConfig) -> SessionEnd {
    let register = Message::Register { worker_id: cfg.worker_id.clone(), features: cfg.features.clone() };
    let request = Message::Request { worker_id: cfg.worker_id.clone() };
    if session.send(&register).is_err() || session.send(&request).is_err() {
        return SessionEnd::Lost;
    }
    loop {
        let msg = match session.inbox.recv() {
            Ok(Inbound::Message(m)) => m,
            Ok(Inbound::Closed) | Err(_) => return SessionEnd::Lost,
        };
        match msg {
            Message::Shutdown => return SessionEnd::Shutdown,
            Message::Task { task_id, model_id, assignment, timeout_s } => {
                log::info!("task {task_id}: {model_id}");
                let shutdown = std::cell::Cell::new(false);
                let cancel = || {
                    if !session.alive.load(Ordering::SeqCst) {
                        return true;
                    }
                    match session.inbox.try_recv() {
                        Ok(Inbound::Message(Message::Shutdown)) => {
                            shutdown.set(true);
                            true
                        }
                        Ok(Inbound::Closed) => true,
                        Ok(other) => {
                            if let Inbound::Message(m) = other {
                                log::warn!("ignoring message during task: {m:?}");
                            }
                            false
                        }
                        Err(_) => false,
                    }
                };
                let outcome = run_objective(&cfg.objective, &assignment, timeout_s, cfg.scratch_root.as_deref(), &cancel);
                if shutdown.get() {
                    return SessionEnd::Shutdown;
                }
                let Some(o) = outcome else { return SessionEnd::Lost };
                let result = Message::Result {
                    task_id,
                    status: o.status,
                    loss: o.loss,
                    duration_s: o.duration_s,
                    log_tail: o.log_tail,
                };
                if session.send(&result).is_err() || session.send(&request).is_err() {
                    return SessionEnd::Lost;
                }
            }
            Message::Error { code, detail } => {
                log::warn!("master reported {code}: {detail}");
                if code == "not_registered" && session.send(&register).is_err() {
                    return SessionEnd::Lost;
                }
            }
            other => log::warn!("unexpected message from master: {other:?}"),
        }
    }
}
