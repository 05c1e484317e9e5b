use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::{LedgerCounts, TaskLedger};
use super::protocol::{decode, encode, encode_line, Message, TaskStatus};
use crate::heuristics::TrialRecord;
use crate::scheduler::Scheduler;
use crate::space::{Assignment, Value};

#[derive(Debug, thiserror::Error)]
pub enum MasterError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("output directory {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error("invalid master config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterConfig {
    pub listen: String,
    /// Stop after this many successful trials.
    pub max_trials: Option<usize>,
    /// Stop after this much wall-clock time.
    pub max_seconds: Option<f64>,
    pub task_timeout_s: f64,
    /// Extra attempts granted to a task after a failure or a lost worker.
    pub max_retries: u32,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl MasterConfig {
    pub fn validate(&self) -> Result<(), MasterError> {
        if self.max_trials.is_none() && self.max_seconds.is_none() {
            return Err(MasterError::Config("a trial or time budget is required".into()));
        }
        if self.max_trials == Some(0) {
            return Err(MasterError::Config("max_trials must be positive".into()));
        }
        if self.max_seconds.is_some_and(|s| !(s > 0.0)) {
            return Err(MasterError::Config("max_seconds must be positive".into()));
        }
        if !(self.task_timeout_s > 0.0) || !self.task_timeout_s.is_finite() {
            return Err(MasterError::Config("task_timeout_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestTrial {
    pub model_id: String,
    pub loss: f64,
    pub values: BTreeMap<String, Value>,
    pub task_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub trials: usize,
    pub elapsed_s: f64,
    pub throughput_per_hour: f64,
    pub best: Option<BestTrial>,
    pub best_per_model: BTreeMap<String, BestTrial>,
    pub trials_per_class: BTreeMap<String, usize>,
    pub trials_per_model: BTreeMap<String, usize>,
    pub tasks: LedgerCounts,
    pub schedule_generations: u64,
}

enum Event {
    Accepted(u64, TcpStream),
    Line(u64, String),
    Closed(u64),
}

struct Conn {
    stream: TcpStream,
    worker_id: Option<String>,
}

/// The master process: owns the scheduler, the task ledger and every socket.
///
/// One thread accepts connections and one thread per connection reads lines;
/// all state changes happen on the thread running [`Master::serve`].
pub struct Master {
    cfg: MasterConfig,
    listener: TcpListener,
    scheduler: Scheduler,
}

impl Master {
    /// Validates the config, prepares the output directory and binds the socket.
    pub fn bind(cfg: MasterConfig, scheduler: Scheduler) -> Result<Self, MasterError> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir)
            .map_err(|source| MasterError::Output { path: cfg.output_dir.clone(), source })?;
        let listener = TcpListener::bind(&cfg.listen)
            .map_err(|source| MasterError::Bind { addr: cfg.listen.clone(), source })?;
        Ok(Self { cfg, listener, scheduler })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Runs until the budget is spent, then tells every worker to shut down.
    pub fn serve(self) -> Result<RunSummary, MasterError> {
        let Master { cfg, listener, scheduler } = self;
        let out = |name: &str| -> Result<File, MasterError> {
            let path = cfg.output_dir.join(name);
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|source| MasterError::Output { path, source })
        };
        let trials_file = out("trials.jsonl")?;
        let history_file = out("schedule_history.jsonl")?;

        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        listener.set_nonblocking(true).map_err(|source| MasterError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
        let acceptor = spawn_acceptor(listener, tx, Arc::clone(&stop));

        let mut state = RunState {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            scheduler,
            ledger: TaskLedger::new(),
            conns: HashMap::new(),
            workers: HashMap::new(),
            parked: VecDeque::new(),
            trials_file,
            history_file,
            started: Instant::now(),
            sequence: 0,
            last_generation: None,
            best_per_model: BTreeMap::new(),
            per_class: BTreeMap::new(),
            per_model: BTreeMap::new(),
            stopping: false,
        };
        state.record_schedule();
        let summary = state.run(&rx);
        stop.store(true, Ordering::SeqCst);
        let _ = acceptor.join();
        summary
    }
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut next_id = 0u64;
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    next_id += 1;
                    let id = next_id;
                    if stream.set_nonblocking(false).is_err() {
                        continue;
                    }
                    let _ = stream.set_nodelay(true);
                    let Ok(reader) = stream.try_clone() else { continue };
                    if tx.send(Event::Accepted(id, stream)).is_err() {
                        return;
                    }
                    let tx = tx.clone();
                    thread::spawn(move || {
                        let mut lines = BufReader::new(reader);
                        let mut buf = String::new();
                        loop {
                            buf.clear();
                            match lines.read_line(&mut buf) {
                                Ok(0) | Err(_) => break,
                                Ok(_) => {
                                    if tx.send(Event::Line(id, buf.clone())).is_err() {
                                        return;
                                    }
                                }
                            }
                        }
                        let _ = tx.send(Event::Closed(id));
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(20));
                }
            }
        }
    })
}

struct RunState {
    cfg: MasterConfig,
    scheduler: Scheduler,
    ledger: TaskLedger,
    rng: ChaCha8Rng,
    conns: HashMap<u64, Conn>,
    /// worker id -> connection id
    workers: HashMap<String, u64>,
    /// Workers that asked for a task while none could be issued.
    parked: VecDeque<String>,
    trials_file: File,
    history_file: File,
    started: Instant,
    sequence: u64,
    last_generation: Option<u64>,
    best_per_model: BTreeMap<String, BestTrial>,
    per_class: BTreeMap<String, usize>,
    per_model: BTreeMap<String, usize>,
    stopping: bool,
}

const TICK: Duration = Duration::from_millis(100);

impl RunState {
    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn run(&mut self, rx: &Receiver<Event>) -> Result<RunSummary, MasterError> {
        while !self.stopping {
            match rx.recv_timeout(TICK) {
                Ok(Event::Accepted(id, stream)) => {
                    self.conns.insert(id, Conn { stream, worker_id: None });
                }
                Ok(Event::Line(id, line)) => self.on_line(id, &line)?,
                Ok(Event::Closed(id)) => self.on_closed(id),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            self.tick();
        }
        self.shutdown_all();
        Ok(self.summary())
    }

    fn tick(&mut self) {
        let now = self.now();
        for worker_id in self.scheduler.expire_workers(now) {
            log::warn!("worker {worker_id} missed its heartbeat deadline");
            self.requeue_worker_tasks(&worker_id);
            if let Some(id) = self.workers.remove(&worker_id) {
                if let Some(conn) = self.conns.remove(&id) {
                    let _ = conn.stream.shutdown(std::net::Shutdown::Both);
                }
            }
        }
        self.scheduler.maybe_rebuild(now);
        self.record_schedule();
        if self.cfg.max_seconds.is_some_and(|s| now >= s) {
            self.stopping = true;
        }
        if self.budget_spent() {
            self.stopping = true;
        }
        if !self.stopping {
            self.serve_parked();
        }
    }

    fn budget_spent(&self) -> bool {
        self.cfg.max_trials.is_some_and(|m| self.ledger.counts().done >= m)
    }

    fn send(&mut self, conn_id: u64, msg: &Message) {
        let line = match encode(msg) {
            Ok(l) => l,
            Err(e) => {
                log::error!("refusing to send invalid message: {e}");
                return;
            }
        };
        let failed = match self.conns.get_mut(&conn_id) {
            Some(c) => c.stream.write_all(line.as_bytes()).is_err(),
            None => return,
        };
        if failed {
            // the reader thread reports the close
            if let Some(c) = self.conns.get(&conn_id) {
                let _ = c.stream.shutdown(std::net::Shutdown::Both);
            }
        }
    }

    fn drop_conn(&mut self, conn_id: u64) {
        if let Some(c) = self.conns.get(&conn_id) {
            let _ = c.stream.shutdown(std::net::Shutdown::Both);
        }
    }

    fn on_line(&mut self, conn_id: u64, line: &str) -> Result<(), MasterError> {
        if line.trim().is_empty() {
            return Ok(());
        }
        let msg = match decode(line) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("connection {conn_id}: {e}");
                self.send(conn_id, &e.to_message());
                self.drop_conn(conn_id);
                return Ok(());
            }
        };
        let now = self.now();
        let registered = self.conns.get(&conn_id).and_then(|c| c.worker_id.clone());
        match (msg, registered) {
            (Message::Register { worker_id, features }, _) => {
                self.on_register(conn_id, worker_id, features, now);
            }
            (_, None) => {
                self.send(conn_id, &Message::error("not_registered", "send register first"));
            }
            (Message::Heartbeat { .. }, Some(w)) => {
                let _ = self.scheduler.heartbeat(&w, now);
            }
            (Message::Request { .. }, Some(w)) => {
                let _ = self.scheduler.heartbeat(&w, now);
                if self.stopping || self.budget_spent() {
                    self.send(conn_id, &Message::Shutdown);
                } else if !self.try_dispatch(&w) && !self.parked.contains(&w) {
                    self.parked.push_back(w);
                }
            }
            (Message::Result { task_id, status, loss, duration_s, log_tail }, Some(w)) => {
                let _ = self.scheduler.heartbeat(&w, now);
                self.on_result(conn_id, &w, task_id, status, loss, duration_s, &log_tail)?;
            }
            (other, Some(_)) => {
                let detail = format!("unexpected message from worker: {other:?}");
                self.send(conn_id, &Message::error("unexpected_message", detail));
            }
        }
        Ok(())
    }

    fn on_register(&mut self, conn_id: u64, worker_id: String, features: BTreeMap<String, String>, now: f64) {
        // a re-registering worker lost whatever it was running
        self.requeue_worker_tasks(&worker_id);
        if let Some(old) = self.workers.insert(worker_id.clone(), conn_id) {
            if old != conn_id {
                if let Some(c) = self.conns.get_mut(&old) {
                    c.worker_id = None;
                }
                self.drop_conn(old);
            }
        }
        if let Some(c) = self.conns.get_mut(&conn_id) {
            c.worker_id = Some(worker_id.clone());
        }
        let class = self.scheduler.register_worker(&worker_id, features, now);
        log::info!("worker {worker_id} registered in class {class}");
    }

    fn on_closed(&mut self, conn_id: u64) {
        let Some(conn) = self.conns.remove(&conn_id) else { return };
        let Some(worker_id) = conn.worker_id else { return };
        if self.workers.get(&worker_id) == Some(&conn_id) {
            log::warn!("worker {worker_id} disconnected");
            self.workers.remove(&worker_id);
            self.parked.retain(|w| w != &worker_id);
            self.requeue_worker_tasks(&worker_id);
            self.scheduler.remove_worker(&worker_id);
        }
    }

    fn requeue_worker_tasks(&mut self, worker_id: &str) {
        let now = self.now();
        for task_id in self.ledger.issued_to(worker_id) {
            match self.ledger.fail_attempt(task_id, self.cfg.max_retries, now) {
                Ok(state) => log::info!("task {task_id} from lost worker {worker_id} is now {state:?}"),
                Err(e) => log::error!("ledger: {e}"),
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_result(
        &mut self,
        conn_id: u64,
        worker_id: &str,
        task_id: u64,
        status: TaskStatus,
        loss: Option<f64>,
        duration_s: f64,
        log_tail: &str,
    ) -> Result<(), MasterError> {
        let entry = match self.ledger.check_owner(task_id, worker_id) {
            Ok(e) => e.clone(),
            Err(e) => {
                self.send(conn_id, &Message::error("unknown_task", e.to_string()));
                return Ok(());
            }
        };
        let now = self.now();
        let loss = match (status, loss) {
            (TaskStatus::Ok, Some(l)) => l,
            _ => {
                log::warn!("task {task_id} on {worker_id} ended {status:?}: {}", log_tail.trim_end());
                if let Err(e) = self.ledger.fail_attempt(task_id, self.cfg.max_retries, now) {
                    log::error!("ledger: {e}");
                }
                return Ok(());
            }
        };
        let class = self
            .scheduler
            .worker(worker_id)
            .map(|w| w.class_name.clone())
            .unwrap_or_default();
        self.sequence += 1;
        let trial = TrialRecord {
            model_id: entry.model_id.clone(),
            assignment: entry.assignment.clone(),
            loss,
            duration_s,
            worker_class: class.clone(),
            sequence: self.sequence,
            task_id: Some(task_id),
        };
        if let Err(e) = self.scheduler.report_result(trial.clone(), now) {
            log::error!("scheduler rejected task {task_id}: {e}");
            let _ = self.ledger.fail_attempt(task_id, 0, now);
            return Ok(());
        }
        self.ledger.complete(task_id, now).expect("ownership checked");
        self.append(&trial)?;
        *self.per_class.entry(class).or_default() += 1;
        *self.per_model.entry(trial.model_id.clone()).or_default() += 1;
        let best = BestTrial {
            model_id: trial.model_id.clone(),
            loss,
            values: trial.assignment.values.clone(),
            task_id: Some(task_id),
        };
        let slot = self.best_per_model.entry(trial.model_id).or_insert_with(|| best.clone());
        if loss < slot.loss {
            *slot = best;
        }
        Ok(())
    }

    fn append(&mut self, trial: &TrialRecord) -> Result<(), MasterError> {
        let line = encode_line(trial).expect("finite trial");
        let path = self.cfg.output_dir.join("trials.jsonl");
        self.trials_file
            .write_all(line.as_bytes())
            .and_then(|_| self.trials_file.flush())
            .and_then(|_| self.trials_file.sync_data())
            .map_err(|source| MasterError::Output { path, source })
    }

    fn record_schedule(&mut self) {
        let generation = self.scheduler.generation();
        if self.last_generation == Some(generation) {
            return;
        }
        self.last_generation = Some(generation);
        let entry = serde_json::json!({
            "generation": generation,
            "time_s": self.now(),
            "table": &*self.scheduler.table(),
            "states": self.scheduler.states(),
        });
        if let Ok(line) = encode_line(&entry) {
            let _ = self.history_file.write_all(line.as_bytes()).and_then(|_| self.history_file.flush());
        }
    }

    /// Tasks that may still be created without overshooting the trial budget.
    fn headroom(&self) -> usize {
        match self.cfg.max_trials {
            None => usize::MAX,
            Some(m) => {
                let c = self.ledger.counts();
                m.saturating_sub(c.done + c.issued + c.queued)
            }
        }
    }

    /// Issues a retry or a fresh task to `worker_id`. Returns false when nothing can be issued.
    fn try_dispatch(&mut self, worker_id: &str) -> bool {
        let Some(&conn_id) = self.workers.get(worker_id) else { return false };
        let now = self.now();
        let task_id = if let Some(t) = self.ledger.next_retry() {
            t
        } else if self.headroom() > 0 {
            match self.scheduler.next_task(worker_id, &mut self.rng) {
                Ok(a) => self.ledger.create(a, now),
                Err(e) => {
                    log::error!("cannot create task for {worker_id}: {e}");
                    return false;
                }
            }
        } else {
            return false;
        };
        self.ledger.issue(task_id, worker_id, now).expect("fresh or requeued task");
        let entry = self.ledger.get(task_id).expect("just issued");
        let Assignment { model_id, values } = entry.assignment.clone();
        let msg = Message::Task { task_id, model_id, assignment: values, timeout_s: self.cfg.task_timeout_s };
        self.send(conn_id, &msg);
        true
    }

    fn serve_parked(&mut self) {
        while let Some(w) = self.parked.front().cloned() {
            if !self.workers.contains_key(&w) {
                self.parked.pop_front();
                continue;
            }
            if !self.try_dispatch(&w) {
                break;
            }
            self.parked.pop_front();
        }
    }

    fn shutdown_all(&mut self) {
        let ids: Vec<u64> = self.conns.keys().copied().collect();
        for id in ids {
            self.send(id, &Message::Shutdown);
            if let Some(c) = self.conns.get(&id) {
                let _ = c.stream.shutdown(std::net::Shutdown::Write);
            }
        }
    }

    fn summary(&self) -> RunSummary {
        let elapsed_s = self.now();
        let trials: usize = self.per_model.values().sum();
        let best = self
            .best_per_model
            .values()
            .min_by(|a, b| a.loss.total_cmp(&b.loss))
            .cloned();
        RunSummary {
            trials,
            elapsed_s,
            throughput_per_hour: if elapsed_s > 0.0 { trials as f64 * 3600.0 / elapsed_s } else { 0.0 },
            best,
            best_per_model: self.best_per_model.clone(),
            trials_per_class: self.per_class.clone(),
            trials_per_model: self.per_model.clone(),
            tasks: self.ledger.counts(),
            schedule_generations: self.scheduler.generation(),
        }
    }
}

/// Reads back a `trials.jsonl` file.
pub fn read_trials(path: &Path) -> io::Result<Vec<TrialRecord>> {
    let file = File::open(path)?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        })
        .collect()
}
