use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread::JoinHandle;
use std::time::Duration;

use hwhpo::cli::best_from_ledger;
use hwhpo::net::{decode, encode, read_trials, Master, MasterConfig, Message, RunSummary, TaskStatus};
use hwhpo::scheduler::{Mode, Scheduler, SchedulerConfig};
use hwhpo::space::load_spec;

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples")
}

fn start(out: &Path, max_trials: usize, cfg: SchedulerConfig) -> (SocketAddr, JoinHandle<RunSummary>) {
    let forest = load_spec(&examples().join("quadratic.json")).unwrap().split();
    let scheduler = Scheduler::new(forest, vec![], cfg, 5).unwrap();
    let master = Master::bind(
        MasterConfig {
            listen: "127.0.0.1:0".into(),
            max_trials: Some(max_trials),
            max_seconds: None,
            task_timeout_s: 30.0,
            max_retries: 3,
            output_dir: out.to_path_buf(),
            seed: 5,
        },
        scheduler,
    )
    .unwrap();
    let addr = master.local_addr().unwrap();
    (addr, std::thread::spawn(move || master.serve().unwrap()))
}

struct Client {
    stream: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        Self { stream, reader }
    }

    fn send(&mut self, m: &Message) {
        self.stream.write_all(encode(m).unwrap().as_bytes()).unwrap();
    }

    fn send_raw(&mut self, line: &str) {
        self.stream.write_all(line.as_bytes()).unwrap();
    }

    /// Next message, or `None` once the master closed the connection.
    fn recv(&mut self) -> Option<Message> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(decode(&line).unwrap()),
        }
    }

    fn register(addr: SocketAddr, id: &str) -> Self {
        let mut c = Self::connect(addr);
        c.send(&Message::Register { worker_id: id.into(), features: BTreeMap::new() });
        c
    }

    fn request(&mut self, id: &str) -> (u64, BTreeMap<String, hwhpo::space::Value>) {
        self.send(&Message::Request { worker_id: id.into() });
        match self.recv() {
            Some(Message::Task { task_id, assignment, .. }) => (task_id, assignment),
            other => panic!("expected a task, got {other:?}"),
        }
    }

    fn ok(&mut self, task_id: u64, loss: f64) {
        self.send(&Message::Result { task_id, status: TaskStatus::Ok, loss: Some(loss), duration_s: 0.01, log_tail: String::new() });
    }
}

#[test]
fn foreign_result_is_rejected_without_touching_the_ledger() {
    let out = tempfile::tempdir().unwrap();
    let (addr, master) = start(out.path(), 1, SchedulerConfig::default());
    let mut w = Client::register(addr, "w1");
    let (task, _) = w.request("w1");
    w.ok(task + 100, 0.5);
    match w.recv() {
        Some(Message::Error { code, .. }) => assert_eq!(code, "unknown_task"),
        other => panic!("expected unknown_task, got {other:?}"),
    }
    w.ok(task, 0.5);
    w.send(&Message::Request { worker_id: "w1".into() });
    assert_eq!(w.recv(), Some(Message::Shutdown));
    let summary = master.join().unwrap();
    assert_eq!((summary.tasks.created, summary.tasks.done), (1, 1));
    assert_eq!(read_trials(&out.path().join("trials.jsonl")).unwrap().len(), 1);
}

#[test]
fn unregistered_and_malformed_traffic() {
    let out = tempfile::tempdir().unwrap();
    let (addr, master) = start(out.path(), 1, SchedulerConfig::default());

    let mut stranger = Client::connect(addr);
    stranger.send(&Message::Request { worker_id: "ghost".into() });
    match stranger.recv() {
        Some(Message::Error { code, .. }) => assert_eq!(code, "not_registered"),
        other => panic!("expected not_registered, got {other:?}"),
    }

    let mut broken = Client::register(addr, "w-bad");
    broken.send_raw("this is not json\n");
    match broken.recv() {
        Some(Message::Error { code, .. }) => assert_eq!(code, "bad_frame"),
        other => panic!("expected bad_frame, got {other:?}"),
    }
    assert_eq!(broken.recv(), None, "connection stays open after a bad frame");

    let mut w = Client::register(addr, "w2");
    let (task, _) = w.request("w2");
    w.ok(task, 1.0);
    let summary = master.join().unwrap();
    assert_eq!(summary.trials, 1);
}

#[test]
fn silent_worker_loses_its_task_to_a_live_one() {
    let out = tempfile::tempdir().unwrap();
    let cfg = SchedulerConfig { heartbeat_timeout_s: 0.5, ..SchedulerConfig::default() };
    let (addr, master) = start(out.path(), 1, cfg);

    let mut silent = Client::register(addr, "silent");
    let (task, assignment) = silent.request("silent");
    // the master hangs up on the expired worker
    assert_eq!(silent.recv(), None);

    let mut live = Client::register(addr, "live");
    let (again, same) = live.request("live");
    assert_eq!((again, &same), (task, &assignment));
    live.ok(again, 2.0);
    let summary = master.join().unwrap();
    assert_eq!((summary.tasks.created, summary.tasks.done, summary.tasks.reissued), (1, 1, 1));
}

#[test]
fn failed_attempt_is_retried() {
    let out = tempfile::tempdir().unwrap();
    let (addr, master) = start(out.path(), 1, SchedulerConfig::default());
    let mut w = Client::register(addr, "w");
    let (task, _) = w.request("w");
    w.send(&Message::Result { task_id: task, status: TaskStatus::Timeout, loss: None, duration_s: 30.0, log_tail: "slow".into() });
    let (retry, _) = w.request("w");
    assert_eq!(retry, task);
    w.ok(retry, 0.25);
    let summary = master.join().unwrap();
    assert_eq!((summary.tasks.created, summary.tasks.done, summary.tasks.failed), (1, 1, 0));
}

#[test]
fn fcfs_history_carries_only_uniform_tables() {
    let out = tempfile::tempdir().unwrap();
    let cfg = SchedulerConfig { mode: Mode::Fcfs, rebuild_every: 2, ..SchedulerConfig::default() };
    let (addr, master) = start(out.path(), 6, cfg);
    let mut w = Client::register(addr, "w");
    for i in 0..6 {
        let (task, _) = w.request("w");
        w.ok(task, i as f64);
    }
    master.join().unwrap();

    let history = std::fs::read_to_string(out.path().join("schedule_history.jsonl")).unwrap();
    assert!(history.lines().count() >= 2);
    for line in history.lines() {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        let table = &entry["table"];
        assert_eq!(table["mode"], "fcfs");
        assert!(table["assignments"].as_object().unwrap().is_empty());
        let weights: Vec<f64> = table["weights"].as_object().unwrap().values().map(|w| w.as_f64().unwrap()).collect();
        assert_eq!(weights.len(), 3);
        assert!(weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn cli_run_agrees_with_its_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let out = dir.path().join("run");
    let config = serde_json::json!({
        "spec_path": examples().join("quadratic.json"),
        "mode": "heuristic",
        "budget": {"max_trials": 10},
        "listen": format!("127.0.0.1:{port}"),
        "classes": [{"name": "any", "performance_score": 1.0}],
        "task_timeout_s": 20.0,
        "output_dir": out,
        "seed": 3
    });
    let config_path = dir.path().join("run.json");
    std::fs::write(&config_path, config.to_string()).unwrap();

    let quiet = |c: &mut Command| {
        c.env("RUST_LOG", "warn").stdout(Stdio::null()).stderr(Stdio::null());
    };
    let mut run = Command::new(env!("CARGO_BIN_EXE_hwhpo"));
    run.args(["run", "--config"]).arg(&config_path);
    quiet(&mut run);
    let mut master = run.spawn().unwrap();

    let objective = format!("{} --sleep-ms-per-param 1", env!("CARGO_BIN_EXE_hwhpo-demo-objective"));
    let mut worker = Command::new(env!("CARGO_BIN_EXE_hwhpo"));
    worker
        .args(["worker", "--master", &format!("127.0.0.1:{port}"), "--objective", &objective])
        .args(["--worker-id", "solo", "--max-reconnects", "20"]);
    quiet(&mut worker);
    let mut worker = worker.spawn().unwrap();

    assert!(master.wait().unwrap().success());
    assert!(worker.wait().unwrap().success());

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["trials"], 10);
    let per_model = best_from_ledger(&out.join("trials.jsonl")).unwrap();
    let ledger_best = per_model.values().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(summary["best"]["loss"].as_f64().unwrap(), ledger_best);
    for (model, loss) in &per_model {
        assert_eq!(summary["best_per_model"][model]["loss"].as_f64().unwrap(), *loss);
    }
}
