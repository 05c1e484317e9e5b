//! Line-delimited JSON over TCP between one master and many workers.
//!
//! Every message is a single JSON object with a `type` tag, keys in sorted
//! order, terminated by `\n`. Workers register with their hardware features,
//! then alternate `request` and `result`; the master answers each request with
//! a `task`, or parks the worker until one can be issued. A task lost with its
//! worker is requeued, so each issued task ends in exactly one ledger state.

pub mod ledger;
pub mod master;
pub mod protocol;
pub mod worker;

pub use ledger::{LedgerCounts, LedgerError, TaskLedger, TaskLedgerEntry, TaskState};
pub use master::{read_trials, BestTrial, Master, MasterConfig, MasterError, RunSummary};
pub use protocol::{decode, encode, encode_line, Message, ProtocolError, TaskStatus};
pub use worker::{run_objective, worker_run, TaskOutcome, WorkerConfig, WorkerError, LOG_TAIL_BYTES};
