use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::space::Assignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Queued,
    Issued,
    Done,
    Failed,
    Requeued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLedgerEntry {
    pub task_id: u64,
    pub model_id: String,
    pub assignment: Assignment,
    pub state: TaskState,
    pub issued_to: Option<String>,
    pub attempts: u32,
    pub created_at: f64,
    pub updated_at: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LedgerError {
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("task {task_id}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition { task_id: u64, from: TaskState, to: TaskState },
    #[error("task {0} is not issued to {1}")]
    NotOwner(u64, String),
}

/// Snapshot of task counts. `queued` includes requeued tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounts {
    pub created: usize,
    pub queued: usize,
    pub issued: usize,
    pub done: usize,
    pub failed: usize,
    /// Tasks issued more than once.
    pub reissued: usize,
}

impl LedgerCounts {
    /// Every created task is in exactly one state.
    pub fn balanced(&self) -> bool {
        self.done + self.failed + self.queued + self.issued == self.created
    }
}

/// State machine over every task of a run.
///
/// Transitions: queued -> issued -> {done, failed, requeued}, requeued -> issued.
#[derive(Debug, Default)]
pub struct TaskLedger {
    entries: BTreeMap<u64, TaskLedgerEntry>,
    retry_queue: VecDeque<u64>,
    next_id: u64,
}

impl TaskLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, task_id: u64) -> Option<&TaskLedgerEntry> {
        self.entries.get(&task_id)
    }

    pub fn create(&mut self, assignment: Assignment, now: f64) -> u64 {
        self.next_id += 1;
        let task_id = self.next_id;
        self.entries.insert(
            task_id,
            TaskLedgerEntry {
                task_id,
                model_id: assignment.model_id.clone(),
                assignment,
                state: TaskState::Queued,
                issued_to: None,
                attempts: 0,
                created_at: now,
                updated_at: now,
            },
        );
        task_id
    }

    fn transition(&mut self, task_id: u64, to: TaskState, now: f64) -> Result<&mut TaskLedgerEntry, LedgerError> {
        let e = self.entries.get_mut(&task_id).ok_or(LedgerError::UnknownTask(task_id))?;
        let legal = matches!(
            (e.state, to),
            (TaskState::Queued, TaskState::Issued)
                | (TaskState::Requeued, TaskState::Issued)
                | (TaskState::Issued, TaskState::Done)
                | (TaskState::Issued, TaskState::Failed)
                | (TaskState::Issued, TaskState::Requeued)
        );
        if !legal {
            return Err(LedgerError::IllegalTransition { task_id, from: e.state, to });
        }
        e.state = to;
        e.updated_at = now;
        Ok(e)
    }

    pub fn issue(&mut self, task_id: u64, worker_id: &str, now: f64) -> Result<(), LedgerError> {
        let e = self.transition(task_id, TaskState::Issued, now)?;
        e.issued_to = Some(worker_id.to_string());
        e.attempts += 1;
        self.retry_queue.retain(|&t| t != task_id);
        Ok(())
    }

    /// Checks that `task_id` is currently issued to `worker_id`.
    pub fn check_owner(&self, task_id: u64, worker_id: &str) -> Result<&TaskLedgerEntry, LedgerError> {
        let e = self.entries.get(&task_id).ok_or(LedgerError::UnknownTask(task_id))?;
        if e.state != TaskState::Issued || e.issued_to.as_deref() != Some(worker_id) {
            return Err(LedgerError::NotOwner(task_id, worker_id.to_string()));
        }
        Ok(e)
    }

    pub fn complete(&mut self, task_id: u64, now: f64) -> Result<(), LedgerError> {
        self.transition(task_id, TaskState::Done, now).map(|_| ())
    }

    /// Records a failed attempt: requeues while attempts remain, else marks failed.
    pub fn fail_attempt(&mut self, task_id: u64, max_retries: u32, now: f64) -> Result<TaskState, LedgerError> {
        let attempts = self.entries.get(&task_id).ok_or(LedgerError::UnknownTask(task_id))?.attempts;
        let to = if attempts > max_retries { TaskState::Failed } else { TaskState::Requeued };
        let e = self.transition(task_id, to, now)?;
        e.issued_to = None;
        if to == TaskState::Requeued {
            self.retry_queue.push_back(task_id);
        }
        Ok(to)
    }

    /// Tasks currently issued to `worker_id`.
    pub fn issued_to(&self, worker_id: &str) -> Vec<u64> {
        self.entries
            .values()
            .filter(|e| e.state == TaskState::Issued && e.issued_to.as_deref() == Some(worker_id))
            .map(|e| e.task_id)
            .collect()
    }

    /// Oldest requeued task waiting for a worker.
    pub fn next_retry(&self) -> Option<u64> {
        self.retry_queue.front().copied()
    }

    pub fn counts(&self) -> LedgerCounts {
        let mut c = LedgerCounts { created: self.entries.len(), ..Default::default() };
        for e in self.entries.values() {
            c.reissued += usize::from(e.attempts > 1);
            match e.state {
                TaskState::Queued | TaskState::Requeued => c.queued += 1,
                TaskState::Issued => c.issued += 1,
                TaskState::Done => c.done += 1,
                TaskState::Failed => c.failed += 1,
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment() -> Assignment {
        Assignment { model_id: "m".into(), values: Default::default() }
    }

    #[test]
    fn lifecycle_and_retries() {
        let mut l = TaskLedger::new();
        let t = l.create(assignment(), 0.0);
        l.issue(t, "w1", 0.0).unwrap();
        assert_eq!(l.fail_attempt(t, 1, 1.0).unwrap(), TaskState::Requeued);
        assert_eq!(l.next_retry(), Some(t));
        l.issue(t, "w2", 2.0).unwrap();
        assert_eq!(l.next_retry(), None);
        assert!(l.check_owner(t, "w1").is_err());
        assert_eq!(l.fail_attempt(t, 1, 3.0).unwrap(), TaskState::Failed);
        assert!(matches!(l.issue(t, "w1", 4.0), Err(LedgerError::IllegalTransition { .. })));
        let c = l.counts();
        assert_eq!(c.failed, 1);
        assert_eq!(c.reissued, 1);
        assert!(c.balanced());
    }

    #[test]
    fn done_is_terminal() {
        let mut l = TaskLedger::new();
        let t = l.create(assignment(), 0.0);
        assert!(l.complete(t, 0.0).is_err());
        l.issue(t, "w", 0.0).unwrap();
        l.complete(t, 1.0).unwrap();
        assert!(l.complete(t, 1.0).is_err());
        assert!(l.fail_attempt(t, 3, 1.0).is_err());
        assert_eq!(l.counts().done, 1);
        assert_eq!(l.complete(99, 0.0), Err(LedgerError::UnknownTask(99)));
    }
}
