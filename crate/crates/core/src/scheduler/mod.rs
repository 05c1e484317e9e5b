//! Compute classes, model ranking and trial dispatch.
//!
//! [`Scheduler`] is the single owner of all scheduling state. It keeps the
//! trial ledger per model, recomputes priorities every `rebuild_every`
//! results (or `rebuild_interval_s` seconds), and publishes a fresh
//! [`ScheduleTable`] behind an `Arc` so readers always see a complete table.

mod policy;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::heuristics::{model_complexity, priority, PriorityConfig, TrialRecord};
use crate::space::{Assignment, ModelSpace};

pub use policy::{
    block_sizes, build_schedule, choose_model, rank_models, rank_models_for, weights_only, Mode,
    ModelState, ScheduleTable,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("no models to schedule")]
    NoModels,
    #[error("no compute class has connected workers")]
    NoCapacity,
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("unknown worker {0:?}")]
    UnknownWorker(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid trial: {0}")]
    InvalidTrial(String),
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
}

/// A group of workers sharing hardware features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeClass {
    pub name: String,
    #[serde(default)]
    pub features: BTreeMap<String, String>,
    pub performance_score: f64,
    #[serde(default)]
    pub capacity: usize,
}

/// Declared class: workers whose features contain every `match` pair belong to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub performance_score: f64,
    #[serde(default, rename = "match")]
    pub matches: BTreeMap<String, String>,
}

impl ClassDef {
    pub fn accepts(&self, features: &BTreeMap<String, String>) -> bool {
        self.matches.iter().all(|(k, v)| features.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub worker_id: String,
    pub class_name: String,
    pub features: BTreeMap<String, String>,
    pub last_heartbeat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub mode: Mode,
    pub epsilon: f64,
    pub rebuild_every: usize,
    pub rebuild_interval_s: f64,
    pub heartbeat_timeout_s: f64,
    pub priority: PriorityConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Heuristic,
            epsilon: 0.1,
            rebuild_every: 25,
            rebuild_interval_s: 300.0,
            heartbeat_timeout_s: 60.0,
            priority: PriorityConfig::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(SchedulerError::InvalidConfig(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.rebuild_every == 0 || !(self.rebuild_interval_s > 0.0) {
            return Err(SchedulerError::InvalidConfig("rebuild cadence must be positive".into()));
        }
        if !(self.heartbeat_timeout_s > 0.0) {
            return Err(SchedulerError::InvalidConfig("heartbeat timeout must be positive".into()));
        }
        self.priority.gp.validate().map_err(|e| SchedulerError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug)]
struct ModelEntry {
    space: ModelSpace,
    complexity: f64,
    priority: Option<f64>,
    stale: bool,
    trials: Vec<TrialRecord>,
    last_sequence: Option<u64>,
}

#[derive(Debug)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    models: Vec<ModelEntry>,
    index: HashMap<String, usize>,
    class_defs: Vec<ClassDef>,
    classes: BTreeMap<String, ComputeClass>,
    workers: BTreeMap<String, WorkerInfo>,
    table: Arc<ScheduleTable>,
    states: Vec<ModelState>,
    generation: u64,
    rebuilds: u64,
    since_rebuild: usize,
    last_rebuild_at: f64,
    heuristic_rng: ChaCha8Rng,
}

impl Scheduler {
    /// Scheduler over a split forest, scoring each model by search complexity.
    pub fn new(
        models: Vec<ModelSpace>,
        class_defs: Vec<ClassDef>,
        cfg: SchedulerConfig,
        seed: u64,
    ) -> Result<Self, SchedulerError> {
        let complexities = models.iter().map(|m| model_complexity(m).total).collect();
        Self::with_complexities(models, complexities, class_defs, cfg, seed)
    }

    /// Scheduler with externally supplied complexity values.
    pub fn with_complexities(
        models: Vec<ModelSpace>,
        complexities: Vec<f64>,
        class_defs: Vec<ClassDef>,
        cfg: SchedulerConfig,
        seed: u64,
    ) -> Result<Self, SchedulerError> {
        cfg.validate()?;
        if models.is_empty() {
            return Err(SchedulerError::NoModels);
        }
        if complexities.len() != models.len() {
            return Err(SchedulerError::InvalidModel("one complexity per model required".into()));
        }
        let mut index = HashMap::new();
        for (i, m) in models.iter().enumerate() {
            if index.insert(m.model_id.clone(), i).is_some() {
                return Err(SchedulerError::InvalidModel(format!("duplicate id {}", m.model_id)));
            }
        }
        let mut classes = BTreeMap::new();
        for def in &class_defs {
            if !(def.performance_score > 0.0) {
                return Err(SchedulerError::InvalidConfig(format!(
                    "class {} needs a positive performance_score",
                    def.name
                )));
            }
            let class = ComputeClass {
                name: def.name.clone(),
                features: def.matches.clone(),
                performance_score: def.performance_score,
                capacity: 0,
            };
            if classes.insert(def.name.clone(), class).is_some() {
                return Err(SchedulerError::InvalidConfig(format!("duplicate class {}", def.name)));
            }
        }
        let entries = models
            .into_iter()
            .zip(complexities)
            .map(|(space, complexity)| ModelEntry {
                space,
                complexity,
                priority: None,
                stale: false,
                trials: Vec::new(),
                last_sequence: None,
            })
            .collect();
        let placeholder = ScheduleTable {
            mode: cfg.mode,
            epsilon: cfg.epsilon,
            assignments: BTreeMap::new(),
            weights: BTreeMap::new(),
            order: Vec::new(),
        };
        let mut s = Self {
            cfg,
            models: entries,
            index,
            class_defs,
            classes,
            workers: BTreeMap::new(),
            table: Arc::new(placeholder),
            states: Vec::new(),
            generation: 0,
            rebuilds: 0,
            since_rebuild: 0,
            last_rebuild_at: 0.0,
            heuristic_rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.publish()?;
        Ok(s)
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn table(&self) -> Arc<ScheduleTable> {
        Arc::clone(&self.table)
    }

    /// Number of tables published so far (rebuilds plus capacity changes).
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of result-triggered rebuilds (priority recomputations).
    pub fn rebuilds(&self) -> u64 {
        self.rebuilds
    }

    /// Ranked model states behind the current table.
    pub fn states(&self) -> &[ModelState] {
        &self.states
    }

    pub fn classes(&self) -> Vec<ComputeClass> {
        self.classes.values().cloned().collect()
    }

    pub fn class(&self, name: &str) -> Option<&ComputeClass> {
        self.classes.get(name)
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerInfo> {
        self.workers.get(worker_id)
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelSpace> {
        self.models.iter().map(|m| &m.space)
    }

    pub fn model(&self, model_id: &str) -> Option<&ModelSpace> {
        self.index.get(model_id).map(|&i| &self.models[i].space)
    }

    pub fn trials(&self, model_id: &str) -> Option<&[TrialRecord]> {
        self.index.get(model_id).map(|&i| self.models[i].trials.as_slice())
    }

    pub fn priority_of(&self, model_id: &str) -> Option<Option<f64>> {
        self.index.get(model_id).map(|&i| self.models[i].priority)
    }

    /// Class a worker with `features` belongs to: the first declared class
    /// whose predicates match, else an auto-created class for that feature set.
    pub fn resolve_class(&mut self, features: &BTreeMap<String, String>) -> String {
        if let Some(def) = self.class_defs.iter().find(|d| d.accepts(features)) {
            return def.name.clone();
        }
        let name = if features.is_empty() {
            "auto".to_string()
        } else {
            let parts: Vec<String> = features.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("auto:{}", parts.join(","))
        };
        if !self.classes.contains_key(&name) {
            // unmatched hardware ranks below every declared class
            let floor = self
                .classes
                .values()
                .map(|c| c.performance_score)
                .fold(f64::INFINITY, f64::min);
            let score = if floor.is_finite() { floor * 0.5 } else { 1.0 };
            self.classes.insert(
                name.clone(),
                ComputeClass {
                    name: name.clone(),
                    features: features.clone(),
                    performance_score: score,
                    capacity: 0,
                },
            );
        }
        name
    }

    /// Registers (or re-registers) a worker. Returns its class name.
    pub fn register_worker(
        &mut self,
        worker_id: &str,
        features: BTreeMap<String, String>,
        now: f64,
    ) -> String {
        let class_name = self.resolve_class(&features);
        if let Some(old) = self.workers.remove(worker_id) {
            if let Some(c) = self.classes.get_mut(&old.class_name) {
                c.capacity -= 1;
            }
        }
        self.classes.get_mut(&class_name).expect("class resolved").capacity += 1;
        self.workers.insert(
            worker_id.to_string(),
            WorkerInfo {
                worker_id: worker_id.to_string(),
                class_name: class_name.clone(),
                features,
                last_heartbeat: now,
            },
        );
        self.republish();
        class_name
    }

    pub fn heartbeat(&mut self, worker_id: &str, now: f64) -> Result<(), SchedulerError> {
        let w = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.to_string()))?;
        w.last_heartbeat = w.last_heartbeat.max(now);
        Ok(())
    }

    pub fn remove_worker(&mut self, worker_id: &str) -> Option<WorkerInfo> {
        let w = self.workers.remove(worker_id)?;
        if let Some(c) = self.classes.get_mut(&w.class_name) {
            c.capacity -= 1;
        }
        self.republish();
        Some(w)
    }

    /// Drops workers silent for longer than the heartbeat timeout and returns their ids.
    pub fn expire_workers(&mut self, now: f64) -> Vec<String> {
        let timeout = self.cfg.heartbeat_timeout_s;
        let expired: Vec<String> = self
            .workers
            .values()
            .filter(|w| now - w.last_heartbeat > timeout)
            .map(|w| w.worker_id.clone())
            .collect();
        for id in &expired {
            self.remove_worker(id);
        }
        expired
    }

    /// Chooses a model for `worker_id` and samples a fresh assignment for it.
    pub fn next_task<R: Rng + ?Sized>(
        &self,
        worker_id: &str,
        rng: &mut R,
    ) -> Result<Assignment, SchedulerError> {
        let worker = self
            .workers
            .get(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.to_string()))?;
        let model_id = choose_model(&self.table, &worker.class_name, rng);
        let entry = &self.models[self.index[model_id]];
        Ok(entry.space.sample(rng))
    }

    /// Records a finished trial. Returns `true` when it triggered a rebuild.
    pub fn report_result(&mut self, trial: TrialRecord, now: f64) -> Result<bool, SchedulerError> {
        let &i = self
            .index
            .get(&trial.model_id)
            .ok_or_else(|| SchedulerError::UnknownModel(trial.model_id.clone()))?;
        if !trial.loss.is_finite() {
            return Err(SchedulerError::InvalidTrial("loss must be finite".into()));
        }
        let entry = &mut self.models[i];
        if entry.last_sequence.is_some_and(|s| trial.sequence <= s) {
            return Err(SchedulerError::InvalidTrial(format!(
                "sequence {} not increasing for {}",
                trial.sequence, trial.model_id
            )));
        }
        entry
            .space
            .check_values(&trial.assignment.values)
            .map_err(SchedulerError::InvalidTrial)?;
        entry.last_sequence = Some(trial.sequence);
        entry.trials.push(trial);
        entry.stale = true;
        self.since_rebuild += 1;
        Ok(self.maybe_rebuild(now))
    }

    /// Rebuilds when the result count or the time since the last rebuild is due.
    pub fn maybe_rebuild(&mut self, now: f64) -> bool {
        let due_count = self.since_rebuild >= self.cfg.rebuild_every;
        let due_time =
            self.since_rebuild > 0 && now - self.last_rebuild_at >= self.cfg.rebuild_interval_s;
        if due_count || due_time {
            self.rebuild(now);
            true
        } else {
            false
        }
    }

    /// Recomputes stale priorities, re-ranks and publishes a new table.
    pub fn rebuild(&mut self, now: f64) {
        if self.cfg.mode.uses_priority() {
            let pcfg = self.cfg.priority.clone();
            for entry in self.models.iter_mut().filter(|e| e.stale) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.heuristic_rng.random());
                entry.priority = match priority(&entry.trials, &entry.space, &pcfg, &mut rng) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("priority for {} unavailable: {e}", entry.space.model_id);
                        None
                    }
                };
                entry.stale = false;
            }
        }
        self.rebuilds += 1;
        self.since_rebuild = 0;
        self.last_rebuild_at = now;
        self.republish();
    }

    fn republish(&mut self) {
        if let Err(e) = self.publish() {
            log::warn!("schedule not rebuilt: {e}");
        }
    }

    fn publish(&mut self) -> Result<(), SchedulerError> {
        let inputs: Vec<ModelState> = self
            .models
            .iter()
            .map(|e| {
                let mut s = ModelState::new(e.space.model_id.clone(), e.complexity, e.priority);
                s.trial_count = e.trials.len();
                s
            })
            .collect();
        let mut ranked = rank_models_for(inputs, self.cfg.mode)?;
        let classes: Vec<ComputeClass> = self.classes.values().cloned().collect();
        let table = match build_schedule(&ranked, &classes, self.cfg.mode, self.cfg.epsilon) {
            Ok(t) => t,
            // nobody connected yet: rank-weighted sampling without class blocks
            Err(SchedulerError::NoCapacity) => weights_only(&ranked, self.cfg.mode, self.cfg.epsilon),
            Err(e) => return Err(e),
        };
        for s in &mut ranked {
            s.weight = table.weights[&s.model_id];
        }
        self.states = ranked;
        self.table = Arc::new(table);
        self.generation += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Domain, DomainKind, Value};

    fn forest(n: usize) -> Vec<ModelSpace> {
        (0..n)
            .map(|i| ModelSpace {
                model_id: format!("m{i}"),
                domains: (0..=i)
                    .map(|j| Domain::new(format!("m{i}/x{j}"), DomainKind::Uniform { lo: 0.0, hi: 1.0 }))
                    .collect(),
            })
            .collect()
    }

    fn defs() -> Vec<ClassDef> {
        vec![
            ClassDef {
                name: "fast".into(),
                performance_score: 2.0,
                matches: [("tier".to_string(), "fast".to_string())].into(),
            },
            ClassDef {
                name: "slow".into(),
                performance_score: 1.0,
                matches: [("tier".to_string(), "slow".to_string())].into(),
            },
        ]
    }

    fn features(tier: &str) -> BTreeMap<String, String> {
        [("tier".to_string(), tier.to_string())].into()
    }

    fn trial(s: &Scheduler, model: &str, seq: u64, rng: &mut ChaCha8Rng) -> TrialRecord {
        let a = s.model(model).unwrap().sample(rng);
        TrialRecord {
            model_id: model.into(),
            loss: a.values.values().filter_map(Value::as_f64).sum(),
            assignment: a,
            duration_s: 1.0,
            worker_class: "fast".into(),
            sequence: seq,
            task_id: None,
        }
    }

    #[test]
    fn registration_counts_capacity() {
        let mut s = Scheduler::new(forest(2), defs(), SchedulerConfig::default(), 0).unwrap();
        for w in ["a", "b", "c"] {
            assert_eq!(s.register_worker(w, features("fast"), 0.0), "fast");
        }
        assert_eq!(s.class("fast").unwrap().capacity, 3);
        s.register_worker("b", features("fast"), 1.0);
        assert_eq!(s.class("fast").unwrap().capacity, 3);
        s.register_worker("b", features("slow"), 1.0);
        assert_eq!(s.class("fast").unwrap().capacity, 2);
        assert_eq!(s.class("slow").unwrap().capacity, 1);
    }

    #[test]
    fn silent_workers_expire() {
        let mut s = Scheduler::new(forest(2), defs(), SchedulerConfig::default(), 0).unwrap();
        s.register_worker("a", features("fast"), 0.0);
        s.register_worker("b", features("fast"), 0.0);
        s.heartbeat("b", 50.0).unwrap();
        assert!(s.expire_workers(60.0).is_empty());
        assert_eq!(s.expire_workers(61.0), vec!["a".to_string()]);
        assert_eq!(s.class("fast").unwrap().capacity, 1);
    }

    #[test]
    fn unmatched_features_create_a_low_ranked_class() {
        let mut s = Scheduler::new(forest(2), defs(), SchedulerConfig::default(), 0).unwrap();
        let c = s.register_worker("w", features("gpu"), 0.0);
        assert_eq!(c, "auto:tier=gpu");
        assert_eq!(s.class(&c).unwrap().performance_score, 0.5);
    }

    #[test]
    fn rebuild_every_25_results() {
        let mut s = Scheduler::new(forest(2), defs(), SchedulerConfig::default(), 0).unwrap();
        s.register_worker("a", features("fast"), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(!s.report_result(trial(&s, "m0", 0, &mut rng), 0.0).unwrap());
        assert_eq!(s.trials("m0").unwrap().len(), 1);
        assert_eq!(s.priority_of("m0"), Some(None));
        for seq in 1..24 {
            assert!(!s.report_result(trial(&s, "m0", seq, &mut rng), 0.0).unwrap());
        }
        assert_eq!(s.rebuilds(), 0);
        assert!(s.report_result(trial(&s, "m1", 24, &mut rng), 0.0).unwrap());
        assert_eq!(s.rebuilds(), 1);
        let t = s.table();
        assert!((t.weights.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(t.assignments.len(), 2);
        assert!(s.priority_of("m0").unwrap().is_some());
    }

    #[test]
    fn time_triggers_rebuild() {
        let mut s = Scheduler::new(forest(1), defs(), SchedulerConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!s.report_result(trial(&s, "m0", 0, &mut rng), 10.0).unwrap());
        assert!(s.maybe_rebuild(300.0));
        assert!(!s.maybe_rebuild(900.0));
    }

    #[test]
    fn report_result_validation() {
        let mut s = Scheduler::new(forest(1), defs(), SchedulerConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = trial(&s, "m0", 3, &mut rng);
        t.model_id = "nope".into();
        assert_eq!(s.report_result(t, 0.0), Err(SchedulerError::UnknownModel("nope".into())));
        s.report_result(trial(&s, "m0", 3, &mut rng), 0.0).unwrap();
        assert!(matches!(
            s.report_result(trial(&s, "m0", 3, &mut rng), 0.0),
            Err(SchedulerError::InvalidTrial(_))
        ));
    }

    #[test]
    fn next_task_needs_a_registered_worker() {
        let mut s = Scheduler::new(forest(3), defs(), SchedulerConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(s.next_task("ghost", &mut rng), Err(SchedulerError::UnknownWorker(_))));
        s.register_worker("w", features("slow"), 0.0);
        let a = s.next_task("w", &mut rng).unwrap();
        s.model(&a.model_id).unwrap().check_values(&a.values).unwrap();
    }
}
