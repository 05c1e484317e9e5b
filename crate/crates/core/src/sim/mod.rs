//! Discrete-event simulation of a heterogeneous worker pool.
//!
//! Each virtual worker asks the production [`Scheduler`] for a task whenever
//! it goes idle. A task on class `c` takes `base_cost_s / speed_factor(c)`
//! virtual seconds, optionally scaled by lognormal jitter, and its synthetic
//! loss is fed back through `report_result`, so priorities are recomputed
//! exactly as in a live run. Runs are bit-for-bit reproducible from the seed.

mod scenario;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::heuristics::{encode_assignment, TrialRecord};
use crate::scheduler::{ClassDef, Mode, Scheduler, SchedulerError};
use crate::space::{load_spec, Domain, DomainKind, ModelSpace, SpecError};

pub use scenario::{load_scenario, LossModel, Scenario, SimClass, SimModel};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("spec: {0}")]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Mode,
    pub seed: u64,
    pub duration_s: f64,
    pub tasks_completed: usize,
    pub throughput_per_hour: f64,
    /// Completed busy time over available worker time, per class.
    pub per_class_utilization: BTreeMap<String, f64>,
    pub per_class_counts: BTreeMap<String, usize>,
    pub per_model_counts: BTreeMap<String, usize>,
    pub best_loss_per_model: BTreeMap<String, f64>,
    /// Priority of each model at the end of the run; `None` while unknown.
    pub final_priorities: BTreeMap<String, Option<f64>>,
    pub rebuilds: u64,
}

/// One completed task, for optional tracing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub worker_id: String,
    pub class_name: String,
    pub model_id: String,
    pub loss: f64,
}

struct VirtualWorker {
    id: String,
    class: usize,
}

struct InFlight {
    start: f64,
    trial: crate::space::Assignment,
    cost: f64,
}

fn model_spaces(scenario: &Scenario) -> Result<(Vec<ModelSpace>, Vec<f64>), SimError> {
    match &scenario.spec {
        None => {
            let spaces = scenario
                .models
                .iter()
                .map(|m| ModelSpace {
                    model_id: m.model_id.clone(),
                    domains: (0..m.dims)
                        .map(|i| {
                            Domain::new(format!("{}/x{i}", m.model_id), DomainKind::Uniform { lo: 0.0, hi: 1.0 })
                        })
                        .collect(),
                })
                .collect();
            Ok((spaces, scenario.models.iter().map(|m| m.complexity_hint).collect()))
        }
        Some(path) => {
            let mut forest: HashMap<String, ModelSpace> =
                load_spec(path)?.split().into_iter().map(|m| (m.model_id.clone(), m)).collect();
            if forest.len() != scenario.models.len() {
                return Err(SimError::InvalidScenario(format!(
                    "spec yields {} models but the scenario lists {}",
                    forest.len(),
                    scenario.models.len()
                )));
            }
            let mut spaces = Vec::new();
            let mut complexities = Vec::new();
            for m in &scenario.models {
                let space = forest.remove(&m.model_id).ok_or_else(|| {
                    SimError::InvalidScenario(format!("model {} is not in the spec forest", m.model_id))
                })?;
                complexities.push(crate::heuristics::model_complexity(&space).total);
                spaces.push(space);
            }
            Ok((spaces, complexities))
        }
    }
}

pub fn run_simulation(scenario: &Scenario) -> Result<SimReport, SimError> {
    run_simulation_traced(scenario, &mut |_| {})
}

/// Runs one simulation, passing every completed task to `trace`.
pub fn run_simulation_traced(
    scenario: &Scenario,
    trace: &mut dyn FnMut(&TraceEvent),
) -> Result<SimReport, SimError> {
    scenario.validate()?;
    let (spaces, complexities) = model_spaces(scenario)?;
    let class_defs: Vec<ClassDef> = scenario
        .classes
        .iter()
        .map(|c| ClassDef {
            name: c.name.clone(),
            performance_score: c.performance_score,
            matches: [("class".to_string(), c.name.clone())].into(),
        })
        .collect();

    let mut seeder = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut sched = Scheduler::with_complexities(
        spaces.clone(),
        complexities,
        class_defs,
        scenario.scheduler_config(),
        seeder.random(),
    )?;
    let mut dispatch_rng = ChaCha8Rng::seed_from_u64(seeder.random());
    let mut outcome_rng = ChaCha8Rng::seed_from_u64(seeder.random());
    let jitter = match scenario.jitter {
        Some(s) if s > 0.0 => Some(LogNormal::new(0.0, s).expect("validated sigma")),
        _ => None,
    };

    let by_id: HashMap<&str, (&SimModel, &ModelSpace)> = scenario
        .models
        .iter()
        .zip(&spaces)
        .map(|(m, s)| (m.model_id.as_str(), (m, s)))
        .collect();

    let mut workers = Vec::new();
    for (ci, c) in scenario.classes.iter().enumerate() {
        for i in 0..c.worker_count {
            let id = format!("{}-{i}", c.name);
            sched.register_worker(&id, [("class".to_string(), c.name.clone())].into(), 0.0);
            workers.push(VirtualWorker { id, class: ci });
        }
    }

    // (end time, worker index); ties resolve by worker index
    let mut queue: BinaryHeap<Reverse<(OrderedTime, usize)>> = BinaryHeap::new();
    let mut running: Vec<Option<InFlight>> = (0..workers.len()).map(|_| None).collect();
    let dispatch = |w: usize, now: f64, sched: &Scheduler, rng: &mut ChaCha8Rng, outcome_rng: &mut ChaCha8Rng| {
        let trial = sched.next_task(&workers[w].id, rng)?;
        let (model, _) = by_id[trial.model_id.as_str()];
        let mut cost = model.base_cost_s / scenario.classes[workers[w].class].speed_factor;
        if let Some(j) = &jitter {
            cost *= j.sample(outcome_rng);
        }
        Ok::<_, SimError>(InFlight { start: now, trial, cost })
    };
    for w in 0..workers.len() {
        let job = dispatch(w, 0.0, &sched, &mut dispatch_rng, &mut outcome_rng)?;
        queue.push(Reverse((OrderedTime(job.start + job.cost), w)));
        running[w] = Some(job);
    }

    let mut sequence = 0u64;
    let mut busy = vec![0.0; scenario.classes.len()];
    let mut per_class_counts: BTreeMap<String, usize> =
        scenario.classes.iter().map(|c| (c.name.clone(), 0)).collect();
    let mut per_model_counts: BTreeMap<String, usize> =
        scenario.models.iter().map(|m| (m.model_id.clone(), 0)).collect();
    let mut best: BTreeMap<String, f64> = BTreeMap::new();

    while let Some(Reverse((OrderedTime(now), w))) = queue.pop() {
        if now > scenario.duration_s {
            break;
        }
        let job = running[w].take().expect("queued worker is busy");
        let (model, space) = by_id[job.trial.model_id.as_str()];
        let x = encode_assignment(&job.trial, space).expect("sampled from the model space");
        let loss = model.loss_model.evaluate(&x, &mut outcome_rng);
        let class = &scenario.classes[workers[w].class];
        sequence += 1;
        let record = TrialRecord {
            model_id: model.model_id.clone(),
            assignment: job.trial,
            loss,
            duration_s: job.cost,
            worker_class: class.name.clone(),
            sequence,
            task_id: None,
        };
        sched.report_result(record, now)?;
        trace(&TraceEvent {
            start_s: job.start,
            end_s: now,
            worker_id: workers[w].id.clone(),
            class_name: class.name.clone(),
            model_id: model.model_id.clone(),
            loss,
        });
        busy[workers[w].class] += job.cost;
        *per_class_counts.get_mut(&class.name).expect("known class") += 1;
        *per_model_counts.get_mut(&model.model_id).expect("known model") += 1;
        let b = best.entry(model.model_id.clone()).or_insert(loss);
        *b = b.min(loss);
        let next = dispatch(w, now, &sched, &mut dispatch_rng, &mut outcome_rng)?;
        queue.push(Reverse((OrderedTime(next.start + next.cost), w)));
        running[w] = Some(next);
    }

    let tasks_completed: usize = per_model_counts.values().sum();
    let per_class_utilization = scenario
        .classes
        .iter()
        .zip(&busy)
        .map(|(c, b)| (c.name.clone(), (b / (c.worker_count as f64 * scenario.duration_s)).min(1.0)))
        .collect();
    Ok(SimReport {
        policy: scenario.policy,
        seed: scenario.seed,
        duration_s: scenario.duration_s,
        tasks_completed,
        throughput_per_hour: tasks_completed as f64 * 3600.0 / scenario.duration_s,
        per_class_utilization,
        per_class_counts,
        per_model_counts,
        best_loss_per_model: best,
        final_priorities: scenario
            .models
            .iter()
            .map(|m| (m.model_id.clone(), sched.priority_of(&m.model_id).flatten()))
            .collect(),
        rebuilds: sched.rebuilds(),
    })
}

/// Total order on finite event times.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedTime(f64);

impl Eq for OrderedTime {}

impl PartialOrd for OrderedTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub policy: Mode,
    pub seed: u64,
    pub tasks_completed: usize,
    pub throughput_per_hour: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

impl PolicyStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_dev = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            runs: n,
            mean,
            std_dev,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<SimRow>,
    pub stats: BTreeMap<String, PolicyStats>,
    /// Heuristic mean over fcfs mean, when both policies ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

/// Runs every policy on seeds `seed .. seed + n_seeds`.
pub fn compare_policies(scenario: &Scenario, policies: &[Mode], n_seeds: usize) -> Result<Comparison, SimError> {
    if n_seeds == 0 {
        return Err(SimError::InvalidScenario("n_seeds must be at least 1".into()));
    }
    if policies.is_empty() {
        return Err(SimError::InvalidScenario("at least one policy is required".into()));
    }
    let mut rows = Vec::new();
    let mut stats = BTreeMap::new();
    for &policy in policies {
        let mut samples = Vec::with_capacity(n_seeds);
        for k in 0..n_seeds as u64 {
            let run = Scenario { policy, seed: scenario.seed.wrapping_add(k), ..scenario.clone() };
            let r = run_simulation(&run)?;
            samples.push(r.throughput_per_hour);
            rows.push(SimRow {
                policy,
                seed: run.seed,
                tasks_completed: r.tasks_completed,
                throughput_per_hour: r.throughput_per_hour,
            });
        }
        stats.insert(policy.as_str().to_string(), PolicyStats::from_samples(&samples));
    }
    let ratio = match (stats.get(Mode::Heuristic.as_str()), stats.get(Mode::Fcfs.as_str())) {
        (Some(h), Some(f)) if f.mean > 0.0 => Some(h.mean / f.mean),
        _ => None,
    };
    Ok(Comparison { rows, stats, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::SchedulerConfig;

    fn scenario(classes: Vec<(f64, usize)>, costs: &[f64]) -> Scenario {
        Scenario {
            classes: classes
                .into_iter()
                .enumerate()
                .map(|(i, (speed, n))| SimClass {
                    name: format!("c{i}"),
                    performance_score: speed,
                    worker_count: n,
                    speed_factor: speed,
                })
                .collect(),
            models: costs
                .iter()
                .enumerate()
                .map(|(i, &c)| SimModel {
                    model_id: format!("m{i}"),
                    complexity_hint: c,
                    base_cost_s: c,
                    loss_model: LossModel::NoisyQuadratic { center: 0.5, scale: 1.0, noise: 0.0 },
                    dims: 2,
                })
                .collect(),
            duration_s: 3600.0,
            seed: 1,
            policy: Mode::Heuristic,
            epsilon: 0.1,
            jitter: None,
            scheduler: cheap_scheduler(),
            spec: None,
        }
    }

    fn cheap_scheduler() -> SchedulerConfig {
        let mut cfg = SchedulerConfig { rebuild_every: 200, ..SchedulerConfig::default() };
        cfg.priority.gp.max_points = 30;
        cfg.priority.repeats = 20;
        cfg
    }

    #[test]
    fn single_worker_arithmetic() {
        let r = run_simulation(&scenario(vec![(1.0, 1)], &[60.0])).unwrap();
        assert_eq!(r.tasks_completed, 60);
        assert_eq!(r.throughput_per_hour, 60.0);
        assert_eq!(r.per_class_utilization["c0"], 1.0);
    }

    #[test]
    fn one_model_is_policy_invariant() {
        let mut s = scenario(vec![(1.0, 2), (3.0, 1)], &[70.0]);
        let h = run_simulation(&s).unwrap();
        s.policy = Mode::Fcfs;
        let f = run_simulation(&s).unwrap();
        assert_eq!(h.tasks_completed, f.tasks_completed);
        for u in h.per_class_utilization.values() {
            assert!(*u > 1.0 - 70.0 / 3600.0 && *u <= 1.0);
        }
    }

    #[test]
    fn reports_are_reproducible_and_conserve_counts() {
        let mut s = scenario(vec![(1.0, 2), (2.0, 2)], &[40.0, 20.0, 10.0]);
        s.jitter = Some(0.1);
        let a = run_simulation(&s).unwrap();
        let b = run_simulation(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_model_counts.values().sum::<usize>(), a.tasks_completed);
        assert_eq!(a.per_class_counts.values().sum::<usize>(), a.tasks_completed);
        assert_eq!(a.throughput_per_hour, a.tasks_completed as f64 * 3600.0 / s.duration_s);
    }

    #[test]
    fn single_policy_comparison_has_no_ratio() {
        let s = scenario(vec![(1.0, 1)], &[60.0, 30.0]);
        let c = compare_policies(&s, &[Mode::Fcfs], 3).unwrap();
        assert_eq!(c.rows.len(), 3);
        assert_eq!(c.ratio, None);
        assert_eq!(c.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn sample_statistics() {
        let s = PolicyStats::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std_dev - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.min, s.max), (1.0, 4.0));
        assert_eq!(PolicyStats::from_samples(&[7.0]).std_dev, 0.0);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = scenario(vec![(1.0, 0)], &[60.0]);
        assert!(matches!(run_simulation(&s), Err(SimError::InvalidScenario(_))));
        s = scenario(vec![(1.0, 1)], &[60.0]);
        s.duration_s = 0.0;
        assert!(matches!(run_simulation(&s), Err(SimError::InvalidScenario(_))));
        s = scenario(vec![(1.0, 1)], &[-1.0]);
        assert!(matches!(run_simulation(&s), Err(SimError::InvalidScenario(_))));
    }
}
