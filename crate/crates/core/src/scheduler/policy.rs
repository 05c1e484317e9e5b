//! Ranking models and turning ranks into a schedule table.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ComputeClass, SchedulerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Heuristic,
    ComplexityOnly,
    PriorityOnly,
    Fcfs,
}

impl Mode {
    pub fn uses_priority(self) -> bool {
        matches!(self, Mode::Heuristic | Mode::PriorityOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Heuristic => "heuristic",
            Mode::ComplexityOnly => "complexity_only",
            Mode::PriorityOnly => "priority_only",
            Mode::Fcfs => "fcfs",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heuristic" => Ok(Mode::Heuristic),
            "complexity_only" => Ok(Mode::ComplexityOnly),
            "priority_only" => Ok(Mode::PriorityOnly),
            "fcfs" => Ok(Mode::Fcfs),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// Ranking state of one model. `priority: None` means not yet measurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub model_id: String,
    pub complexity: f64,
    pub priority: Option<f64>,
    pub trial_count: usize,
    #[serde(default)]
    pub rank_c: usize,
    #[serde(default)]
    pub rank_p: usize,
    #[serde(default)]
    pub combined_rank: usize,
    #[serde(default)]
    pub weight: f64,
}

impl ModelState {
    pub fn new(model_id: impl Into<String>, complexity: f64, priority: Option<f64>) -> Self {
        Self {
            model_id: model_id.into(),
            complexity,
            priority,
            trial_count: 0,
            rank_c: 0,
            rank_p: 0,
            combined_rank: 0,
            weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    pub mode: Mode,
    pub epsilon: f64,
    /// model -> class. Empty in fcfs mode.
    pub assignments: BTreeMap<String, String>,
    pub weights: BTreeMap<String, f64>,
    /// Models from best to worst rank.
    pub order: Vec<String>,
}

/// Dense ranks, 1 = best, by a descending key. Equal keys share a rank.
fn dense_rank<K: Copy>(keys: &[K], cmp: impl Fn(K, K) -> Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| cmp(keys[b], keys[a]));
    let mut ranks = vec![0; keys.len()];
    let mut rank = 0;
    for (pos, &i) in idx.iter().enumerate() {
        if pos == 0 || cmp(keys[idx[pos - 1]], keys[i]) != Ordering::Equal {
            rank += 1;
        }
        ranks[i] = rank;
    }
    ranks
}

/// Ranks models on both heuristics with equal weight.
pub fn rank_models(states: Vec<ModelState>) -> Result<Vec<ModelState>, SchedulerError> {
    rank_models_for(states, Mode::Heuristic)
}

/// Ranks models for `mode`.
///
/// `rank_c` orders by descending complexity, `rank_p` by descending priority
/// with unknown priorities sharing rank 1. In heuristic (and fcfs) mode the
/// combined rank is their sum; the single-heuristic modes use only the active
/// rank. Output is sorted by combined rank, ties by model id.
pub fn rank_models_for(
    mut states: Vec<ModelState>,
    mode: Mode,
) -> Result<Vec<ModelState>, SchedulerError> {
    if states.is_empty() {
        return Err(SchedulerError::NoModels);
    }
    if let Some(s) = states.iter().find(|s| !s.complexity.is_finite()) {
        return Err(SchedulerError::InvalidModel(format!(
            "{} has non-finite complexity",
            s.model_id
        )));
    }
    let complexities: Vec<f64> = states.iter().map(|s| s.complexity).collect();
    let rank_c = dense_rank(&complexities, |a: f64, b: f64| a.total_cmp(&b));
    let priorities: Vec<f64> =
        states.iter().map(|s| s.priority.unwrap_or(f64::INFINITY)).collect();
    let rank_p = dense_rank(&priorities, |a: f64, b: f64| a.total_cmp(&b));
    for (i, s) in states.iter_mut().enumerate() {
        s.rank_c = rank_c[i];
        s.rank_p = rank_p[i];
        s.combined_rank = match mode {
            Mode::ComplexityOnly => s.rank_c,
            Mode::PriorityOnly => s.rank_p,
            Mode::Heuristic | Mode::Fcfs => s.rank_c + s.rank_p,
        };
    }
    states.sort_by(|a, b| {
        a.combined_rank.cmp(&b.combined_rank).then_with(|| a.model_id.cmp(&b.model_id))
    });
    Ok(states)
}

/// Splits `items` into contiguous blocks proportional to `capacities`.
///
/// Largest-remainder rounding, remainder ties to the earlier block. When there
/// are at least as many items as blocks every block ends up non-empty;
/// otherwise the first `items` blocks get one item each.
pub fn block_sizes(items: usize, capacities: &[usize]) -> Vec<usize> {
    let total: usize = capacities.iter().sum();
    if total == 0 || capacities.is_empty() {
        return vec![0; capacities.len()];
    }
    if items < capacities.len() {
        // fewer models than classes: one each, best classes first
        return (0..capacities.len()).map(|j| usize::from(j < items)).collect();
    }
    let quotas: Vec<f64> =
        capacities.iter().map(|&c| items as f64 * c as f64 / total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = items - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..capacities.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[j] += 1;
        left -= 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let donor = (0..sizes.len())
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(a.cmp(&b)))
            .expect("non-empty");
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
    sizes
}

/// Converts a ranked model list into sampling weights and class assignments.
///
/// Position `i` (1-based) of `R` ranked models gets weight `R - i + 1`,
/// normalized. Classes with capacity are ordered by descending performance
/// and each receives a contiguous block of the ranking, best block to the
/// fastest class.
pub fn build_schedule(
    ranked: &[ModelState],
    classes: &[ComputeClass],
    mode: Mode,
    epsilon: f64,
) -> Result<ScheduleTable, SchedulerError> {
    if ranked.is_empty() {
        return Err(SchedulerError::NoModels);
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(SchedulerError::InvalidConfig(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let r = ranked.len();
    if mode == Mode::Fcfs {
        let w = 1.0 / r as f64;
        let mut order: Vec<String> = ranked.iter().map(|s| s.model_id.clone()).collect();
        order.sort();
        return Ok(ScheduleTable {
            mode,
            epsilon,
            assignments: BTreeMap::new(),
            weights: order.iter().map(|m| (m.clone(), w)).collect(),
            order,
        });
    }
    let mut table = weights_only(ranked, mode, epsilon);
    let mut active: Vec<&ComputeClass> = classes.iter().filter(|c| c.capacity > 0).collect();
    if active.is_empty() {
        return Err(SchedulerError::NoCapacity);
    }
    active.sort_by(|a, b| {
        b.performance_score.total_cmp(&a.performance_score).then_with(|| a.name.cmp(&b.name))
    });
    let caps: Vec<usize> = active.iter().map(|c| c.capacity).collect();
    let sizes = block_sizes(r, &caps);
    let mut models = ranked.iter();
    for (class, size) in active.iter().zip(sizes) {
        for m in models.by_ref().take(size) {
            table.assignments.insert(m.model_id.clone(), class.name.clone());
        }
    }
    Ok(table)
}

/// Rank-proportional weights without any class assignment.
pub fn weights_only(ranked: &[ModelState], mode: Mode, epsilon: f64) -> ScheduleTable {
    let r = ranked.len();
    let norm = (r * (r + 1) / 2) as f64;
    ScheduleTable {
        mode,
        epsilon,
        assignments: BTreeMap::new(),
        weights: ranked
            .iter()
            .enumerate()
            .map(|(i, s)| (s.model_id.clone(), (r - i) as f64 / norm))
            .collect(),
        order: ranked.iter().map(|s| s.model_id.clone()).collect(),
    }
}

fn weighted_pick<'a, R: Rng + ?Sized>(
    candidates: &[(&'a String, f64)],
    rng: &mut R,
) -> &'a str {
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (m, w) in candidates {
        if u < *w {
            return m;
        }
        u -= w;
    }
    candidates.last().expect("non-empty candidates").0
}

/// Picks the model a worker of `class_name` should evaluate next.
///
/// Heuristic modes pick by weight among the models assigned to the class,
/// except with probability `epsilon` (or when the class holds no models)
/// where the pick is over all models. Fcfs picks uniformly.
pub fn choose_model<'a, R: Rng + ?Sized>(
    table: &'a ScheduleTable,
    class_name: &str,
    rng: &mut R,
) -> &'a str {
    if table.mode == Mode::Fcfs {
        let i = rng.random_range(0..table.order.len());
        return &table.order[i];
    }
    let explore = rng.random::<f64>() < table.epsilon;
    let all: Vec<(&String, f64)> = table.weights.iter().map(|(m, w)| (m, *w)).collect();
    if !explore {
        let local: Vec<(&String, f64)> = all
            .iter()
            .filter(|(m, _)| table.assignments.get(*m).is_some_and(|c| c == class_name))
            .copied()
            .collect();
        if !local.is_empty() {
            return weighted_pick(&local, rng);
        }
    }
    weighted_pick(&all, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn class(name: &str, score: f64, capacity: usize) -> ComputeClass {
        ComputeClass { name: name.into(), features: BTreeMap::new(), performance_score: score, capacity }
    }

    fn states(cs: &[f64]) -> Vec<ModelState> {
        cs.iter().enumerate().map(|(i, &c)| ModelState::new(format!("m{}", i + 1), c, None)).collect()
    }

    #[test]
    fn unknown_priorities_collapse_to_complexity_order() {
        let ranked = rank_models(states(&[10.0, 5.0, 1.0])).unwrap();
        let combined: Vec<_> = ranked.iter().map(|s| s.combined_rank).collect();
        assert_eq!(combined, [2, 3, 4]);
        let ids: Vec<_> = ranked.iter().map(|s| s.model_id.as_str()).collect();
        assert_eq!(ids, ["m1", "m2", "m3"]);
    }

    #[test]
    fn symmetric_rank_sum_ties_break_by_id() {
        let mut s = states(&[5.0, 10.0]);
        s[0].priority = Some(3.0);
        s[1].priority = Some(0.1);
        let ranked = rank_models(s).unwrap();
        assert_eq!(ranked[0].combined_rank, 3);
        assert_eq!(ranked[1].combined_rank, 3);
        assert_eq!(ranked[0].model_id, "m1");
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(rank_models(vec![]), Err(SchedulerError::NoModels)));
    }

    #[test]
    fn two_classes_split_four_models() {
        let ranked = rank_models(states(&[4.0, 3.0, 2.0, 1.0])).unwrap();
        let t = build_schedule(&ranked, &[class("slow", 1.0, 1), class("fast", 2.0, 1)], Mode::Heuristic, 0.1)
            .unwrap();
        assert_eq!(t.assignments["m1"], "fast");
        assert_eq!(t.assignments["m2"], "fast");
        assert_eq!(t.assignments["m3"], "slow");
        assert_eq!(t.assignments["m4"], "slow");
        for (m, w) in [("m1", 0.4), ("m2", 0.3), ("m3", 0.2), ("m4", 0.1)] {
            assert!((t.weights[m] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_goes_to_top_class() {
        let ranked = rank_models(states(&[1.0])).unwrap();
        let t = build_schedule(&ranked, &[class("a", 1.0, 3), class("b", 5.0, 1)], Mode::Heuristic, 0.1)
            .unwrap();
        assert_eq!(t.assignments["m1"], "b");
        assert_eq!(t.weights["m1"], 1.0);
    }

    #[test]
    fn largest_remainder_blocks() {
        // oracle: quotas 4/3 each -> floors (1,1,1), one leftover to the first class
        assert_eq!(block_sizes(4, &[50, 50, 50]), vec![2, 1, 1]);
        assert_eq!(block_sizes(4, &[1, 1]), vec![2, 2]);
        assert_eq!(block_sizes(3, &[100, 1, 1]), vec![1, 1, 1]);
        assert_eq!(block_sizes(2, &[1, 1, 1]), vec![1, 1, 0]);
    }

    #[test]
    fn no_capacity_is_an_error_in_heuristic_mode() {
        let ranked = rank_models(states(&[1.0, 2.0])).unwrap();
        assert!(matches!(
            build_schedule(&ranked, &[class("a", 1.0, 0)], Mode::Heuristic, 0.1),
            Err(SchedulerError::NoCapacity)
        ));
        let t = build_schedule(&ranked, &[], Mode::Fcfs, 0.1).unwrap();
        assert!(t.assignments.is_empty());
        assert_eq!(t.weights.values().copied().collect::<Vec<_>>(), [0.5, 0.5]);
    }

    fn frequencies(t: &ScheduleTable, class: &str, draws: usize, seed: u64) -> BTreeMap<String, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(choose_model(t, class, &mut rng).to_string()).or_insert(0usize) += 1;
        }
        counts.into_iter().map(|(k, v)| (k, v as f64 / draws as f64)).collect()
    }

    #[test]
    fn fcfs_sampling_is_uniform() {
        let ranked = rank_models(states(&[4.0, 3.0, 2.0, 1.0])).unwrap();
        let t = build_schedule(&ranked, &[], Mode::Fcfs, 0.1).unwrap();
        for f in frequencies(&t, "any", 100_000, 1).values() {
            assert!((f - 0.25).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn class_local_sampling_follows_weights() {
        let ranked = rank_models(states(&[4.0, 3.0, 2.0, 1.0])).unwrap();
        let t = build_schedule(&ranked, &[class("fast", 2.0, 1), class("slow", 1.0, 1)], Mode::Heuristic, 0.0)
            .unwrap();
        let f = frequencies(&t, "fast", 100_000, 2);
        assert_eq!(f.len(), 2);
        let ratio = f["m1"] / f["m2"];
        assert!((ratio / (4.0 / 3.0) - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn full_exploration_ignores_classes() {
        let ranked = rank_models(states(&[4.0, 3.0, 2.0, 1.0])).unwrap();
        let t = build_schedule(&ranked, &[class("fast", 2.0, 1), class("slow", 1.0, 1)], Mode::Heuristic, 1.0)
            .unwrap();
        let f = frequencies(&t, "fast", 100_000, 4);
        for (m, w) in [("m1", 0.4), ("m2", 0.3), ("m3", 0.2), ("m4", 0.1)] {
            assert!((f[m] - w).abs() < 0.01, "{m}: {}", f[m]);
        }
    }

    #[test]
    fn unassigned_class_falls_back_to_global_weights() {
        let ranked = rank_models(states(&[4.0, 3.0, 2.0, 1.0])).unwrap();
        let t = build_schedule(&ranked, &[class("fast", 2.0, 1)], Mode::Heuristic, 0.0).unwrap();
        let f = frequencies(&t, "unknown", 100_000, 3);
        for (m, w) in [("m1", 0.4), ("m2", 0.3), ("m3", 0.2), ("m4", 0.1)] {
            assert!((f[m] - w).abs() < 0.01, "{m}: {}", f[m]);
        }
    }
}
