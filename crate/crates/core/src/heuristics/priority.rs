use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gp::{fit_length_scale, GpError, GpFitConfig};
use crate::space::{Assignment, DomainKind, ModelSpace, Value};

/// One evaluated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub model_id: String,
    pub assignment: Assignment,
    pub loss: f64,
    pub duration_s: f64,
    pub worker_class: String,
    pub sequence: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeuristicError {
    #[error("value for {0} is missing or outside its domain")]
    OutOfDomain(String),
    #[error("trial belongs to model {found}, expected {expected}")]
    WrongModel { expected: String, found: String },
    #[error("only {0} length-scale fits succeeded")]
    TooFewFits(usize),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorityConfig {
    pub gp: GpFitConfig,
    /// Number of independent length-scale fits collected per priority.
    pub repeats: usize,
    /// Models with fewer trials have an unknown priority.
    pub min_trials: usize,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self { gp: GpFitConfig::default(), repeats: 50, min_trials: 10 }
    }
}

/// Maps an assignment onto `[0, 1]^d`, one coordinate per domain in model order.
pub fn encode_assignment(
    assignment: &Assignment,
    model: &ModelSpace,
) -> Result<Vec<f64>, HeuristicError> {
    model
        .domains
        .iter()
        .map(|d| {
            let v = assignment
                .values
                .get(&d.id)
                .filter(|v| d.contains(v))
                .ok_or_else(|| HeuristicError::OutOfDomain(d.id.clone()))?;
            let x = match &d.kind {
                DomainKind::Uniform { .. } | DomainKind::Normal { .. } => {
                    let (a, b) = d.interval_99().expect("continuous");
                    (v.as_f64().unwrap() - a) / (b - a)
                }
                DomainKind::LogUniform { .. } => {
                    let (a, b) = d.interval_99().expect("continuous");
                    (v.as_f64().unwrap().ln() - a.ln()) / (b.ln() - a.ln())
                }
                DomainKind::RandInt { lo, hi } => match v {
                    _ if hi == lo => 0.5,
                    Value::Int(i) => (i - lo) as f64 / (hi - lo) as f64,
                    _ => unreachable!("membership checked"),
                },
                DomainKind::Choice { values } => {
                    if values.len() == 1 {
                        0.5
                    } else {
                        let idx = values.iter().position(|c| c == v).expect("membership checked");
                        idx as f64 / (values.len() - 1) as f64
                    }
                }
            };
            Ok(x.clamp(0.0, 1.0))
        })
        .collect()
}

/// `min(L)^-1 - max(L)^-1` over a sample of positive length scales.
pub fn length_scale_priority(scales: &[f64]) -> f64 {
    let (lo, hi) = scales
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    if scales.is_empty() {
        return 0.0;
    }
    1.0 / lo - 1.0 / hi
}

/// Collects `cfg.repeats` length scales from bootstrap resamples of the trials.
///
/// Each fit uses its own seed drawn up front from `rng`, so the result does
/// not depend on the order fits are evaluated in. Returns `Ok(None)` when the
/// losses have zero variance.
pub fn sample_length_scales<R: Rng + ?Sized>(
    trials: &[TrialRecord],
    model: &ModelSpace,
    cfg: &PriorityConfig,
    rng: &mut R,
) -> Result<Option<Vec<f64>>, HeuristicError> {
    let mut rows = Vec::with_capacity(trials.len());
    for t in trials {
        if t.model_id != model.model_id {
            return Err(HeuristicError::WrongModel {
                expected: model.model_id.clone(),
                found: t.model_id.clone(),
            });
        }
        rows.push(encode_assignment(&t.assignment, model)?);
    }
    let n = trials.len() as f64;
    let mean = trials.iter().map(|t| t.loss).sum::<f64>() / n;
    let var = trials.iter().map(|t| (t.loss - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Ok(None);
    }
    let sd = var.sqrt();
    let losses: Vec<f64> = trials.iter().map(|t| (t.loss - mean) / sd).collect();

    let (l_min, l_max) = cfg.gp.l_bounds;
    let seeds: Vec<u64> = (0..cfg.repeats).map(|_| rng.random()).collect();
    let take = trials.len().min(cfg.gp.max_points);
    let mut scales = Vec::with_capacity(cfg.repeats);
    let mut last_err = None;
    for seed in seeds {
        let mut fit_rng = ChaCha8Rng::seed_from_u64(seed);
        let init = fit_rng.random_range(l_min.ln()..=l_max.ln()).exp().clamp(l_min, l_max);
        let picks: Vec<usize> = (0..take).map(|_| fit_rng.random_range(0..trials.len())).collect();
        let x: Vec<Vec<f64>> = picks.iter().map(|&i| rows[i].clone()).collect();
        let y: Vec<f64> = picks.iter().map(|&i| losses[i]).collect();
        match fit_length_scale(&x, &y, init, &cfg.gp) {
            Ok(l) => scales.push(l),
            Err(e) => last_err = Some(e),
        }
    }
    if scales.is_empty() {
        return Err(last_err.map(HeuristicError::Gp).unwrap_or(HeuristicError::TooFewFits(0)));
    }
    if scales.len() < cfg.min_trials.min(cfg.repeats).max(1) {
        return Err(HeuristicError::TooFewFits(scales.len()));
    }
    Ok(Some(scales))
}

/// Priority of a model given its trials, or `None` while there are too few trials.
pub fn priority<R: Rng + ?Sized>(
    trials: &[TrialRecord],
    model: &ModelSpace,
    cfg: &PriorityConfig,
    rng: &mut R,
) -> Result<Option<f64>, HeuristicError> {
    if trials.len() < cfg.min_trials {
        return Ok(None);
    }
    Ok(Some(match sample_length_scales(trials, model, cfg, rng)? {
        Some(scales) => length_scale_priority(&scales),
        None => 0.0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Domain;
    use std::collections::BTreeMap;

    fn assignment(model: &str, pairs: &[(&str, Value)]) -> Assignment {
        Assignment {
            model_id: model.into(),
            values: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
        }
    }

    fn single(kind: DomainKind) -> ModelSpace {
        ModelSpace { model_id: "m".into(), domains: vec![Domain::new("x", kind)] }
    }

    #[test]
    fn encode_examples() {
        let m = single(DomainKind::Uniform { lo: 0.0, hi: 15.0 });
        // midpoint of the 99% interval (0.075, 14.925)
        let a = assignment("m", &[("x", Value::Real(7.5))]);
        assert!((encode_assignment(&a, &m).unwrap()[0] - 0.5).abs() < 1e-12);
        let a = assignment("m", &[("x", Value::Real(7.4625))]);
        assert!((encode_assignment(&a, &m).unwrap()[0] - 7.3875 / 14.85).abs() < 1e-12);

        let abc = ["a", "b", "c"].iter().map(|s| Value::Text(s.to_string())).collect();
        let m = single(DomainKind::Choice { values: abc });
        let a = assignment("m", &[("x", Value::Text("c".into()))]);
        assert_eq!(encode_assignment(&a, &m).unwrap(), vec![1.0]);

        let m = single(DomainKind::LogUniform { lo: 1e-4, hi: 1.0 });
        let a = assignment("m", &[("x", Value::Real(1e-2))]);
        assert!((encode_assignment(&a, &m).unwrap()[0] - 0.5).abs() < 1e-12);

        let m = single(DomainKind::RandInt { lo: 3, hi: 3 });
        let a = assignment("m", &[("x", Value::Int(3))]);
        assert_eq!(encode_assignment(&a, &m).unwrap(), vec![0.5]);

        let m = single(DomainKind::Uniform { lo: 0.0, hi: 1.0 });
        let a = assignment("m", &[("x", Value::Real(1.0))]);
        assert_eq!(encode_assignment(&a, &m).unwrap(), vec![1.0]);
    }

    #[test]
    fn encode_rejects_out_of_domain() {
        let m = single(DomainKind::Uniform { lo: 0.0, hi: 1.0 });
        let a = assignment("m", &[("x", Value::Real(3.0))]);
        assert_eq!(encode_assignment(&a, &m), Err(HeuristicError::OutOfDomain("x".into())));
    }

    #[test]
    fn priority_formula() {
        assert_eq!(length_scale_priority(&[0.5, 2.0, 1.0]), 1.5);
        assert_eq!(length_scale_priority(&[0.7; 50]), 0.0);
    }

    #[test]
    fn few_trials_have_unknown_priority() {
        let m = single(DomainKind::Uniform { lo: 0.0, hi: 1.0 });
        let trials: Vec<TrialRecord> = (0..9)
            .map(|i| TrialRecord {
                model_id: "m".into(),
                assignment: assignment("m", &[("x", Value::Real(i as f64 / 9.0))]),
                loss: i as f64,
                duration_s: 0.0,
                worker_class: "c".into(),
                sequence: i,
                task_id: None,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(priority(&trials, &m, &PriorityConfig::default(), &mut rng), Ok(None));
    }
}
