use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::scheduler::{Mode, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimClass {
    pub name: String,
    pub performance_score: f64,
    pub worker_count: usize,
    pub speed_factor: f64,
}

/// Synthetic loss over the encoded assignment `x` in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossModel {
    Constant {
        #[serde(default)]
        value: f64,
    },
    /// `scale * sum (x_i - center)^2 + noise * N(0, 1)`
    NoisyQuadratic {
        #[serde(default = "half")]
        center: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        noise: f64,
    },
    /// `amplitude * sum sin(2 pi frequency x_i) + noise * N(0, 1)`
    Sinusoidal {
        #[serde(default = "three")]
        frequency: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        noise: f64,
    },
}

fn half() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}
fn two() -> usize {
    2
}

impl LossModel {
    pub fn evaluate<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        let mut noise = |sigma: f64| {
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            } else {
                0.0
            }
        };
        match *self {
            LossModel::Constant { value } => value,
            LossModel::NoisyQuadratic { center, scale, noise: s } => {
                scale * x.iter().map(|v| (v - center).powi(2)).sum::<f64>() + noise(s)
            }
            LossModel::Sinusoidal { frequency, amplitude, noise: s } => {
                let tau = 2.0 * std::f64::consts::PI;
                amplitude * x.iter().map(|v| (tau * frequency * v).sin()).sum::<f64>() + noise(s)
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        let finite = match *self {
            LossModel::Constant { value } => value.is_finite(),
            LossModel::NoisyQuadratic { center, scale, noise } => {
                center.is_finite() && scale.is_finite() && noise.is_finite() && noise >= 0.0
            }
            LossModel::Sinusoidal { frequency, amplitude, noise } => {
                frequency.is_finite() && amplitude.is_finite() && noise.is_finite() && noise >= 0.0
            }
        };
        if finite {
            Ok(())
        } else {
            Err("loss model parameters must be finite, noise non-negative".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimModel {
    pub model_id: String,
    pub complexity_hint: f64,
    pub base_cost_s: f64,
    pub loss_model: LossModel,
    /// Number of `uniform[0, 1]` hyperparameters when no spec file is given.
    #[serde(default = "two")]
    pub dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub classes: Vec<SimClass>,
    pub models: Vec<SimModel>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "heuristic")]
    pub policy: Mode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Log-space sigma of the multiplicative service-time jitter; absent means none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    /// Scheduler tunables; `mode` and `epsilon` are taken from the scenario.
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Spec file whose split forest supplies the model spaces and complexities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
}

fn heuristic() -> Mode {
    Mode::Heuristic
}
fn default_epsilon() -> f64 {
    0.1
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.classes {
            if !names.insert(&c.name) {
                return bad(format!("duplicate class {}", c.name));
            }
            if c.worker_count == 0 {
                return bad(format!("class {} needs worker_count >= 1", c.name));
            }
            if !(c.speed_factor > 0.0) || !c.speed_factor.is_finite() {
                return bad(format!("class {} needs a positive speed_factor", c.name));
            }
            if !(c.performance_score > 0.0) || !c.performance_score.is_finite() {
                return bad(format!("class {} needs a positive performance_score", c.name));
            }
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        let mut ids = BTreeSet::new();
        for m in &self.models {
            if !ids.insert(&m.model_id) {
                return bad(format!("duplicate model {}", m.model_id));
            }
            if !(m.base_cost_s > 0.0) || !m.base_cost_s.is_finite() {
                return bad(format!("model {} needs a positive base_cost_s", m.model_id));
            }
            if !m.complexity_hint.is_finite() {
                return bad(format!("model {} needs a finite complexity_hint", m.model_id));
            }
            if self.spec.is_none() && m.dims == 0 {
                return bad(format!("model {} needs dims >= 1", m.model_id));
            }
            m.loss_model.validate().or_else(|e| bad(format!("model {}: {e}", m.model_id)))?;
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return bad("duration_s must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if let Some(j) = self.jitter {
            if !(j >= 0.0) || !j.is_finite() {
                return bad("jitter must be a non-negative sigma".into());
            }
        }
        Ok(())
    }

    /// The scheduler configuration used by a run of this scenario.
    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig { mode: self.policy, epsilon: self.epsilon, ..self.scheduler.clone() }
    }
}

/// Reads a scenario file. A relative `spec` path is resolved against the file's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
    let mut scenario: Scenario = serde_json::from_str(&text)
        .map_err(|source| SimError::Parse { path: path.to_path_buf(), source })?;
    if let Some(spec) = &scenario.spec {
        if spec.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            scenario.spec = Some(base.join(spec));
        }
    }
    scenario.validate().map_err(|e| match e {
        SimError::InvalidScenario(m) => SimError::InvalidScenario(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(scenario)
}
