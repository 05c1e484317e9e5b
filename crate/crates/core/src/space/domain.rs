use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

/// Probability mass left in each tail by [`Domain::interval_99`].
const TAIL: f64 = 0.005;

/// A sampled hyperparameter value.
///
/// Integers and reals are kept apart so that `randint` draws survive a
/// round trip through the wire encoding unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Real(v) => Some(*v),
            Value::Text(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v}"),
            Value::Text(v) => write!(f, "{v}"),
        }
    }
}

/// Sampling distribution of a single hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainKind {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Normal { mu: f64, sigma: f64 },
    #[serde(rename = "randint")]
    RandInt { lo: i64, hi: i64 },
    Choice { values: Vec<Value> },
}

impl DomainKind {
    pub fn name(&self) -> &'static str {
        match self {
            DomainKind::Uniform { .. } => "uniform",
            DomainKind::LogUniform { .. } => "log_uniform",
            DomainKind::Normal { .. } => "normal",
            DomainKind::RandInt { .. } => "randint",
            DomainKind::Choice { .. } => "choice",
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(
            self,
            DomainKind::Uniform { .. } | DomainKind::LogUniform { .. } | DomainKind::Normal { .. }
        )
    }

    /// Checks the per-kind invariants, returning a human readable reason on failure.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DomainKind::Uniform { lo, hi } | DomainKind::LogUniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() {
                    return Err("interval bounds must be finite".into());
                }
                if lo >= hi {
                    return Err(format!("degenerate interval [{lo}, {hi}]"));
                }
                if matches!(self, DomainKind::LogUniform { .. }) && *lo <= 0.0 {
                    return Err(format!("log_uniform requires lo > 0, got {lo}"));
                }
                Ok(())
            }
            DomainKind::Normal { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma <= 0.0 {
                    return Err(format!("normal requires finite mu and sigma > 0, got sigma {sigma}"));
                }
                Ok(())
            }
            DomainKind::RandInt { lo, hi } => {
                if lo > hi {
                    return Err(format!("randint requires lo <= hi, got [{lo}, {hi}]"));
                }
                Ok(())
            }
            DomainKind::Choice { values } => {
                if values.is_empty() {
                    return Err("choice requires at least one value".into());
                }
                for (i, v) in values.iter().enumerate() {
                    if let Value::Real(r) = v {
                        if !r.is_finite() {
                            return Err(format!("choice value {i} is not finite"));
                        }
                    }
                    if values[..i].contains(v) {
                        return Err(format!("duplicate choice value {v}"));
                    }
                }
                Ok(())
            }
        }
    }
}

/// One hyperparameter: its leaf id and sampling distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub id: String,
    #[serde(flatten)]
    pub kind: DomainKind,
}

impl Domain {
    pub fn new(id: impl Into<String>, kind: DomainKind) -> Self {
        Self { id: id.into(), kind }
    }

    /// Number of distinct values of a discrete domain, `None` for continuous ones.
    pub fn cardinality(&self) -> Option<u64> {
        match &self.kind {
            DomainKind::RandInt { lo, hi } => Some((*hi as i128 - *lo as i128 + 1) as u64),
            DomainKind::Choice { values } => Some(values.len() as u64),
            _ => None,
        }
    }

    /// Central interval holding 99% of the sampling distribution, in value space.
    ///
    /// `None` for discrete kinds.
    pub fn interval_99(&self) -> Option<(f64, f64)> {
        match &self.kind {
            DomainKind::Uniform { lo, hi } => {
                let w = hi - lo;
                Some((lo + TAIL * w, lo + (1.0 - TAIL) * w))
            }
            DomainKind::LogUniform { lo, hi } => {
                let (a, b) = (lo.ln(), hi.ln());
                let w = b - a;
                Some(((a + TAIL * w).exp(), (a + (1.0 - TAIL) * w).exp()))
            }
            DomainKind::Normal { mu, sigma } => {
                let dist = NormalDist::new(*mu, *sigma).ok()?;
                Some((dist.inverse_cdf(TAIL), dist.inverse_cdf(1.0 - TAIL)))
            }
            DomainKind::RandInt { .. } | DomainKind::Choice { .. } => None,
        }
    }

    /// Draws one value. The domain must already be valid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match &self.kind {
            DomainKind::Uniform { lo, hi } => Value::Real(rng.random_range(*lo..=*hi)),
            DomainKind::LogUniform { lo, hi } => {
                let v = rng.random_range(lo.ln()..=hi.ln()).exp();
                // exp(ln x) can land one ulp outside the bounds
                Value::Real(v.clamp(*lo, *hi))
            }
            DomainKind::Normal { mu, sigma } => {
                let n = Normal::new(*mu, *sigma).expect("validated normal domain");
                Value::Real(n.sample(rng))
            }
            DomainKind::RandInt { lo, hi } => Value::Int(rng.random_range(*lo..=*hi)),
            DomainKind::Choice { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }

    /// Membership test used to validate assignments.
    pub fn contains(&self, value: &Value) -> bool {
        match (&self.kind, value) {
            (DomainKind::Uniform { lo, hi }, v) | (DomainKind::LogUniform { lo, hi }, v) => {
                match v {
                    Value::Real(_) | Value::Int(_) => {
                        let x = v.as_f64().unwrap_or(f64::NAN);
                        x >= *lo && x <= *hi
                    }
                    Value::Text(_) => false,
                }
            }
            (DomainKind::Normal { .. }, Value::Real(x)) => x.is_finite(),
            (DomainKind::Normal { .. }, Value::Int(_)) => true,
            (DomainKind::RandInt { lo, hi }, Value::Int(x)) => x >= lo && x <= hi,
            (DomainKind::Choice { values }, v) => values.contains(v),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_cdf_by_quadrature(x: f64) -> f64 {
        // Simpson's rule on the standard normal density over [-12, x]
        let n = 20_000;
        let a = -12.0;
        let h = (x - a) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(a + i as f64 * h);
        }
        s * h / 3.0
    }

    fn quantile_by_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf_by_quadrature(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn uniform_interval_closed_form() {
        let d = Domain::new("c", DomainKind::Uniform { lo: 0.0, hi: 15.0 });
        let (a, b) = d.interval_99().unwrap();
        assert!((a - 0.075).abs() < 1e-12);
        assert!((b - 14.925).abs() < 1e-12);
    }

    #[test]
    fn normal_interval_matches_quadrature_oracle() {
        let oracle = quantile_by_bisection(0.995);
        assert!((oracle - 2.5758).abs() < 1e-3, "oracle {oracle}");
        let d = Domain::new("n", DomainKind::Normal { mu: 0.0, sigma: 1.0 });
        let (a, b) = d.interval_99().unwrap();
        assert!((a + oracle).abs() < 1e-3);
        assert!((b - oracle).abs() < 1e-3);
    }

    #[test]
    fn discrete_domains_have_no_interval() {
        let d = Domain::new(
            "c",
            DomainKind::Choice { values: vec![Value::Int(1), Value::Int(3), Value::Int(5)] },
        );
        assert_eq!(d.interval_99(), None);
        assert_eq!(Domain::new("r", DomainKind::RandInt { lo: 1, hi: 15 }).interval_99(), None);
    }

    #[test]
    fn log_uniform_interval_is_symmetric_in_log_space() {
        let d = Domain::new("g", DomainKind::LogUniform { lo: 1e-4, hi: 1.0 });
        let (a, b) = d.interval_99().unwrap();
        assert!(a > 1e-4 && b < 1.0);
        assert!(((a.ln() + b.ln()) / 2.0 - (1e-2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_domains() {
        assert!(DomainKind::Uniform { lo: 1.0, hi: 1.0 }
            .validate()
            .unwrap_err()
            .contains("degenerate interval"));
        assert!(DomainKind::LogUniform { lo: 0.0, hi: 1.0 }.validate().is_err());
        assert!(DomainKind::Normal { mu: 0.0, sigma: 0.0 }.validate().is_err());
        assert!(DomainKind::RandInt { lo: 2, hi: 1 }.validate().is_err());
        assert!(DomainKind::RandInt { lo: 2, hi: 2 }.validate().is_ok());
        assert!(DomainKind::Choice { values: vec![] }.validate().is_err());
        assert!(DomainKind::Choice { values: vec![Value::Int(1), Value::Int(1)] }
            .validate()
            .is_err());
    }

    #[test]
    fn singleton_choice_always_samples_its_value() {
        let d = Domain::new("s", DomainKind::Choice { values: vec![Value::Text("a".into())] });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), Value::Text("a".into()));
        }
    }

    #[test]
    fn value_json_keeps_int_and_real_apart() {
        let vals = vec![Value::Int(2), Value::Real(2.0), Value::Text("2".into())];
        let s = serde_json::to_string(&vals).unwrap();
        assert_eq!(s, r#"[2,2.0,"2"]"#);
        let back: Vec<Value> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vals);
    }
}
