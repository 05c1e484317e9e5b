use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::space::{Domain, ModelSpace};

/// Per-domain search complexity and its sum over a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityScore {
    pub per_domain: BTreeMap<String, f64>,
    pub total: f64,
}

/// Search complexity of one domain.
///
/// Continuous domains score `2 + (b - a)` over their central 99% interval,
/// discrete ones `2 - 1/|s|`, so every continuous domain outranks every
/// discrete one.
pub fn complexity(domain: &Domain) -> f64 {
    match domain.interval_99() {
        Some((a, b)) => 2.0 + (b - a).abs(),
        None => {
            let size = domain.cardinality().expect("discrete domain has a cardinality");
            2.0 - 1.0 / size as f64
        }
    }
}

pub fn model_complexity(model: &ModelSpace) -> ComplexityScore {
    domains_complexity(&model.domains)
}

pub fn domains_complexity(domains: &[Domain]) -> ComplexityScore {
    let mut per_domain = BTreeMap::new();
    let mut total = 0.0;
    for d in domains {
        let c = complexity(d);
        total += c;
        per_domain.insert(d.id.clone(), c);
    }
    ComplexityScore { per_domain, total }
}
