//! Static search-complexity and dynamic performance-variation heuristics.

mod complexity;
pub mod gp;
mod priority;

pub use complexity::{complexity, domains_complexity, model_complexity, ComplexityScore};
pub use gp::{fit_length_scale, GpError, GpFitConfig, LengthScaleObjective};
pub use priority::{
    encode_assignment, length_scale_priority, priority, sample_length_scales, HeuristicError,
    PriorityConfig, TrialRecord,
};
