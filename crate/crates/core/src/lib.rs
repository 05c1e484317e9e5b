//! Hardware-aware distributed hyperparameter search.
//!
//! A tagged search-space tree is split into disjoint models ([`space`]), each
//! model is scored by search complexity and performance variation
//! ([`heuristics`]), and trials are dispatched to ranked classes of workers
//! ([`scheduler`]) over a line-delimited protocol ([`net`]). [`sim`] replays
//! the same scheduler against a virtual heterogeneous cluster.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the textbook form of the dense linear algebra.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod heuristics;
pub mod net;
pub mod scheduler;
pub mod sim;
pub mod space;
