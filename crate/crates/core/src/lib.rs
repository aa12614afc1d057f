//! Evolutionary search for recommender similarity metrics.
//!
//! Candidate metrics are typed expression trees over a user embedding, an
//! item embedding and the ones-vector. Each candidate is scored by training a
//! matrix-factorization encoder with BPR loss through the metric and
//! measuring validation NDCG@20; a genetic search with insertion, deletion
//! and replacement mutations keeps the top candidates.

pub mod config;
pub mod dataset;
pub mod equivalence;
pub mod error;
pub mod eval;
pub mod evolution;
pub mod graph;
pub mod ranking;
pub mod report;
pub mod rng;
pub mod rundir;
pub mod surrogate;
pub mod train;

pub use error::{Error, Result};
pub use graph::{parse_expr, print_expr, Expr, LeafKind, MetricGraph, Operator};
