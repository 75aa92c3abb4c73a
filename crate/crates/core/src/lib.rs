//! Question routing for community question-answering sites.
//!
//! Tags are clustered into topic communities on their co-occurrence graph,
//! user answering activity is accumulated per topic with a hyperbolic
//! recency discount, the resulting sparse user-topic matrix is factorized,
//! and new questions are routed to candidates by their predicted expertise
//! on the question's topics.
//!
//! Pipeline stages map onto modules:
//!
//! - [`ingest`]: StackExchange dump parsing, filtering, train/test splits, corpus cache.
//! - [`tag_graph`]: weighted tag co-occurrence graph and its randomizations.
//! - [`communities`]: modularity, Louvain, greedy agglomeration, variation of
//!   information and the perturbation robustness protocol.
//! - [`activity`]: temporally discounted user-topic activity matrices.
//! - [`factorization`]: regularized matrix factorization trained by SGD.
//! - [`routing`]: the routing method and the baselines.
//! - [`eval`]: ranking metrics, paired Wilcoxon tests, experiment runner.
//!
//! Data-parallel loops go through [`Exec`]; with the `parallel` feature
//! disabled every mode runs sequentially.

pub mod activity;
pub mod communities;
pub mod error;
pub mod eval;
mod exec;
pub mod factorization;
pub mod ingest;
pub mod routing;
pub mod seeds;
pub mod synth;
pub mod tag_graph;

pub use error::{Error, Result};
pub use exec::Exec;
