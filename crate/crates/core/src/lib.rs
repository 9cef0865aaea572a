//! Desk-scale video corpus moment retrieval with selective, query-guided
//! debiasing.
//!
//! Two structurally identical retrieval models are trained side by side: a
//! naive model that sees the full query and a deliberately biased model that
//! sees only the query's nouns. A per-sample decision rule (co-occurrence
//! table or learnable confounder) classifies the biased model's prediction as
//! helpful or harmful and selects between two contrastive hinge losses. All
//! numerics run on a small f64 tensor graph with reverse-mode differentiation
//! verified against finite differences.

pub mod harness;
pub mod model;
pub mod numcore;
pub mod seeds;
pub mod squid;
pub mod synthcorpus;
pub mod textproc;
