//! Next-report recommendation for analytics dashboards, driven by navigation
//! history, likely goal reports and the values on the reports being viewed.
//!
//! The crate combines a frequency model (per-user Markov navigation graphs)
//! with a context model (PARAFAC2 latent factors evolved by a Kalman filter
//! and scored per intent by a pairwise ranking SVM) into a single
//! recommendation score, and ships the evaluation harness and synthetic data
//! generator used to compare it against frequency-, mass- and context-only
//! baselines.

pub mod context;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod kalman;
pub mod matio;
pub mod navgraph;
pub mod parafac2;
pub mod pipeline;
pub mod ranksvm;
pub mod recommender;
pub mod stages;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
