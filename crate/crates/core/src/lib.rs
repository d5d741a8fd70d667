//! Citation-intent classification workbench.
//!
//! Few-shot chain-of-thought classification over a five-way intent scheme,
//! automated search over instructions and demonstration sets, voting and
//! stacked ensembles, and an evaluation harness. Every model call goes through
//! [`lm::Gateway`], whose record/replay cache makes runs reproducible offline.

pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod lm;
pub mod optimizer;
pub mod program;
pub mod seeds;

pub use dataset::{CitationInstance, IntentLabel, LabelSource, LabeledExample};
