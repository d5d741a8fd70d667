//! Human-in-the-loop labeling service.
//!
//! Annotators (anonymous or credentialed) pull unlabeled citation instances
//! from a leased queue, optionally seeing a precomputed model suggestion, and
//! submit one of the five intent labels. Two matching labels agree; any
//! disagreement sends the instance to an adjudicator. Agreed and resolved
//! instances export as interchange records.

pub mod api;
pub mod model;
pub mod store;

use std::collections::HashMap;

use ciw_core::program::Prediction;

pub use model::{AdjudicationState, AnnotationRecord, ResolutionSource, Role, Session, Status, Suggestion};
pub use store::{Clock, ManualClock, Stats, Store, StoreConfig, StoreError, SystemClock};

/// Suggestions keyed by instance id, taken from a prediction file.
pub fn suggestions_from_predictions(predictions: &[Prediction]) -> HashMap<String, Suggestion> {
    predictions
        .iter()
        .map(|p| {
            (
                p.example_id.clone(),
                Suggestion {
                    label: p.label,
                    model_id: p.model_id.clone(),
                },
            )
        })
        .collect()
}
