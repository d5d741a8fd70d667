use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use ciw_core::{IntentLabel, LabelSource};

/// A model label shown to the annotator as reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub label: IntentLabel,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub label: IntentLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion_shown: Option<Suggestion>,
    pub timestamp: DateTime<Utc>,
    /// Per (instance, annotator), starting at 1.
    pub revision: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Unlabeled,
    Agreed,
    Conflicted,
    Resolved,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Unlabeled, Status::Agreed, Status::Conflicted, Status::Resolved];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Unlabeled => "unlabeled",
            Status::Agreed => "agreed",
            Status::Conflicted => "conflicted",
            Status::Resolved => "resolved",
        }
    }

    /// Whether the state machine permits moving from `self` to `next`.
    pub fn may_become(self, next: Status) -> bool {
        use Status::*;
        matches!(
            (self, next),
            (Unlabeled, Unlabeled | Agreed | Conflicted) | (Agreed, Agreed) | (Conflicted, Conflicted | Resolved) | (Resolved, Resolved)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, Status::Agreed | Status::Resolved)
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Status::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionSource {
    None,
    Consensus,
    LlmAssistedHuman,
}

impl ResolutionSource {
    pub fn label_source(self) -> Option<LabelSource> {
        match self {
            ResolutionSource::None => None,
            ResolutionSource::Consensus => Some(LabelSource::Human),
            ResolutionSource::LlmAssistedHuman => Some(LabelSource::Adjudicated),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjudication {
    pub adjudicator_id: String,
    pub label: IntentLabel,
    pub timestamp: DateTime<Utc>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationState {
    pub instance_id: String,
    /// Every submitted revision, in arrival order; never rewritten.
    pub records: Vec<AnnotationRecord>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_label: Option<IntentLabel>,
    pub resolution_source: ResolutionSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjudications: Vec<Adjudication>,
}

impl AdjudicationState {
    pub fn new(instance_id: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            records: Vec::new(),
            status: Status::Unlabeled,
            final_label: None,
            resolution_source: ResolutionSource::None,
            adjudications: Vec::new(),
        }
    }

    /// Latest revision of each annotator's label, in first-seen order.
    pub fn live_records(&self) -> Vec<&AnnotationRecord> {
        let mut live: Vec<&AnnotationRecord> = Vec::new();
        for r in &self.records {
            match live.iter_mut().find(|l| l.annotator_id == r.annotator_id) {
                Some(slot) if r.revision > slot.revision => *slot = r,
                Some(_) => {}
                None => live.push(r),
            }
        }
        live
    }

    pub fn labeled_by(&self, annotator_id: &str) -> bool {
        self.records.iter().any(|r| r.annotator_id == annotator_id)
    }

    pub fn next_revision(&self, annotator_id: &str) -> u64 {
        self.records
            .iter()
            .filter(|r| r.annotator_id == annotator_id)
            .map(|r| r.revision)
            .max()
            .unwrap_or(0)
            + 1
    }

    /// Status implied by the live records, before any adjudication.
    pub fn consensus(&self, threshold: usize) -> (Status, Option<IntentLabel>) {
        let live = self.live_records();
        let Some(first) = live.first() else {
            return (Status::Unlabeled, None);
        };
        if live.iter().any(|r| r.label != first.label) {
            (Status::Conflicted, None)
        } else if live.len() >= threshold {
            (Status::Agreed, Some(first.label))
        } else {
            (Status::Unlabeled, None)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Annotator,
    Adjudicator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub annotator_id: String,
    pub role: Role,
    pub anonymous: bool,
    pub created_at: DateTime<Utc>,
}
