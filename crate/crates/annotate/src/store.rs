//! Annotation state with an append-only event log.
//!
//! Every mutation is written to the log before it is applied in memory, and
//! [`Store::open`] rebuilds the state by replaying the log. Leases are not
//! persisted; a restart frees every instance.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ciw_core::dataset::ClassHistogram;
use ciw_core::{CitationInstance, IntentLabel, LabeledExample};

use crate::model::{
    Adjudication, AdjudicationState, AnnotationRecord, ResolutionSource, Role, Session, Status, Suggestion,
};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Clock that only moves when told to.
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock() += by;
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new(DateTime::from_timestamp(1_700_000_000, 0).expect("valid timestamp"))
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// Matching live labels needed for agreement.
    pub consensus_threshold: usize,
    pub lease_seconds: i64,
    /// Credentialed users granted the adjudicator role.
    pub adjudicators: Vec<String>,
    /// Stub credential table; when absent any non-empty password is accepted.
    #[serde(default, skip_serializing)]
    pub credentials: Option<HashMap<String, String>>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            consensus_threshold: 2,
            lease_seconds: 600,
            adjudicators: Vec::new(),
            credentials: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown instance {0}")]
    NotFound(String),
    #[error("missing or unknown session token")]
    Unauthorized,
    #[error("invalid credentials for {0}")]
    InvalidCredentials(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("instance {instance_id} is {status}; the operation is not allowed")]
    InvalidTransition {
        instance_id: String,
        status: Status,
        state: Box<AdjudicationState>,
    },
    #[error("instance {instance_id} is leased to another session")]
    LeaseConflict {
        instance_id: String,
        state: Box<AdjudicationState>,
    },
    #[error("{0}")]
    BadRequest(String),
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("event log: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Instance {
        instance: CitationInstance,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        suggestion: Option<Suggestion>,
    },
    Session {
        session: Session,
    },
    Label {
        record: AnnotationRecord,
    },
    Adjudicate {
        instance_id: String,
        adjudication: Adjudication,
    },
}

#[derive(Debug, Clone)]
struct Lease {
    token: String,
    expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
struct Entry {
    instance: CitationInstance,
    suggestion: Option<Suggestion>,
    state: AdjudicationState,
    lease: Option<Lease>,
}

impl Entry {
    fn leased_to_other(&self, token: &str, now: DateTime<Utc>) -> bool {
        self.lease
            .as_ref()
            .is_some_and(|l| l.token != token && l.expires_at > now)
    }
}

#[derive(Default)]
struct Inner {
    instances: BTreeMap<String, Entry>,
    sessions: HashMap<String, Session>,
}

/// An instance handed to an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub instance: CitationInstance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<Suggestion>,
    pub lease_expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub instance: CitationInstance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<Suggestion>,
    pub state: AdjudicationState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub instances: usize,
    pub by_status: BTreeMap<Status, usize>,
    /// Final labels of agreed and resolved instances.
    pub final_labels: ClassHistogram,
    /// Share of decided instances (agreed, conflicted or resolved) that
    /// went through a conflict.
    pub conflict_rate: f64,
    pub records: usize,
    pub annotators: usize,
    pub records_with_suggestion: usize,
}

pub struct Store {
    inner: Mutex<Inner>,
    config: StoreConfig,
    clock: Arc<dyn Clock>,
    log: Option<Mutex<File>>,
}

impl Store {
    pub fn in_memory(config: StoreConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            config,
            clock,
            log: None,
        }
    }

    /// Open the event log at `path`, replaying whatever it already holds.
    pub fn open(path: impl AsRef<Path>, config: StoreConfig, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut inner = Inner::default();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Event>(&line) {
                    Ok(event) => apply(&mut inner, event, config.consensus_threshold),
                    Err(e) => log::warn!("{}:{}: skipping unreadable event: {e}", path.display(), n + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(inner),
            config,
            clock,
            log: Some(Mutex::new(file)),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn commit(&self, inner: &mut Inner, event: Event) -> Result<(), StoreError> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(&event)?;
            line.push('\n');
            let mut file = log.lock();
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        apply(inner, event, self.config.consensus_threshold);
        Ok(())
    }

    /// Add instances not yet in the store; returns how many were new.
    pub fn add_instances<I>(&self, items: I) -> Result<usize, StoreError>
    where
        I: IntoIterator<Item = (CitationInstance, Option<Suggestion>)>,
    {
        let mut inner = self.inner.lock();
        let mut added = 0;
        for (instance, suggestion) in items {
            if inner.instances.contains_key(&instance.id) {
                continue;
            }
            self.commit(&mut inner, Event::Instance { instance, suggestion })?;
            added += 1;
        }
        Ok(added)
    }

    /// Anonymous when `credentials` is `None`; otherwise a stub check of
    /// (user, password).
    pub fn open_session(&self, credentials: Option<(&str, &str)>) -> Result<Session, StoreError> {
        let token = uuid::Uuid::new_v4().simple().to_string();
        let session = match credentials {
            None => Session {
                annotator_id: format!("anon-{}", &token[..12]),
                token,
                role: Role::Annotator,
                anonymous: true,
                created_at: self.clock.now(),
            },
            Some((user, password)) => {
                let user = user.trim();
                let accepted = !user.is_empty()
                    && !password.is_empty()
                    && self
                        .config
                        .credentials
                        .as_ref()
                        .is_none_or(|table| table.get(user).is_some_and(|p| p == password));
                if !accepted {
                    return Err(StoreError::InvalidCredentials(user.to_string()));
                }
                let role = if self.config.adjudicators.iter().any(|a| a == user) {
                    Role::Adjudicator
                } else {
                    Role::Annotator
                };
                Session {
                    token,
                    annotator_id: user.to_string(),
                    role,
                    anonymous: false,
                    created_at: self.clock.now(),
                }
            }
        };
        let mut inner = self.inner.lock();
        self.commit(&mut inner, Event::Session { session: session.clone() })?;
        Ok(session)
    }

    pub fn session(&self, token: &str) -> Result<Session, StoreError> {
        self.inner.lock().sessions.get(token).cloned().ok_or(StoreError::Unauthorized)
    }

    /// The least-annotated unlabeled instance that is not leased to someone
    /// else and that this annotator has not labeled, leased to the session.
    pub fn next_instance(&self, token: &str) -> Result<Option<QueueItem>, StoreError> {
        let mut inner = self.inner.lock();
        let session = inner.sessions.get(token).cloned().ok_or(StoreError::Unauthorized)?;
        let now = self.clock.now();
        let eligible = |e: &Entry| {
            e.state.status == Status::Unlabeled
                && !e.state.labeled_by(&session.annotator_id)
                && !e.leased_to_other(token, now)
        };
        // A live lease held by this session is handed back first.
        let held = inner
            .instances
            .values()
            .find(|e| eligible(e) && e.lease.as_ref().is_some_and(|l| l.token == token && l.expires_at > now))
            .map(|e| e.instance.id.clone());
        let pick = held.or_else(|| {
            inner
                .instances
                .values()
                .filter(|e| eligible(e))
                .min_by_key(|e| e.state.live_records().len())
                .map(|e| e.instance.id.clone())
        });
        let Some(id) = pick else {
            return Ok(None);
        };
        for entry in inner.instances.values_mut() {
            if entry.lease.as_ref().is_some_and(|l| l.token == token) {
                entry.lease = None;
            }
        }
        let expires_at = now + Duration::seconds(self.config.lease_seconds);
        let entry = inner.instances.get_mut(&id).expect("picked from the map");
        entry.lease = Some(Lease {
            token: token.to_string(),
            expires_at,
        });
        Ok(Some(QueueItem {
            instance: entry.instance.clone(),
            suggestion: entry.suggestion.clone(),
            lease_expires_at: expires_at,
        }))
    }

    pub fn submit_label(
        &self,
        token: &str,
        instance_id: &str,
        label: IntentLabel,
        suggestion_ack: bool,
    ) -> Result<(AnnotationRecord, AdjudicationState), StoreError> {
        let mut inner = self.inner.lock();
        let session = inner.sessions.get(token).cloned().ok_or(StoreError::Unauthorized)?;
        let now = self.clock.now();
        let entry = inner
            .instances
            .get(instance_id)
            .ok_or_else(|| StoreError::NotFound(instance_id.to_string()))?;
        if entry.state.status != Status::Unlabeled {
            return Err(StoreError::InvalidTransition {
                instance_id: instance_id.to_string(),
                status: entry.state.status,
                state: Box::new(entry.state.clone()),
            });
        }
        if entry.leased_to_other(token, now) {
            return Err(StoreError::LeaseConflict {
                instance_id: instance_id.to_string(),
                state: Box::new(entry.state.clone()),
            });
        }
        let record = AnnotationRecord {
            instance_id: instance_id.to_string(),
            annotator_id: session.annotator_id.clone(),
            label,
            suggestion_shown: entry.suggestion.clone().filter(|_| suggestion_ack),
            timestamp: now,
            revision: entry.state.next_revision(&session.annotator_id),
        };
        self.commit(&mut inner, Event::Label { record: record.clone() })?;
        let entry = inner.instances.get_mut(instance_id).expect("checked above");
        entry.lease = None;
        Ok((record, entry.state.clone()))
    }

    /// Settle a conflicted instance. A resolved instance may be adjudicated
    /// again; the newer adjudication wins and the trail keeps both.
    pub fn adjudicate(&self, token: &str, instance_id: &str, label: IntentLabel) -> Result<AdjudicationState, StoreError> {
        let mut inner = self.inner.lock();
        let session = inner.sessions.get(token).cloned().ok_or(StoreError::Unauthorized)?;
        if session.role != Role::Adjudicator {
            return Err(StoreError::Forbidden(format!("{} does not hold the adjudicator role", session.annotator_id)));
        }
        let entry = inner
            .instances
            .get(instance_id)
            .ok_or_else(|| StoreError::NotFound(instance_id.to_string()))?;
        if !matches!(entry.state.status, Status::Conflicted | Status::Resolved) {
            return Err(StoreError::InvalidTransition {
                instance_id: instance_id.to_string(),
                status: entry.state.status,
                state: Box::new(entry.state.clone()),
            });
        }
        let adjudication = Adjudication {
            adjudicator_id: session.annotator_id,
            label,
            timestamp: self.clock.now(),
            revision: entry.state.adjudications.len() as u64 + 1,
        };
        self.commit(
            &mut inner,
            Event::Adjudicate {
                instance_id: instance_id.to_string(),
                adjudication,
            },
        )?;
        Ok(inner.instances[instance_id].state.clone())
    }

    pub fn get(&self, instance_id: &str) -> Result<InstanceView, StoreError> {
        let inner = self.inner.lock();
        let e = inner
            .instances
            .get(instance_id)
            .ok_or_else(|| StoreError::NotFound(instance_id.to_string()))?;
        Ok(InstanceView {
            instance: e.instance.clone(),
            suggestion: e.suggestion.clone(),
            state: e.state.clone(),
        })
    }

    pub fn states(&self) -> Vec<AdjudicationState> {
        self.inner.lock().instances.values().map(|e| e.state.clone()).collect()
    }

    /// Finalized instances whose status is in `filter`, ordered by id.
    pub fn export(&self, filter: &[Status]) -> Vec<LabeledExample> {
        self.inner
            .lock()
            .instances
            .values()
            .filter(|e| filter.contains(&e.state.status))
            .filter_map(|e| {
                let label = e.state.final_label?;
                let source = e.state.resolution_source.label_source()?;
                Some(LabeledExample {
                    instance: e.instance.clone(),
                    label,
                    label_source: source,
                })
            })
            .collect()
    }

    pub fn stats(&self) -> Stats {
        let inner = self.inner.lock();
        let mut by_status: BTreeMap<Status, usize> = Status::ALL.into_iter().map(|s| (s, 0)).collect();
        let mut finals = Vec::new();
        let mut records = 0;
        let mut with_suggestion = 0;
        let mut annotators = std::collections::HashSet::new();
        for e in inner.instances.values() {
            *by_status.get_mut(&e.state.status).expect("all statuses present") += 1;
            finals.extend(e.state.final_label);
            records += e.state.records.len();
            for r in &e.state.records {
                annotators.insert(r.annotator_id.as_str());
                with_suggestion += usize::from(r.suggestion_shown.is_some());
            }
        }
        let decided = by_status[&Status::Agreed] + by_status[&Status::Conflicted] + by_status[&Status::Resolved];
        let conflicted = by_status[&Status::Conflicted] + by_status[&Status::Resolved];
        Stats {
            instances: inner.instances.len(),
            final_labels: ClassHistogram::from_labels(finals),
            conflict_rate: if decided == 0 { 0.0 } else { conflicted as f64 / decided as f64 },
            by_status,
            records,
            annotators: annotators.len(),
            records_with_suggestion: with_suggestion,
        }
    }
}

fn apply(inner: &mut Inner, event: Event, threshold: usize) {
    match event {
        Event::Instance { instance, suggestion } => {
            let id = instance.id.clone();
            inner.instances.entry(id.clone()).or_insert(Entry {
                instance,
                suggestion,
                state: AdjudicationState::new(id),
                lease: None,
            });
        }
        Event::Session { session } => {
            inner.sessions.insert(session.token.clone(), session);
        }
        Event::Label { record } => {
            let Some(entry) = inner.instances.get_mut(&record.instance_id) else {
                log::warn!("label for unknown instance {} ignored", record.instance_id);
                return;
            };
            let state = &mut entry.state;
            state.records.push(record);
            if state.status == Status::Unlabeled {
                let (status, final_label) = state.consensus(threshold);
                state.status = status;
                state.final_label = final_label;
                state.resolution_source = if status == Status::Agreed {
                    ResolutionSource::Consensus
                } else {
                    ResolutionSource::None
                };
            }
        }
        Event::Adjudicate {
            instance_id,
            adjudication,
        } => {
            let Some(entry) = inner.instances.get_mut(&instance_id) else {
                log::warn!("adjudication for unknown instance {instance_id} ignored");
                return;
            };
            let state = &mut entry.state;
            state.status = Status::Resolved;
            state.final_label = Some(adjudication.label);
            state.resolution_source = ResolutionSource::LlmAssistedHuman;
            state.adjudications.push(adjudication);
        }
    }
}
