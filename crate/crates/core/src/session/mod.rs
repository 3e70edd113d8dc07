//! The HITL loop: rounds, batches, annotator assignments, audits, retraining
//! and reports, persisted as an append-only event log.
//!
//! A [`Session`] is a pure state machine. Every operation validates its
//! input, then emits one or more [`Event`]s that are applied through
//! [`Session::apply`], the same path replay uses. [`SessionStore`] adds the
//! directory-per-session persistence, the dataset registry and the locking
//! that lets label submissions proceed while a retrain runs.
//!
//! Per-round states advance in order:
//!
//! ```text
//! Sampled -> Assigned -> Labeled -> Audited -> Trained -> Evaluated
//! ```
//!
//! The only skip is a forced retrain of a round that is `Labeled` but not
//! yet `Audited`, which is logged as a warning event.

mod config;
mod sheet;
mod store;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    apply_resolution, export_tree, fit_audit_tree, flag_disagreements, flag_isolated_labels, AuditError,
    AuditRow, AuditTreeExport, ConflictItem, ConflictStatus, LabelPoint, ResolutionRequest,
};
use crate::domain::{candidate_filter, Dataset, FeatureError, IngestError, ParcelId, ParcelKind, FEATURE_NAMES, N_FEATURES};
use crate::evaluate::{comparison_report, EvalError, Method, MethodResult, MetricsReport, Validation};
use crate::forest::{ForestError, Label, TrainingData};
use crate::labels::{LabelLog, LabelRecord};
use crate::sampler::{compose_batch, Mix, ProbabilityModel, SamplerError, SamplingBatch};
use crate::synth::SynthError;
use crate::util::{mix_seed, Standardizer};

pub use config::{SamplerConfig, SessionConfig};
pub use sheet::{export_sheet, import_sheet, SheetEntry, SHEET_ROWS};
pub use store::{
    read_validation, write_models, write_validation, DatasetEntry, LabelInput, SessionStore, EVENTS_FILE, MODELS_DIR,
    STATE_FILE, VALIDATIONS_DIR,
};
pub use train::{
    baseline_columns, code_violation_rule, code_violation_rule_labels, kind_training_data, KindCounts, KindTraining, ModelSummary,
    SnapshotInfo, TrainJob, TrainOutcome, TrainedModels,
};

/// Validation set name that also stands for the city's own workflow.
pub const FIELD_SURVEY: &str = "field_survey";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("dataset not found: {0}")]
    DatasetMissing(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown batch {0}")]
    UnknownBatch(String),
    #[error("unknown conflict {0}")]
    UnknownConflict(String),
    #[error("requested {requested} parcels but only {available} remain unlabeled")]
    PoolExhausted { requested: usize, available: usize },
    #[error("bad assignment: {0}")]
    BadAssignment(String),
    #[error("parcel {parcel} is not assigned to {annotator} in round {round}")]
    NotAssigned {
        annotator: String,
        parcel: ParcelId,
        round: u32,
    },
    #[error("{annotator} already labeled {parcel} in round {round}")]
    DuplicateSubmission {
        annotator: String,
        parcel: ParcelId,
        round: u32,
    },
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("round {0} is not accepting labels")]
    RoundClosed(u32),
    #[error("invalid label record: {0}")]
    InvalidRecord(String),
    #[error("no effective labels to train on")]
    NoLabels,
    #[error("labels for {0} parcels are all one class")]
    SingleClass(ParcelKind),
    #[error("no trained model yet")]
    NotTrained,
    #[error("{0}")]
    InvalidState(String),
    #[error("malformed sheet: {0}")]
    MalformedSheet(String),
    #[error("sheet column {0} is not a parcel of this batch")]
    UnknownParcelColumn(String),
    #[error("bad label {token:?} in column {column}")]
    BadLabelToken { column: String, token: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt session log: {0}")]
    CorruptLog(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Audit(AuditError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<AuditError> for SessionError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::UnknownConflict(id) => SessionError::UnknownConflict(id),
            other => SessionError::Audit(other),
        }
    }
}

impl SessionError {
    /// Stable machine-readable code, used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::DatasetMissing(_) => "DatasetMissing",
            SessionError::UnknownSession(_) => "UnknownSession",
            SessionError::UnknownBatch(_) => "UnknownBatch",
            SessionError::UnknownConflict(_) => "UnknownConflict",
            SessionError::PoolExhausted { .. } => "PoolExhausted",
            SessionError::BadAssignment(_) => "BadAssignment",
            SessionError::NotAssigned { .. } => "NotAssigned",
            SessionError::DuplicateSubmission { .. } => "DuplicateSubmission",
            SessionError::SessionClosed(_) => "SessionClosed",
            SessionError::RoundClosed(_) => "RoundClosed",
            SessionError::InvalidRecord(_) => "InvalidRecord",
            SessionError::NoLabels => "NoLabels",
            SessionError::SingleClass(_) => "SingleClass",
            SessionError::NotTrained => "NotTrained",
            SessionError::InvalidState(_) => "InvalidState",
            SessionError::MalformedSheet(_) => "MalformedSheet",
            SessionError::UnknownParcelColumn(_) => "UnknownParcelColumn",
            SessionError::BadLabelToken { .. } => "BadLabelToken",
            SessionError::InvalidConfig(_) => "InvalidConfig",
            SessionError::CorruptLog(_) => "CorruptLog",
            SessionError::Sampler(SamplerError::MixInvalid(_)) => "MixInvalid",
            SessionError::Sampler(_) => "SamplerError",
            SessionError::Forest(_) => "ForestError",
            SessionError::Audit(AuditError::AlreadyResolved(_)) => "AlreadyResolved",
            SessionError::Audit(_) => "AuditError",
            SessionError::Eval(_) => "EvalError",
            SessionError::Ingest(_) => "IngestError",
            SessionError::Features(_) => "FeatureError",
            SessionError::Synth(_) => "SynthError",
            SessionError::Io(_) => "IoError",
            SessionError::Json(_) => "JsonError",
            SessionError::Csv(_) => "CsvError",
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock for tests and scripted runs: each call returns the
/// previous instant plus `step_ms`.
pub struct StepClock {
    next_ms: AtomicI64,
    step_ms: i64,
}

impl StepClock {
    pub fn new(start: DateTime<Utc>, step_ms: i64) -> Self {
        StepClock {
            next_ms: AtomicI64::new(start.timestamp_millis()),
            step_ms,
        }
    }
}

impl Clock for StepClock {
    fn now(&self) -> DateTime<Utc> {
        let ms = self.next_ms.fetch_add(self.step_ms, Ordering::SeqCst);
        DateTime::from_timestamp_millis(ms).expect("clock within chrono range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoundState {
    Sampled,
    Assigned,
    Labeled,
    Audited,
    Trained,
    Evaluated,
}

impl RoundState {
    fn next(self) -> Option<RoundState> {
        use RoundState::*;
        match self {
            Sampled => Some(Assigned),
            Assigned => Some(Labeled),
            Labeled => Some(Audited),
            Audited => Some(Trained),
            Trained => Some(Evaluated),
            Evaluated => None,
        }
    }
}

impl fmt::Display for RoundState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub round: u32,
    pub batch: SamplingBatch,
    /// Annotator to the slice of the batch they label, in batch order.
    pub assignments: BTreeMap<String, Vec<ParcelId>>,
    pub state: RoundState,
    /// (annotator, parcel) pairs already submitted.
    pub submitted: BTreeSet<(String, ParcelId)>,
}

impl Round {
    pub fn batch_id(&self) -> &str {
        &self.batch.batch_id
    }

    pub fn n_assigned(&self) -> usize {
        self.assignments.values().map(Vec::len).sum()
    }

    pub fn remaining(&self) -> usize {
        self.n_assigned() - self.submitted.len()
    }

    pub fn is_assigned(&self, annotator: &str, parcel: &ParcelId) -> bool {
        self.assignments.get(annotator).is_some_and(|v| v.contains(parcel))
    }

    fn advance(&mut self, to: RoundState) -> Result<(), SessionError> {
        if self.state.next() != Some(to) {
            return Err(SessionError::InvalidState(format!(
                "round {} cannot move from {} to {to}",
                self.round, self.state
            )));
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        dataset: String,
        config: SessionConfig,
        pool: Vec<ParcelId>,
        at: DateTime<Utc>,
    },
    BatchSampled {
        batch: SamplingBatch,
        at: DateTime<Utc>,
    },
    Assigned {
        round: u32,
        assignments: BTreeMap<String, Vec<ParcelId>>,
        at: DateTime<Utc>,
    },
    LabelsAccepted {
        round: u32,
        records: Vec<LabelRecord>,
        at: DateTime<Utc>,
    },
    StateChanged {
        round: u32,
        to: RoundState,
        at: DateTime<Utc>,
    },
    AuditCompleted {
        round: u32,
        trees: BTreeMap<ParcelKind, AuditTreeExport>,
        conflicts: Vec<ConflictItem>,
        at: DateTime<Utc>,
    },
    ConflictResolved {
        conflict_id: String,
        request: ResolutionRequest,
        round: u32,
        at: DateTime<Utc>,
    },
    Trained {
        snapshot: SnapshotInfo,
        forced: bool,
        at: DateTime<Utc>,
    },
    Warning {
        message: String,
        at: DateTime<Utc>,
    },
    Closed {
        at: DateTime<Utc>,
    },
}

/// Events not yet persisted. Ignored by equality so a replayed session
/// compares equal to the live one.
#[derive(Debug, Clone, Default)]
struct Outbox(Vec<Event>);

impl PartialEq for Outbox {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub kind: ParcelKind,
    pub probability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub batch_id: String,
    pub round: u32,
    pub accepted: usize,
    pub seqs: Vec<u64>,
    pub remaining: usize,
    pub state: RoundState,
    /// Conflicts opened by the audit this submission triggered.
    pub new_conflicts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dataset: String,
    pub config: SessionConfig,
    pub created_at: DateTime<Utc>,
    pub pool: BTreeSet<ParcelId>,
    pub rounds: Vec<Round>,
    pub log: LabelLog,
    pub conflicts: BTreeMap<String, ConflictItem>,
    pub audit_trees: BTreeMap<ParcelKind, AuditTreeExport>,
    pub snapshots: Vec<SnapshotInfo>,
    pub warnings: Vec<String>,
    pub closed: bool,
    #[serde(skip)]
    models: Option<Arc<TrainedModels>>,
    #[serde(skip)]
    predictions: BTreeMap<ParcelId, Prediction>,
    #[serde(skip)]
    outbox: Outbox,
}

fn kind_ids(ds: &Dataset, ids: &BTreeSet<ParcelId>, kind: ParcelKind) -> BTreeSet<ParcelId> {
    ids.iter().filter(|id| ds.kind_of(id) == Some(kind)).cloned().collect()
}

impl Session {
    /// A new session over the candidate-filtered pool of `ds`.
    pub fn create(
        id: impl Into<String>,
        dataset: impl Into<String>,
        ds: &Dataset,
        config: SessionConfig,
        now: DateTime<Utc>,
    ) -> Result<Session, SessionError> {
        config.validate()?;
        let pool = candidate_filter(ds, &config.filter);
        let ev = Event::Created {
            session_id: id.into(),
            dataset: dataset.into(),
            config,
            pool: pool.into_iter().collect(),
            at: now,
        };
        let mut s = Session::from_created(&ev)?;
        s.outbox.0.push(ev);
        Ok(s)
    }

    fn from_created(ev: &Event) -> Result<Session, SessionError> {
        let Event::Created {
            session_id,
            dataset,
            config,
            pool,
            at,
        } = ev
        else {
            return Err(SessionError::CorruptLog("log must start with a created event".into()));
        };
        Ok(Session {
            id: session_id.clone(),
            dataset: dataset.clone(),
            config: config.clone(),
            created_at: *at,
            pool: pool.iter().cloned().collect(),
            rounds: Vec::new(),
            log: LabelLog::new(),
            conflicts: BTreeMap::new(),
            audit_trees: BTreeMap::new(),
            snapshots: Vec::new(),
            warnings: Vec::new(),
            closed: false,
            models: None,
            predictions: BTreeMap::new(),
            outbox: Outbox::default(),
        })
    }

    /// Rebuilds a session from its log. `models` loads a stored snapshot
    /// by id; `ds` is needed to recompute cached predictions.
    pub fn replay<F>(events: &[Event], ds: &Dataset, mut models: F) -> Result<Session, SessionError>
    where
        F: FnMut(&str) -> Result<TrainedModels, SessionError>,
    {
        let first = events
            .first()
            .ok_or_else(|| SessionError::CorruptLog("empty event log".into()))?;
        let mut s = Session::from_created(first)?;
        for ev in &events[1..] {
            s.apply(ev)?;
            if let Event::Trained { snapshot, .. } = ev {
                let m = models(&snapshot.snapshot_id)?;
                s.attach_models(Arc::new(m), ds);
            }
        }
        Ok(s)
    }

    /// Applies one event. Live operations and replay both go through here.
    pub fn apply(&mut self, ev: &Event) -> Result<(), SessionError> {
        match ev {
            Event::Created { .. } => {
                return Err(SessionError::CorruptLog("duplicate created event".into()));
            }
            Event::BatchSampled { batch, .. } => {
                if let Some(prev) = self.rounds.last() {
                    if prev.state < RoundState::Labeled || batch.round != prev.round + 1 {
                        return Err(SessionError::CorruptLog(format!("round {} sampled out of order", batch.round)));
                    }
                }
                self.rounds.push(Round {
                    round: batch.round,
                    batch: batch.clone(),
                    assignments: BTreeMap::new(),
                    state: RoundState::Sampled,
                    submitted: BTreeSet::new(),
                });
            }
            Event::Assigned { round, assignments, .. } => {
                let r = self.round_mut(*round)?;
                r.advance(RoundState::Assigned)?;
                r.assignments = assignments.clone();
            }
            Event::LabelsAccepted { round, records, .. } => {
                let r = self.round_mut(*round)?;
                for rec in records {
                    r.submitted.insert((rec.annotator_id.clone(), rec.parcel_id.clone()));
                }
                for rec in records {
                    self.log.append(rec.clone());
                }
            }
            Event::StateChanged { round, to, .. } => {
                self.round_mut(*round)?.advance(*to)?;
            }
            Event::AuditCompleted {
                round,
                trees,
                conflicts,
                ..
            } => {
                self.round_mut(*round)?.advance(RoundState::Audited)?;
                self.audit_trees.extend(trees.iter().map(|(k, t)| (*k, t.clone())));
                for c in conflicts {
                    self.conflicts.insert(c.conflict_id.clone(), c.clone());
                }
            }
            Event::ConflictResolved {
                conflict_id,
                request,
                round,
                at,
            } => {
                apply_resolution(&mut self.conflicts, &mut self.log, conflict_id, request, *round, *at)?;
            }
            Event::Trained { snapshot, forced, .. } => {
                let r = self.round_mut(snapshot.round)?;
                match r.state {
                    RoundState::Labeled if *forced => r.state = RoundState::Trained,
                    RoundState::Audited => r.state = RoundState::Trained,
                    RoundState::Trained | RoundState::Evaluated => {}
                    s => {
                        return Err(SessionError::InvalidState(format!(
                            "round {} cannot be trained from {s}",
                            snapshot.round
                        )))
                    }
                }
                self.snapshots.push(snapshot.clone());
            }
            Event::Warning { message, .. } => self.warnings.push(message.clone()),
            Event::Closed { .. } => self.closed = true,
        }
        Ok(())
    }

    fn emit(&mut self, ev: Event) -> Result<(), SessionError> {
        self.apply(&ev)?;
        self.outbox.0.push(ev);
        Ok(())
    }

    /// Drains events produced since the last call, for persistence.
    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.outbox.0)
    }

    fn round_mut(&mut self, round: u32) -> Result<&mut Round, SessionError> {
        self.rounds
            .iter_mut()
            .find(|r| r.round == round)
            .ok_or_else(|| SessionError::CorruptLog(format!("no round {round}")))
    }

    pub fn round(&self, round: u32) -> Option<&Round> {
        self.rounds.iter().find(|r| r.round == round)
    }

    pub fn current_round(&self) -> Option<&Round> {
        self.rounds.last()
    }

    pub fn batch(&self, batch_id: &str) -> Option<&Round> {
        self.rounds.iter().find(|r| r.batch_id() == batch_id)
    }

    pub fn batch_id_for(&self, round: u32) -> String {
        format!("{}-b{round}", self.id)
    }

    pub fn models(&self) -> Option<&Arc<TrainedModels>> {
        self.models.as_ref()
    }

    pub fn latest_snapshot(&self) -> Option<&SnapshotInfo> {
        self.snapshots.last()
    }

    pub fn open_conflicts(&self) -> usize {
        self.conflicts
            .values()
            .filter(|c| c.status == ConflictStatus::Open)
            .count()
    }

    /// Parcels already placed in a batch.
    pub fn batched(&self) -> BTreeSet<ParcelId> {
        self.rounds
            .iter()
            .flat_map(|r| r.batch.parcel_ids.iter().cloned())
            .collect()
    }

    /// Pool parcels not yet batched or labeled.
    pub fn remaining_pool(&self) -> BTreeSet<ParcelId> {
        let batched = self.batched();
        let labeled = self.log.effective_records();
        self.pool
            .iter()
            .filter(|id| !batched.contains(*id) && !labeled.contains_key(*id))
            .cloned()
            .collect()
    }

    fn ensure_open(&self) -> Result<(), SessionError> {
        if self.closed {
            return Err(SessionError::SessionClosed(self.id.clone()));
        }
        Ok(())
    }

    /// Composes the next batch and splits it across annotators in
    /// `assignments` order (annotator ids ascending). Without an explicit
    /// mix, the round's default applies, or the first round's while no
    /// model has been trained.
    pub fn request_batch(
        &mut self,
        ds: &Dataset,
        n: usize,
        mix: Option<Mix>,
        assignments: &BTreeMap<String, usize>,
        now: DateTime<Utc>,
    ) -> Result<&Round, SessionError> {
        self.ensure_open()?;
        if let Some(prev) = self.rounds.last() {
            if prev.state < RoundState::Labeled {
                return Err(SessionError::InvalidState(format!(
                    "round {} is {}; it must be labeled before the next batch",
                    prev.round, prev.state
                )));
            }
        }
        if assignments.is_empty() {
            return Err(SessionError::BadAssignment("no annotators given".into()));
        }
        if let Some((a, _)) = assignments.iter().find(|(a, c)| a.trim().is_empty() || **c == 0) {
            return Err(SessionError::BadAssignment(format!(
                "annotator {a:?} needs a non-empty id and a positive count"
            )));
        }
        let total: usize = assignments.values().sum();
        if total != n {
            return Err(SessionError::BadAssignment(format!(
                "assignment counts sum to {total}, batch size is {n}"
            )));
        }
        let remaining = self.remaining_pool();
        if n > remaining.len() {
            return Err(SessionError::PoolExhausted {
                requested: n,
                available: remaining.len(),
            });
        }
        let round = self.rounds.last().map_or(1, |r| r.round + 1);
        let mix = match mix {
            Some(m) => m,
            None if self.models.is_none() => self.config.sampler.mix_for(1),
            None => self.config.sampler.mix_for(round),
        };
        let model = self.models.as_ref().map(|m| &m.hitl as &dyn ProbabilityModel);
        let seed = mix_seed(self.config.seed, u64::from(round));
        let mut batch = compose_batch(&remaining, ds, model, n, &mix, seed, round)?;
        batch.batch_id = self.batch_id_for(round);
        batch.created_from_model = self.latest_snapshot().map(|s| s.snapshot_id.clone());

        let mut slices = BTreeMap::new();
        let mut ids = batch.parcel_ids.iter();
        for (annotator, count) in assignments {
            slices.insert(annotator.clone(), ids.by_ref().take(*count).cloned().collect());
        }
        self.emit(Event::BatchSampled { batch, at: now })?;
        self.emit(Event::Assigned {
            round,
            assignments: slices,
            at: now,
        })?;
        Ok(self.rounds.last().expect("round just added"))
    }

    /// Accepts annotator labels for the open round, all or nothing. When
    /// the last assignment arrives the round becomes `Labeled` and the
    /// audit runs.
    pub fn submit_labels(
        &mut self,
        ds: &Dataset,
        records: Vec<LabelRecord>,
        now: DateTime<Utc>,
    ) -> Result<AcceptanceReport, SessionError> {
        self.ensure_open()?;
        let Some(first) = records.first() else {
            return Err(SessionError::InvalidRecord("no records".into()));
        };
        let round_no = first.round;
        let round = self.round(round_no).ok_or(SessionError::NotAssigned {
            annotator: first.annotator_id.clone(),
            parcel: first.parcel_id.clone(),
            round: round_no,
        })?;
        if round.state != RoundState::Assigned {
            return Err(SessionError::RoundClosed(round_no));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.round != round_no {
                return Err(SessionError::InvalidRecord("records span several rounds".into()));
            }
            if !r.provenance.is_annotation() || r.resolves.is_some() {
                return Err(SessionError::InvalidRecord(format!(
                    "provenance {:?} cannot be submitted as a label",
                    r.provenance
                )));
            }
            if !round.is_assigned(&r.annotator_id, &r.parcel_id) {
                return Err(SessionError::NotAssigned {
                    annotator: r.annotator_id.clone(),
                    parcel: r.parcel_id.clone(),
                    round: round_no,
                });
            }
            let key = (r.annotator_id.clone(), r.parcel_id.clone());
            if round.submitted.contains(&key) || !seen.insert(key) {
                return Err(SessionError::DuplicateSubmission {
                    annotator: r.annotator_id.clone(),
                    parcel: r.parcel_id.clone(),
                    round: round_no,
                });
            }
        }
        let batch_id = round.batch_id().to_string();
        let start = self.log.len() as u64;
        let accepted = records.len();
        self.emit(Event::LabelsAccepted {
            round: round_no,
            records,
            at: now,
        })?;
        let mut new_conflicts = Vec::new();
        if self.round(round_no).is_some_and(|r| r.remaining() == 0) {
            self.emit(Event::StateChanged {
                round: round_no,
                to: RoundState::Labeled,
                at: now,
            })?;
            new_conflicts = self.audit(ds, round_no, now)?;
        }
        let r = self.round(round_no).expect("round exists");
        Ok(AcceptanceReport {
            batch_id,
            round: round_no,
            accepted,
            seqs: (start..start + accepted as u64).collect(),
            remaining: r.remaining(),
            state: r.state,
            new_conflicts,
        })
    }

    /// Fits the per-kind audit trees on the effective labels and flags
    /// isolated labels and disagreements not flagged before.
    fn audit(&mut self, ds: &Dataset, round: u32, now: DateTime<Utc>) -> Result<Vec<String>, SessionError> {
        let effective = self.log.effective_labels();
        let standing = self.log.standing_records();
        let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let known: BTreeSet<&str> = self.conflicts.values().map(|c| c.key.as_str()).collect();
        let mut trees = BTreeMap::new();
        let mut found = Vec::new();
        for kind in ParcelKind::ALL {
            let labeled: Vec<(&ParcelId, Label)> = effective
                .iter()
                .filter(|(id, _)| ds.kind_of(id) == Some(kind))
                .map(|(id, l)| (id, *l))
                .collect();
            if labeled.is_empty() {
                continue;
            }
            let rows: Vec<AuditRow> = labeled
                .iter()
                .filter_map(|(id, l)| {
                    ds.feature(id).map(|f| AuditRow {
                        parcel_id: (*id).clone(),
                        label: *l,
                        x: f.to_array().to_vec(),
                    })
                })
                .collect();
            let data = TrainingData::with_columns(
                rows.iter().map(|r| r.x.clone()).collect(),
                rows.iter().map(|r| r.label).collect(),
                names.clone(),
                (0..N_FEATURES).collect(),
            )?;
            let tree = fit_audit_tree(&data)?;
            let mut flags = flag_isolated_labels(&tree, &rows, &self.config.audit.isolation);
            trees.insert(kind, export_tree(&tree, &names));

            let points: Vec<LabelPoint> = standing
                .iter()
                .filter(|r| ds.kind_of(&r.parcel_id) == Some(kind))
                .filter_map(|r| {
                    ds.feature(&r.parcel_id).map(|f| LabelPoint {
                        parcel_id: r.parcel_id.clone(),
                        annotator_id: r.annotator_id.clone(),
                        label: r.value,
                        x: f.to_array().to_vec(),
                    })
                })
                .collect();
            let pool_rows: Vec<Vec<f64>> = self
                .pool
                .iter()
                .filter(|id| ds.kind_of(id) == Some(kind))
                .filter_map(|id| ds.feature(id).map(|f| f.to_array().to_vec()))
                .collect();
            let scale = if pool_rows.is_empty() {
                Standardizer::identity(N_FEATURES)
            } else {
                Standardizer::fit(&pool_rows)
            };
            flags.extend(flag_disagreements(&points, &scale, self.config.audit.eps));
            for mut c in flags {
                if known.contains(c.key.as_str()) || found.iter().any(|f: &ConflictItem| f.key == c.key) {
                    continue;
                }
                c.parcel_kind = Some(kind);
                found.push(c);
            }
        }
        let base = self.conflicts.len();
        for (i, c) in found.iter_mut().enumerate() {
            c.conflict_id = format!("{}-c{}", self.id, base + i + 1);
        }
        let ids = found.iter().map(|c| c.conflict_id.clone()).collect();
        self.emit(Event::AuditCompleted {
            round,
            trees,
            conflicts: found,
            at: now,
        })?;
        Ok(ids)
    }

    /// Records a resolution for an open conflict; the decided label is
    /// appended with resolution provenance for every parcel involved.
    pub fn resolve_conflict(
        &mut self,
        conflict_id: &str,
        request: ResolutionRequest,
        now: DateTime<Utc>,
    ) -> Result<Vec<LabelRecord>, SessionError> {
        self.ensure_open()?;
        let c = self
            .conflicts
            .get(conflict_id)
            .ok_or_else(|| SessionError::UnknownConflict(conflict_id.to_string()))?;
        if c.status == ConflictStatus::Resolved {
            return Err(AuditError::AlreadyResolved(conflict_id.to_string()).into());
        }
        if request.rationale.trim().is_empty() || request.resolver_id.trim().is_empty() {
            return Err(SessionError::InvalidRecord("a resolution needs a resolver and a rationale".into()));
        }
        let start = self.log.len();
        let round = self.current_round().map_or(0, |r| r.round);
        self.emit(Event::ConflictResolved {
            conflict_id: conflict_id.to_string(),
            request,
            round,
            at: now,
        })?;
        Ok(self.log.records()[start..].to_vec())
    }

    /// The most recent round that has reached `Labeled`.
    fn trainable_round(&self) -> Option<&Round> {
        self.rounds.iter().rev().find(|r| r.state >= RoundState::Labeled)
    }

    /// First phase of a retrain: checks the gate and copies the effective
    /// labels into a job that runs without touching the session.
    pub fn begin_retrain(&mut self, ds: Arc<Dataset>, force: bool, now: DateTime<Utc>) -> Result<TrainJob, SessionError> {
        self.ensure_open()?;
        let labels = self.log.effective_labels();
        if labels.is_empty() {
            return Err(SessionError::NoLabels);
        }
        let round = self
            .trainable_round()
            .ok_or_else(|| SessionError::InvalidState("no round has been fully labeled".into()))?;
        let (round_no, state) = (round.round, round.state);
        if state == RoundState::Labeled && self.config.audit_gate {
            if !force {
                return Err(SessionError::InvalidState(format!(
                    "round {round_no} has not been audited; retrain with force to skip the gate"
                )));
            }
            self.emit(Event::Warning {
                message: format!("round {round_no} trained without audit (forced)"),
                at: now,
            })?;
        }
        Ok(TrainJob {
            session_id: self.id.clone(),
            snapshot_id: format!("{}-m{}", self.id, self.snapshots.len() + 1),
            round: round_no,
            forced: force && state == RoundState::Labeled,
            label_seq_end: self.log.len() as u64,
            labels,
            pool: self.pool.clone(),
            dataset: ds,
            params: self.config.forest,
            seed: self.config.seed,
            baseline: self.config.baseline,
            prior_baseline: self.models.as_ref().and_then(|m| {
                let summary = self.latest_snapshot()?.baseline.clone()?;
                Some((m.baseline.clone()?, summary))
            }),
        })
    }

    /// Second phase: records the snapshot and swaps in the new models.
    pub fn commit_retrain(&mut self, outcome: TrainOutcome, ds: &Dataset, now: DateTime<Utc>) -> Result<&SnapshotInfo, SessionError> {
        let expected = format!("{}-m{}", self.id, self.snapshots.len() + 1);
        if outcome.info.snapshot_id != expected {
            return Err(SessionError::InvalidState(format!(
                "snapshot {} is stale; another retrain committed first",
                outcome.info.snapshot_id
            )));
        }
        let round = self
            .round(outcome.info.round)
            .ok_or_else(|| SessionError::InvalidState(format!("no round {}", outcome.info.round)))?;
        let forced = round.state == RoundState::Labeled;
        self.emit(Event::Trained {
            snapshot: outcome.info,
            forced,
            at: now,
        })?;
        self.attach_models(Arc::new(outcome.models), ds);
        Ok(self.snapshots.last().expect("snapshot just added"))
    }

    /// All three phases in one call, for single-threaded use.
    pub fn retrain(&mut self, ds: Arc<Dataset>, force: bool, now: DateTime<Utc>) -> Result<&SnapshotInfo, SessionError> {
        let job = self.begin_retrain(ds.clone(), force, now)?;
        let outcome = job.run(now)?;
        self.commit_retrain(outcome, &ds, now)
    }

    fn attach_models(&mut self, models: Arc<TrainedModels>, ds: &Dataset) {
        self.predictions = self
            .pool
            .iter()
            .filter_map(|id| {
                let kind = ds.kind_of(id)?;
                let f = ds.feature(id)?;
                let probability = models.hitl.predict(kind, f)?;
                let baseline_probability = models.baseline.as_ref().and_then(|b| b.predict(kind, f));
                Some((
                    id.clone(),
                    Prediction {
                        kind,
                        probability,
                        baseline_probability,
                    },
                ))
            })
            .collect();
        self.models = Some(models);
    }

    pub fn predictions(&self) -> &BTreeMap<ParcelId, Prediction> {
        &self.predictions
    }

    /// Parcels of `kind` (or every kind) whose probability meets the threshold.
    pub fn predicted_vad(&self, kind: Option<ParcelKind>, baseline: bool) -> BTreeSet<ParcelId> {
        let t = self.config.threshold;
        self.predictions
            .iter()
            .filter(|(_, p)| kind.is_none_or(|k| p.kind == k))
            .filter(|(_, p)| {
                let v = if baseline { p.baseline_probability } else { Some(p.probability) };
                v.is_some_and(|v| v >= t)
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Method results for the latest snapshot: the city workflow when a
    /// field-survey validation is given, the baseline when trained, and
    /// the HITL model, each split by kind.
    pub fn method_results(&self, ds: &Dataset, validations: &[Validation]) -> Result<Vec<MethodResult>, SessionError> {
        let snap = self.latest_snapshot().ok_or(SessionError::NotTrained)?;
        if self.models.is_none() {
            return Err(SessionError::NotTrained);
        }
        let trained = self.log.prefix(snap.label_seq_end).effective_labels();
        let trained_ids: BTreeSet<ParcelId> = trained.keys().cloned().collect();
        let mut out = Vec::new();
        if let Some(survey) = validations.iter().find(|v| v.name == FIELD_SURVEY) {
            for kind in ParcelKind::ALL {
                let universe = kind_ids(ds, &self.pool, kind);
                let surveyed = survey.scope.clone().unwrap_or_else(|| survey.ids.clone());
                out.push(MethodResult {
                    method: Method::CityWorkflow,
                    kind,
                    input_ids: kind_ids(ds, &surveyed, kind),
                    output_ids: kind_ids(ds, &survey.ids, kind),
                    internal_accuracy: None,
                    excluded_features: Vec::new(),
                    own_validation: Some(FIELD_SURVEY.to_string()),
                    notes: "field survey in the lowest-income neighborhoods".into(),
                    universe: Some(universe),
                });
            }
        }
        if let Some(b) = &snap.baseline {
            for (kind, t) in &b.kinds {
                let universe = kind_ids(ds, &self.pool, *kind);
                out.push(MethodResult {
                    method: Method::SimpleMl,
                    kind: *kind,
                    input_ids: universe.clone(),
                    output_ids: self.predicted_vad(Some(*kind), true),
                    internal_accuracy: t.internal_accuracy.clone(),
                    excluded_features: FEATURE_NAMES
                        .iter()
                        .filter(|f| !b.feature_names.iter().any(|n| n == *f))
                        .map(|f| f.to_string())
                        .collect(),
                    own_validation: None,
                    notes: t.note.clone(),
                    universe: Some(universe),
                });
            }
        }
        for (kind, t) in &snap.hitl.kinds {
            out.push(MethodResult {
                method: Method::Vadecide,
                kind: *kind,
                input_ids: kind_ids(ds, &trained_ids, *kind),
                output_ids: self.predicted_vad(Some(*kind), false),
                internal_accuracy: t.internal_accuracy.clone(),
                excluded_features: Vec::new(),
                own_validation: None,
                notes: t.note.clone(),
                universe: Some(kind_ids(ds, &self.pool, *kind)),
            });
        }
        for r in &out {
            r.validate()?;
        }
        Ok(out)
    }

    /// The comparison report for the latest snapshot. The first report of
    /// a trained round moves it to `Evaluated`.
    pub fn report(&mut self, ds: &Dataset, validations: &[Validation], now: DateTime<Utc>) -> Result<MetricsReport, SessionError> {
        let results = self.method_results(ds, validations)?;
        let report = comparison_report(&results, validations, &self.pool, &ds.features, &self.config.content);
        let round = self.latest_snapshot().map(|s| s.round);
        if let Some(r) = round.and_then(|n| self.round(n)) {
            if r.state == RoundState::Trained {
                let to = r.state.next().expect("trained has a successor");
                self.emit(Event::StateChanged {
                    round: r.round,
                    to,
                    at: now,
                })?;
            }
        }
        Ok(report)
    }

    pub fn close(&mut self, now: DateTime<Utc>) -> Result<(), SessionError> {
        self.ensure_open()?;
        self.emit(Event::Closed { at: now })
    }
}
