//! Model training against an immutable label snapshot.
//!
//! Training is split so the heavy part holds no lock:
//! [`Session::begin_retrain`](super::Session::begin_retrain) copies what it
//! needs into a [`TrainJob`], [`TrainJob::run`] fits the forests, and
//! [`Session::commit_retrain`](super::Session::commit_retrain) records the
//! outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::domain::{Dataset, ParcelId, ParcelKind, CODE_VIOLATION, FEATURE_NAMES, N_FEATURES};
use crate::evaluate::{internal_accuracy, InternalAccuracy};
use crate::forest::{Forest, ForestParams, KindForests, Label, TrainingData};
use crate::labels::{LabelRecord, Provenance};
use crate::util::mix_seed;

const HITL_STREAM: u64 = 0x4817;
const BASELINE_STREAM: u64 = 0xBA5E;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub n: usize,
    pub n_vad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindTraining {
    pub counts: KindCounts,
    pub internal_accuracy: Option<InternalAccuracy>,
    /// Why internal accuracy is missing, when it is.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub feature_names: Vec<String>,
    pub kinds: BTreeMap<ParcelKind, KindTraining>,
}

/// What a training run produced, minus the forests themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    pub snapshot_id: String,
    pub round: u32,
    /// Log length when the labels were copied; records with `seq` below it
    /// were visible to this run.
    pub label_seq_end: u64,
    pub label_count: usize,
    pub hitl: ModelSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ModelSummary>,
    pub trained_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModels {
    pub snapshot_id: String,
    pub hitl: KindForests,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<KindForests>,
}

/// A parcel is VAD under the baseline rule when it carries an active code
/// violation of one of the VAD subtypes.
pub fn code_violation_rule(ds: &Dataset, id: &ParcelId) -> Label {
    Label::from_vad(ds.incidents_of(id).iter().any(|i| i.is_vad_code_violation()))
}

pub fn code_violation_rule_labels(
    ds: &Dataset,
    pool: &BTreeSet<ParcelId>,
    round: u32,
    timestamp: DateTime<Utc>,
) -> Vec<LabelRecord> {
    pool.iter()
        .map(|id| {
            LabelRecord::new(
                id.clone(),
                "code_violation_rule",
                code_violation_rule(ds, id),
                round,
                timestamp,
                Provenance::CodeViolationRule,
            )
        })
        .collect()
}

pub fn baseline_columns() -> Vec<usize> {
    (0..N_FEATURES).filter(|&c| c != CODE_VIOLATION).collect()
}

/// Everything a training run reads, copied out of the session.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub session_id: String,
    pub snapshot_id: String,
    pub round: u32,
    pub forced: bool,
    pub label_seq_end: u64,
    pub labels: BTreeMap<ParcelId, Label>,
    pub pool: BTreeSet<ParcelId>,
    pub dataset: Arc<Dataset>,
    pub params: ForestParams,
    pub seed: u64,
    pub baseline: bool,
    /// Baseline from an earlier snapshot. Its rule labels depend only on
    /// the pool, so it is carried forward instead of refit.
    pub prior_baseline: Option<(KindForests, ModelSummary)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub info: SnapshotInfo,
    pub models: TrainedModels,
}

fn data_for(ds: &Dataset, labels: &[(&ParcelId, Label)], columns: &[usize]) -> Result<TrainingData, SessionError> {
    let mut rows = Vec::with_capacity(labels.len());
    for (id, _) in labels {
        let f = ds
            .feature(id)
            .ok_or_else(|| SessionError::DatasetMissing(format!("no features for parcel {id}")))?;
        rows.push(f.project(columns));
    }
    let names = columns.iter().map(|&c| FEATURE_NAMES[c].to_string()).collect();
    Ok(TrainingData::with_columns(
        rows,
        labels.iter().map(|l| l.1).collect(),
        names,
        columns.to_vec(),
    )?)
}

/// One kind's labeled rows, projected onto `columns`.
pub fn kind_training_data(
    ds: &Dataset,
    labels: &BTreeMap<ParcelId, Label>,
    kind: ParcelKind,
    columns: &[usize],
) -> Result<TrainingData, SessionError> {
    let items: Vec<(&ParcelId, Label)> = labels
        .iter()
        .filter(|(id, _)| ds.kind_of(id) == Some(kind))
        .map(|(id, l)| (id, *l))
        .collect();
    data_for(ds, &items, columns)
}

fn fit_kinds(
    ds: &Dataset,
    labels: &BTreeMap<ParcelId, Label>,
    columns: &[usize],
    params: &ForestParams,
    seed: u64,
) -> Result<(KindForests, ModelSummary), SessionError> {
    let mut params = *params;
    params.mtry = params.mtry.min(columns.len());
    let mut forests = KindForests::new();
    let mut kinds = BTreeMap::new();
    for (k, kind) in ParcelKind::ALL.into_iter().enumerate() {
        let items: Vec<(&ParcelId, Label)> = labels
            .iter()
            .filter(|(id, _)| ds.kind_of(id) == Some(kind))
            .map(|(id, l)| (id, *l))
            .collect();
        if items.is_empty() {
            continue;
        }
        let n_vad = items.iter().filter(|(_, l)| l.is_vad()).count();
        if n_vad == 0 || n_vad == items.len() {
            return Err(SessionError::SingleClass(kind));
        }
        let data = data_for(ds, &items, columns)?;
        let kind_seed = mix_seed(seed, k as u64);
        let forest = Forest::fit(&data, &params, kind_seed)?;
        let (internal_accuracy, note) = match internal_accuracy(&data, &params, kind_seed) {
            Ok(a) => (Some(a), String::new()),
            Err(e) => (None, e.to_string()),
        };
        forests.insert(kind, forest);
        kinds.insert(
            kind,
            KindTraining {
                counts: KindCounts {
                    n: items.len(),
                    n_vad,
                },
                internal_accuracy,
                note,
            },
        );
    }
    let summary = ModelSummary {
        feature_names: columns.iter().map(|&c| FEATURE_NAMES[c].to_string()).collect(),
        kinds,
    };
    Ok((forests, summary))
}

impl TrainJob {
    /// Fits the per-kind HITL forests on the snapshot labels and, when
    /// enabled, the baseline on rule labels over the pool.
    pub fn run(&self, trained_at: DateTime<Utc>) -> Result<TrainOutcome, SessionError> {
        if self.labels.is_empty() {
            return Err(SessionError::NoLabels);
        }
        let all: Vec<usize> = (0..N_FEATURES).collect();
        let (hitl, hitl_summary) = fit_kinds(
            &self.dataset,
            &self.labels,
            &all,
            &self.params,
            mix_seed(self.seed, HITL_STREAM),
        )?;
        let (baseline, baseline_summary) = if let (true, Some((f, s))) = (self.baseline, &self.prior_baseline) {
            (Some(f.clone()), Some(s.clone()))
        } else if self.baseline {
            let rule: BTreeMap<ParcelId, Label> = self
                .pool
                .iter()
                .map(|id| (id.clone(), code_violation_rule(&self.dataset, id)))
                .collect();
            // A pool with no rule positives in some kind has no baseline;
            // the HITL model still trains.
            match fit_kinds(
                &self.dataset,
                &rule,
                &baseline_columns(),
                &self.params,
                mix_seed(self.seed, BASELINE_STREAM),
            ) {
                Ok((f, s)) => (Some(f), Some(s)),
                Err(SessionError::SingleClass(kind)) => {
                    log::warn!("baseline skipped: rule labels for {kind} are single-class");
                    (None, None)
                }
                Err(e) => return Err(e),
            }
        } else {
            (None, None)
        };
        Ok(TrainOutcome {
            info: SnapshotInfo {
                snapshot_id: self.snapshot_id.clone(),
                round: self.round,
                label_seq_end: self.label_seq_end,
                label_count: self.labels.len(),
                hitl: hitl_summary,
                baseline: baseline_summary,
                trained_at,
            },
            models: TrainedModels {
                snapshot_id: self.snapshot_id.clone(),
                hitl,
                baseline,
            },
        })
    }
}
