//! Label records and the append-only label log.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::ParcelId;
use crate::forest::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Expert,
    Resolution,
    FieldSurvey,
    CodeViolationRule,
    Usps,
    Scripted,
}

impl Provenance {
    /// Human judgments that train the HITL model.
    pub fn is_annotation(self) -> bool {
        matches!(self, Provenance::Expert | Provenance::Resolution | Provenance::Scripted)
    }

    fn precedence(self) -> u8 {
        match self {
            Provenance::Resolution => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    /// Position in the log, assigned on append.
    #[serde(default)]
    pub seq: u64,
    pub parcel_id: ParcelId,
    pub annotator_id: String,
    pub value: Label,
    #[serde(default)]
    pub comment: String,
    pub round: u32,
    pub timestamp: DateTime<Utc>,
    pub provenance: Provenance,
    /// Conflict this record settles, for resolution records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolves: Option<String>,
}

impl LabelRecord {
    pub fn new(
        parcel_id: ParcelId,
        annotator_id: impl Into<String>,
        value: Label,
        round: u32,
        timestamp: DateTime<Utc>,
        provenance: Provenance,
    ) -> Self {
        LabelRecord {
            seq: 0,
            parcel_id,
            annotator_id: annotator_id.into(),
            value,
            comment: String::new(),
            round,
            timestamp,
            provenance,
            resolves: None,
        }
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comment = comment.into();
        self
    }

    fn rank(&self) -> (u8, DateTime<Utc>, u64) {
        (self.provenance.precedence(), self.timestamp, self.seq)
    }
}

/// Append-only. Records are never edited or removed; later records
/// supersede earlier ones through [`LabelLog::effective_labels`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelLog {
    records: Vec<LabelRecord>,
}

impl LabelLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends and returns the stored record with its sequence number.
    pub fn append(&mut self, mut record: LabelRecord) -> &LabelRecord {
        record.seq = self.records.len() as u64;
        self.records.push(record);
        self.records.last().expect("just pushed")
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, seq: u64) -> Option<&LabelRecord> {
        self.records.get(seq as usize)
    }

    /// The log as it stood when it held `len` records.
    pub fn prefix(&self, len: u64) -> LabelLog {
        let n = (len as usize).min(self.records.len());
        LabelLog {
            records: self.records[..n].to_vec(),
        }
    }

    pub fn history(&self, parcel: &ParcelId) -> Vec<&LabelRecord> {
        self.records.iter().filter(|r| &r.parcel_id == parcel).collect()
    }

    /// Winning record per parcel among annotation provenances: a
    /// resolution beats everything else, then the latest timestamp, then the
    /// latest sequence number.
    pub fn effective_records(&self) -> BTreeMap<ParcelId, &LabelRecord> {
        let mut best: BTreeMap<ParcelId, &LabelRecord> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.provenance.is_annotation()) {
            match best.get(&r.parcel_id) {
                Some(cur) if cur.rank() >= r.rank() => {}
                _ => {
                    best.insert(r.parcel_id.clone(), r);
                }
            }
        }
        best
    }

    pub fn effective_labels(&self) -> BTreeMap<ParcelId, Label> {
        self.effective_records()
            .into_iter()
            .map(|(id, r)| (id, r.value))
            .collect()
    }

    pub fn effective(&self, parcel: &ParcelId) -> Option<Label> {
        self.effective_records().get(parcel).map(|r| r.value)
    }

    /// The labels that stand for each parcel: the winning resolution alone
    /// if one exists, otherwise each annotator's latest record.
    pub fn standing_records(&self) -> Vec<&LabelRecord> {
        let effective = self.effective_records();
        let mut per_annotator: BTreeMap<(&ParcelId, &str), &LabelRecord> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.provenance.is_annotation()) {
            if effective[&r.parcel_id].provenance == Provenance::Resolution {
                continue;
            }
            let key = (&r.parcel_id, r.annotator_id.as_str());
            match per_annotator.get(&key) {
                Some(cur) if cur.rank() >= r.rank() => {}
                _ => {
                    per_annotator.insert(key, r);
                }
            }
        }
        let mut out: Vec<&LabelRecord> = per_annotator.into_values().collect();
        out.extend(
            effective
                .values()
                .filter(|r| r.provenance == Provenance::Resolution)
                .copied(),
        );
        out.sort_by(|a, b| a.parcel_id.cmp(&b.parcel_id).then(a.seq.cmp(&b.seq)));
        out
    }
}
