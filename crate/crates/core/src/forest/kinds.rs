use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Forest;
use crate::domain::{FeatureVector, ParcelKind};

/// One independently trained forest per parcel kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindForests {
    pub models: BTreeMap<ParcelKind, Forest>,
}

impl KindForests {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, kind: ParcelKind, forest: Forest) {
        self.models.insert(kind, forest.with_kind(kind));
    }

    pub fn get(&self, kind: ParcelKind) -> Option<&Forest> {
        self.models.get(&kind)
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn predict(&self, kind: ParcelKind, f: &FeatureVector) -> Option<f64> {
        self.get(kind).map(|m| m.predict_features(f))
    }
}
