//! CART decision trees and a bootstrap random forest.
//!
//! Trees split on Gini impurity with midpoint thresholds (`x <= t` goes
//! left). Split selection is exact: candidate scores are compared as
//! rationals over integer class counts, and ties go to the lowest feature
//! index, then the lowest threshold. Every random draw comes from a
//! ChaCha stream derived from the forest seed and the tree index, so a
//! forest is a pure function of `(data, params, seed)` regardless of how
//! many threads fit it.

mod ensemble;
mod kinds;
mod tree;
mod validation;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FeatureVector, FEATURE_NAMES, N_FEATURES};

pub use ensemble::{fit_forest, Forest, OobTally, FOREST_FORMAT_VERSION};
pub use kinds::KindForests;
pub use tree::{decision_path, fit_tree, DecisionPath, LeafCounts, PathStep, TreeNode};
pub use validation::{cross_validate, stratified_folds, CvReport};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyTraining,
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("row {row} has {got} features, expected {expected}")]
    DimensionMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("no row was ever out of bag")]
    NoOobRows,
    #[error("class {label} has {count} rows, need at least {k} for {k}-fold cross-validation")]
    TooFewRowsPerClass { label: Label, count: usize, k: usize },
    #[error("unsupported forest format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "VAD")]
    Vad,
    #[serde(rename = "NotVAD")]
    NotVad,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Vad => "VAD",
            Label::NotVad => "NotVAD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "VAD" | "vad" | "Vad" => Some(Label::Vad),
            "NotVAD" | "notvad" | "NotVad" | "Not VAD" | "not vad" => Some(Label::NotVad),
            _ => None,
        }
    }

    pub fn is_vad(self) -> bool {
        self == Label::Vad
    }

    pub fn opposite(self) -> Self {
        match self {
            Label::Vad => Label::NotVad,
            Label::NotVad => Label::Vad,
        }
    }

    pub fn from_vad(is_vad: bool) -> Self {
        if is_vad {
            Label::Vad
        } else {
            Label::NotVad
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters. Gini impurity is the only split criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; clamped to the number of usable features.
    pub mtry: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: None,
            min_leaf: 1,
            // ceil(sqrt(7))
            mtry: 3,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidParams("n_trees must be >= 1".into()));
        }
        if self.mtry == 0 || self.mtry > N_FEATURES {
            return Err(ForestParams::bad_mtry(self.mtry));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidParams("min_leaf must be >= 1".into()));
        }
        Ok(())
    }

    fn bad_mtry(mtry: usize) -> ForestError {
        ForestError::InvalidParams(format!("mtry must be in 1..={N_FEATURES}, got {mtry}"))
    }

    /// Parameters for a single explainable tree: every feature at every split.
    pub fn audit_tree(n_features: usize) -> Self {
        ForestParams {
            n_trees: 1,
            max_depth: None,
            min_leaf: 1,
            mtry: n_features.max(1),
        }
    }
}

/// Labeled rows with named columns. `columns[j]` is the index of column `j`
/// in the seven-feature vector, so models can project a [`FeatureVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    rows: Vec<Vec<f64>>,
    labels: Vec<Label>,
    feature_names: Vec<String>,
    columns: Vec<usize>,
}

impl TrainingData {
    /// Generic rows; column `j` is named `f{j}` and maps to source index `j`.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self, ForestError> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        let names = (0..d).map(|j| format!("f{j}")).collect();
        Self::with_columns(rows, labels, names, (0..d).collect())
    }

    pub fn with_columns(
        rows: Vec<Vec<f64>>,
        labels: Vec<Label>,
        feature_names: Vec<String>,
        columns: Vec<usize>,
    ) -> Result<Self, ForestError> {
        if rows.is_empty() {
            return Err(ForestError::EmptyTraining);
        }
        if rows.len() != labels.len() {
            return Err(ForestError::InvalidParams(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let d = feature_names.len();
        if columns.len() != d {
            return Err(ForestError::InvalidParams(
                "feature names and columns differ in length".into(),
            ));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(ForestError::DimensionMismatch {
                    row: i,
                    got: r.len(),
                    expected: d,
                });
            }
        }
        Ok(TrainingData {
            rows,
            labels,
            feature_names,
            columns,
        })
    }

    /// The full seven-feature layout.
    pub fn from_features<'a, I>(items: I) -> Result<Self, ForestError>
    where
        I: IntoIterator<Item = (&'a FeatureVector, Label)>,
    {
        let (rows, labels): (Vec<_>, Vec<_>) = items
            .into_iter()
            .map(|(f, l)| (f.to_array().to_vec(), l))
            .unzip();
        Self::with_columns(
            rows,
            labels,
            FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            (0..N_FEATURES).collect(),
        )
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Drops the columns at the given positions (positions in this data,
    /// not source indices).
    pub fn without_columns(&self, drop: &[usize]) -> Result<Self, ForestError> {
        let keep: Vec<usize> = (0..self.n_features()).filter(|j| !drop.contains(j)).collect();
        if keep.is_empty() {
            return Err(ForestError::InvalidParams("cannot drop every column".into()));
        }
        Ok(TrainingData {
            rows: self
                .rows
                .iter()
                .map(|r| keep.iter().map(|&j| r[j]).collect())
                .collect(),
            labels: self.labels.clone(),
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            columns: keep.iter().map(|&j| self.columns[j]).collect(),
        })
    }

    /// Rows at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, ForestError> {
        if indices.is_empty() {
            return Err(ForestError::EmptyTraining);
        }
        Ok(TrainingData {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            columns: self.columns.clone(),
        })
    }
}
