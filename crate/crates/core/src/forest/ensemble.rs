use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, TreeNode};
use super::{ForestError, ForestParams, Label, TrainingData};
use crate::domain::{FeatureVector, ParcelKind};
use crate::util::rng_for;

pub const FOREST_FORMAT_VERSION: u32 = 1;

/// Out-of-bag votes for one training row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OobTally {
    pub label: Label,
    pub vad_votes: u32,
    pub not_vad_votes: u32,
}

impl OobTally {
    pub fn n_votes(&self) -> u32 {
        self.vad_votes + self.not_vad_votes
    }

    /// Majority OOB vote; ties go to VAD, like [`Forest::classify`].
    pub fn majority(&self) -> Option<Label> {
        (self.n_votes() > 0).then(|| Label::from_vad(self.vad_votes >= self.not_vad_votes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format_version: u32,
    pub kind: Option<ParcelKind>,
    pub params: ForestParams,
    pub seed: u64,
    pub feature_names: Vec<String>,
    /// Source index in the seven-feature vector for each model column.
    pub feature_columns: Vec<usize>,
    pub trees: Vec<TreeNode>,
    pub oob: Vec<OobTally>,
}

impl Forest {
    /// Fits `params.n_trees` trees, each on a bootstrap resample drawn from
    /// its own seed-derived stream. Trees are fit in parallel; the result does
    /// not depend on thread count.
    pub fn fit(data: &TrainingData, params: &ForestParams, seed: u64) -> Result<Self, ForestError> {
        if params.n_trees == 0 {
            return Err(ForestError::InvalidParams("n_trees must be >= 1".into()));
        }
        if params.mtry == 0 || params.min_leaf == 0 {
            return Err(ForestError::InvalidParams(
                "min_leaf and mtry must be >= 1".into(),
            ));
        }
        let n = data.n_rows();
        if n == 0 {
            return Err(ForestError::EmptyTraining);
        }
        let vad = data.count(Label::Vad);
        if n < 2 || vad == 0 || vad == n {
            warn!("fitting a forest on {n} rows with {vad} VAD labels; both classes should be present");
        }

        let fitted: Vec<(TreeNode, Vec<bool>)> = (0..params.n_trees)
            .into_par_iter()
            .map(|t| -> Result<_, ForestError> {
                let mut rng = rng_for(seed, t as u64 + 1);
                let mut in_bag = vec![false; n];
                let sample: Vec<usize> = (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        in_bag[i] = true;
                        i
                    })
                    .collect();
                let tree = fit_tree(data, &sample, params, &mut rng)?;
                Ok((tree, in_bag))
            })
            .collect::<Result<_, _>>()?;

        let mut oob: Vec<OobTally> = data
            .labels()
            .iter()
            .map(|&label| OobTally {
                label,
                vad_votes: 0,
                not_vad_votes: 0,
            })
            .collect();
        let mut trees = Vec::with_capacity(fitted.len());
        for (tree, in_bag) in fitted {
            for (i, bagged) in in_bag.iter().enumerate() {
                if *bagged {
                    continue;
                }
                if tree.predict_proba(&data.rows()[i]) >= 0.5 {
                    oob[i].vad_votes += 1;
                } else {
                    oob[i].not_vad_votes += 1;
                }
            }
            trees.push(tree);
        }

        Ok(Forest {
            format_version: FOREST_FORMAT_VERSION,
            kind: None,
            params: *params,
            seed,
            feature_names: data.feature_names().to_vec(),
            feature_columns: data.columns().to_vec(),
            trees,
            oob,
        })
    }

    pub fn with_kind(mut self, kind: ParcelKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Mean leaf VAD fraction over trees, for a row in model-column space.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_proba(x)).sum();
        sum / self.trees.len() as f64
    }

    /// Projects the seven-feature vector onto this model's columns first.
    pub fn predict_features(&self, f: &FeatureVector) -> f64 {
        self.predict_proba(&f.project(&self.feature_columns))
    }

    /// VAD iff the probability reaches the threshold (ties go to VAD).
    pub fn classify(&self, x: &[f64], threshold: f64) -> Label {
        Label::from_vad(self.predict_proba(x) >= threshold)
    }

    /// Fraction of training rows whose OOB majority vote matches their label.
    /// Rows never out of bag are left out of the denominator.
    pub fn oob_score(&self) -> Result<f64, ForestError> {
        let (mut scored, mut correct) = (0usize, 0usize);
        for t in &self.oob {
            if let Some(vote) = t.majority() {
                scored += 1;
                if vote == t.label {
                    correct += 1;
                }
            }
        }
        if scored == 0 {
            return Err(ForestError::NoOobRows);
        }
        Ok(correct as f64 / scored as f64)
    }

    pub fn n_oob_rows(&self) -> usize {
        self.oob.iter().filter(|t| t.n_votes() > 0).count()
    }

    /// Thresholds used on a model column anywhere in the forest, sorted.
    pub fn thresholds_for(&self, feature: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .trees
            .iter()
            .flat_map(|t| t.splits())
            .filter(|(f, _)| *f == feature)
            .map(|(_, t)| t)
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    pub fn to_json(&self) -> Result<String, ForestError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ForestError> {
        let f: Forest = serde_json::from_str(s)?;
        if f.format_version != FOREST_FORMAT_VERSION {
            return Err(ForestError::UnsupportedVersion(f.format_version));
        }
        Ok(f)
    }
}

/// Fits a forest; see [`Forest::fit`].
pub fn fit_forest(data: &TrainingData, params: &ForestParams, seed: u64) -> Result<Forest, ForestError> {
    Forest::fit(data, params, seed)
}
