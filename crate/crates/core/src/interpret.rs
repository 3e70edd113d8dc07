//! Drop-column importance over feature groups, and partial dependence.

use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DELINQUENT_TAX, DELINQUENT_YEARS, FEATURE_NAMES, N_FEATURES};
use crate::forest::{cross_validate, Forest, ForestError, ForestParams, TrainingData};
use crate::util::quantile_sorted;

pub const DEFAULT_GRID_POINTS: usize = 20;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("need at least three feature groups so two remain after a drop, got {0}")]
    TooFewFeatures(usize),
    #[error("feature groups must partition columns 0..{n}: {reason}")]
    BadGroups { n: usize, reason: String },
    #[error("empty partial dependence grid")]
    EmptyGrid,
    #[error("feature index {index} out of range for {n} model columns")]
    BadFeature { index: usize, n: usize },
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Named set of model-column positions dropped together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub members: Vec<usize>,
}

impl FeatureGroup {
    pub fn new(name: impl Into<String>, members: Vec<usize>) -> Self {
        FeatureGroup {
            name: name.into(),
            members,
        }
    }
}

/// The seven-feature grouping: tax dollars and delinquent years are one
/// group, everything else stands alone.
pub fn default_groups() -> Vec<FeatureGroup> {
    let mut out = Vec::new();
    for j in 0..N_FEATURES {
        if j == DELINQUENT_YEARS {
            continue;
        }
        if j == DELINQUENT_TAX {
            out.push(FeatureGroup::new(
                format!("{}+{}", FEATURE_NAMES[DELINQUENT_TAX], FEATURE_NAMES[DELINQUENT_YEARS]),
                vec![DELINQUENT_TAX, DELINQUENT_YEARS],
            ));
        } else {
            out.push(FeatureGroup::new(FEATURE_NAMES[j], vec![j]));
        }
    }
    out
}

/// Groups for a dataset's columns: the default pairing where both tax
/// columns are present, singletons otherwise.
pub fn groups_for(data: &TrainingData) -> Vec<FeatureGroup> {
    let cols = data.columns();
    let pos = |src: usize| cols.iter().position(|&c| c == src);
    let paired = match (pos(DELINQUENT_TAX), pos(DELINQUENT_YEARS)) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let mut out = Vec::new();
    for (j, name) in data.feature_names().iter().enumerate() {
        match paired {
            Some((_, b)) if j == b => {}
            Some((a, b)) if j == a => out.push(FeatureGroup::new(
                format!("{}+{}", name, data.feature_names()[b]),
                vec![a, b],
            )),
            _ => out.push(FeatureGroup::new(name.clone(), vec![j])),
        }
    }
    out
}

fn check_partition(groups: &[FeatureGroup], n: usize) -> Result<(), InterpretError> {
    let mut seen = vec![false; n];
    for g in groups {
        if g.members.is_empty() {
            return Err(InterpretError::BadGroups {
                n,
                reason: format!("group {} is empty", g.name),
            });
        }
        for &m in &g.members {
            if m >= n || seen[m] {
                return Err(InterpretError::BadGroups {
                    n,
                    reason: format!("column {m} is out of range or repeated"),
                });
            }
            seen[m] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(InterpretError::BadGroups {
            n,
            reason: format!("column {missing} belongs to no group"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub name: String,
    pub members: Vec<String>,
    pub dropped_cv_mean: f64,
    pub dropped_folds: Vec<f64>,
    /// Baseline minus dropped; negative when the drop helps.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub baseline_cv_mean: f64,
    pub baseline_folds: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    pub groups: Vec<GroupImportance>,
}

impl ImportanceReport {
    /// Group names by descending delta; ties by name.
    pub fn ranking(&self) -> Vec<&str> {
        let mut g: Vec<&GroupImportance> = self.groups.iter().collect();
        g.sort_by(|a, b| b.delta.total_cmp(&a.delta).then_with(|| a.name.cmp(&b.name)));
        g.into_iter().map(|g| g.name.as_str()).collect()
    }

    pub fn group(&self, name: &str) -> Option<&GroupImportance> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), InterpretError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "members", "baseline_cv_mean", "dropped_cv_mean", "delta"])?;
        for g in &self.groups {
            out.write_record([
                g.name.clone(),
                g.members.join(";"),
                self.baseline_cv_mean.to_string(),
                g.dropped_cv_mean.to_string(),
                g.delta.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Retrains `k`-fold CV once per group with that group's columns removed.
/// Every run shares the baseline's fold assignment and forest seeds, so the
/// deltas are paired comparisons.
pub fn drop_column_importance(
    data: &TrainingData,
    params: &ForestParams,
    groups: &[FeatureGroup],
    k: usize,
    seed: u64,
) -> Result<ImportanceReport, InterpretError> {
    if groups.len() < 3 {
        return Err(InterpretError::TooFewFeatures(groups.len()));
    }
    check_partition(groups, data.n_features())?;
    let baseline = cross_validate(data, k, params, seed)?;
    let results: Vec<GroupImportance> = groups
        .par_iter()
        .map(|g| -> Result<GroupImportance, InterpretError> {
            let reduced = data.without_columns(&g.members)?;
            let cv = cross_validate(&reduced, k, params, seed)?;
            Ok(GroupImportance {
                name: g.name.clone(),
                members: g.members.iter().map(|&m| data.feature_names()[m].clone()).collect(),
                dropped_cv_mean: cv.mean,
                delta: baseline.mean - cv.mean,
                dropped_folds: cv.folds,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ImportanceReport {
        baseline_cv_mean: baseline.mean,
        baseline_folds: baseline.folds,
        k,
        seed,
        groups: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDependenceCurve {
    pub feature: usize,
    pub feature_name: String,
    pub grid: Vec<f64>,
    pub mean_proba: Vec<f64>,
}

impl PartialDependenceCurve {
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), InterpretError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["feature", "value", "mean_proba"])?;
        for (v, p) in self.grid.iter().zip(&self.mean_proba) {
            out.write_record([self.feature_name.clone(), v.to_string(), p.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// `points` evenly spaced quantiles of the column, deduplicated.
pub fn quantile_grid(rows: &[Vec<f64>], feature: usize, points: usize) -> Vec<f64> {
    let mut col: Vec<f64> = rows.iter().map(|r| r[feature]).collect();
    if col.is_empty() || points == 0 {
        return Vec::new();
    }
    col.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = if points == 1 {
        vec![quantile_sorted(&col, 0.5)]
    } else {
        (0..points)
            .map(|i| quantile_sorted(&col, i as f64 / (points - 1) as f64))
            .collect()
    };
    grid.dedup();
    grid
}

/// Mean forest probability over `rows` with `feature` pinned to each grid
/// value. Rows are in the forest's model-column space. Without an explicit
/// grid, 20 quantiles of the rows' column are used. Explicit grids are
/// sorted and deduplicated.
pub fn partial_dependence(
    forest: &Forest,
    rows: &[Vec<f64>],
    feature: usize,
    grid: Option<&[f64]>,
) -> Result<PartialDependenceCurve, InterpretError> {
    let n = forest.n_features();
    if feature >= n {
        return Err(InterpretError::BadFeature { index: feature, n });
    }
    let grid: Vec<f64> = match grid {
        Some(g) => {
            let mut g: Vec<f64> = g.iter().copied().filter(|v| v.is_finite()).collect();
            g.sort_by(f64::total_cmp);
            g.dedup();
            g
        }
        None => quantile_grid(rows, feature, DEFAULT_GRID_POINTS),
    };
    if grid.is_empty() || rows.is_empty() {
        return Err(InterpretError::EmptyGrid);
    }
    let mean_proba = grid
        .par_iter()
        .map(|&v| {
            let mut x = Vec::with_capacity(n);
            let mut sum = 0.0;
            for r in rows {
                x.clear();
                x.extend_from_slice(r);
                x[feature] = v;
                sum += forest.predict_proba(&x);
            }
            sum / rows.len() as f64
        })
        .collect();
    Ok(PartialDependenceCurve {
        feature,
        feature_name: forest.feature_names[feature].clone(),
        grid,
        mean_proba,
    })
}
