use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Forest, ForestError, ForestParams, Label, TrainingData};
use crate::util::{mean, mix_seed, rng_for};

/// Stream id for fold shuffling, kept apart from the per-tree streams.
const FOLD_STREAM: u64 = 0xF01D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub mean: f64,
    pub folds: Vec<f64>,
    /// Fold index of every row.
    pub assignment: Vec<usize>,
}

/// Stratified fold assignment: each class is shuffled with a seed-derived
/// stream and dealt round-robin, so per-fold class counts differ by at most one.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>, ForestError> {
    if k < 2 {
        return Err(ForestError::InvalidParams(format!("k must be >= 2, got {k}")));
    }
    let mut rng = rng_for(seed, FOLD_STREAM);
    let mut assignment = vec![0usize; labels.len()];
    let mut dealt = 0usize;
    for class in [Label::Vad, Label::NotVad] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(ForestError::TooFewRowsPerClass {
                label: class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(assignment)
}

fn accuracy(forest: &Forest, data: &TrainingData, rows: &[usize]) -> f64 {
    let correct = rows
        .iter()
        .filter(|&&i| forest.classify(&data.rows()[i], 0.5) == data.labels()[i])
        .count();
    correct as f64 / rows.len() as f64
}

/// Stratified k-fold accuracy. Fold `f` trains with seed `mix_seed(seed, f)`;
/// the fold assignment depends only on labels and `seed`, so runs on
/// different column subsets of the same rows are paired.
pub fn cross_validate(
    data: &TrainingData,
    k: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<CvReport, ForestError> {
    let assignment = stratified_folds(data.labels(), k, seed)?;
    let folds: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..data.n_rows()).partition(|&i| assignment[i] == fold);
            let forest = Forest::fit(&data.subset(&train)?, params, mix_seed(seed, fold as u64))?;
            Ok(accuracy(&forest, data, &test))
        })
        .collect::<Result<_, ForestError>>()?;
    Ok(CvReport {
        k,
        mean: mean(&folds),
        folds,
        assignment,
    })
}
