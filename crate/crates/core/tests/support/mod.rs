//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance target.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vadecide_core::domain::{Dataset, ParcelId, ParcelKind};
use vadecide_core::evaluate::{external_consensus, Method, Validation};
use vadecide_core::forest::{Label, TrainingData, TreeNode};
use vadecide_core::session::{Session, SessionConfig, SessionError, TrainedModels};
use vadecide_core::synth::{generate_city, scripted_annotator, CityConfig, GroundTruth, Persona};

pub fn at(s: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(1_600_000_000 + s, 0).unwrap()
}

/// Exact rational `num / den` with `den > 0`.
#[derive(Clone, Copy, Debug)]
struct Ratio {
    num: i128,
    den: i128,
}

impl Ratio {
    fn new(num: i128, den: i128) -> Self {
        Ratio { num, den }
    }
    fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
    fn lt(self, o: Ratio) -> bool {
        self.num * o.den < o.num * self.den
    }
}

/// Gini impurity of a node times its size: `n * (1 - p² - q²)`.
fn weighted_gini(vad: i128, n: i128) -> Ratio {
    let not = n - vad;
    Ratio::new(n * n - vad * vad - not * not, n)
}

/// Brute-force CART over every (feature, midpoint) candidate, in
/// feature-then-threshold order, keeping the first strict minimum of the
/// summed child impurity.
pub fn oracle_tree(rows: &[Vec<f64>], labels: &[bool], idx: &[usize], depth: usize, max_depth: Option<usize>) -> TreeNode {
    let total = idx.len() as u32;
    let vad_count = idx.iter().filter(|&&i| labels[i]).count() as u32;
    let leaf = TreeNode::Leaf { vad_count, total };
    if vad_count == 0 || vad_count == total || max_depth.is_some_and(|d| depth >= d) {
        return leaf;
    }
    let d = rows[0].len();
    let mut best: Option<(usize, f64, Ratio)> = None;
    for f in 0..d {
        let mut values: Vec<f64> = idx.iter().map(|&i| rows[i][f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (mut nl, mut vl, mut nr, mut vr) = (0i128, 0i128, 0i128, 0i128);
            for &i in idx {
                if rows[i][f] <= t {
                    nl += 1;
                    vl += i128::from(labels[i]);
                } else {
                    nr += 1;
                    vr += i128::from(labels[i]);
                }
            }
            let score = weighted_gini(vl, nl).add(weighted_gini(vr, nr));
            if best.is_none_or(|(_, _, b)| score.lt(b)) {
                best = Some((f, t, score));
            }
        }
    }
    let Some((feature, threshold, _)) = best else {
        return leaf;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][feature] <= threshold);
    TreeNode::Split {
        feature,
        threshold,
        vad_count,
        total,
        left: Box::new(oracle_tree(rows, labels, &l, depth + 1, max_depth)),
        right: Box::new(oracle_tree(rows, labels, &r, depth + 1, max_depth)),
    }
}

/// Preorder (feature, threshold) sequence of a tree.
pub fn split_sequence(t: &TreeNode) -> Vec<(usize, f64)> {
    t.splits()
}

/// A small random dataset for the CART oracle: up to 12 rows, two features
/// with values on a coarse grid so ties and duplicate rows are common.
pub fn random_small_dataset(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
    let n = rng.random_range(1..=12);
    let levels = rng.random_range(2..=6);
    let rows = (0..n)
        .map(|_| {
            (0..2)
                .map(|_| f64::from(rng.random_range(0..levels)) * 0.5)
                .collect()
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_bool(0.5)).collect();
    (rows, labels)
}

pub fn to_training(rows: &[Vec<f64>], labels: &[bool]) -> TrainingData {
    TrainingData::new(rows.to_vec(), labels.iter().map(|&v| Label::from_vad(v)).collect()).unwrap()
}

/// Full sort by distance from 0.5, ties by ascending id.
pub fn uncertainty_oracle(scored: &BTreeMap<ParcelId, f64>, n: usize) -> Vec<ParcelId> {
    let mut all: Vec<(&ParcelId, f64)> = scored.iter().map(|(id, p)| (id, (p - 0.5).abs())).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    all.into_iter().take(n).map(|(id, _)| id.clone()).collect()
}

/// One informative column, three noise columns and one constant column.
/// The label follows column 0 with 10% flips.
pub fn planted_dataset(seed: u64, n: usize) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x0: f64 = rng.random();
        let mut vad = x0 > 0.5;
        if rng.random_bool(0.1) {
            vad = !vad;
        }
        rows.push(vec![x0, rng.random(), rng.random(), rng.random(), 1.0]);
        labels.push(Label::from_vad(vad));
    }
    TrainingData::new(rows, labels).unwrap()
}

pub fn split(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(a, n)| (a.to_string(), *n)).collect()
}

/// Consensus with planted truth, per kind, for the HITL model and the
/// simple-ML baseline after a 3-round oracle-labeled session.
#[derive(Debug, Clone)]
pub struct HitlOutcome {
    pub hitl: BTreeMap<ParcelKind, f64>,
    pub baseline: BTreeMap<ParcelKind, f64>,
    pub labels: usize,
    /// Every snapshot's models, by snapshot id.
    pub models: BTreeMap<String, TrainedModels>,
}

impl HitlOutcome {
    pub fn hitl_wins(&self) -> bool {
        ParcelKind::ALL
            .iter()
            .all(|k| self.hitl.get(k).zip(self.baseline.get(k)).is_some_and(|(h, b)| h > b))
    }
}

pub fn default_city() -> (Arc<Dataset>, GroundTruth) {
    let (ds, truth) = generate_city(&CityConfig::default()).unwrap();
    (Arc::new(ds), truth)
}

/// Three rounds of 100 oracle labels, retraining after each round.
pub fn run_hitl(ds: &Arc<Dataset>, truth: &GroundTruth, seed: u64) -> Result<(Session, HitlOutcome), SessionError> {
    let cfg = SessionConfig {
        seed,
        ..SessionConfig::default()
    };
    let mut s = Session::create("hitl", "city", ds, cfg, at(0))?;
    let oracle = Persona::oracle("oracle");
    let mut models = BTreeMap::new();
    for round in 1..=3i64 {
        let r = s.request_batch(ds, 100, None, &split(&[("oracle", 100)]), at(round * 10))?.clone();
        let recs = scripted_annotator(&r.batch.parcel_ids, truth, &oracle, r.round, at(round * 10 + 1), seed);
        s.submit_labels(ds, recs, at(round * 10 + 2))?;
        s.retrain(ds.clone(), false, at(round * 10 + 3))?;
        let m = s.models().expect("retrained");
        models.insert(m.snapshot_id.clone(), (**m).clone());
    }
    let results = s.method_results(ds, &[])?;
    let vad = truth.vad_ids();
    let mut out = HitlOutcome {
        hitl: BTreeMap::new(),
        baseline: BTreeMap::new(),
        labels: s.log.effective_labels().len(),
        models,
    };
    for r in &results {
        let scope = r.universe.as_ref();
        let c = external_consensus(&r.output_ids, &vad, scope)?;
        match r.method {
            Method::Vadecide => out.hitl.insert(r.kind, c),
            Method::SimpleMl => out.baseline.insert(r.kind, c),
            Method::CityWorkflow => None,
        };
    }
    Ok((s, out))
}

pub fn truth_validation(truth: &GroundTruth) -> Validation {
    Validation::new("ground_truth", truth.vad_ids())
}

/// A comment with the characters CSV quoting has to survive.
pub fn tricky_comment(i: usize) -> String {
    match i % 5 {
        0 => String::new(),
        1 => format!("boarded, roof gone #{i}"),
        2 => format!("owner said \"sold\", {i}"),
        3 => format!("line one\nline two, {i}"),
        _ => format!("  padded ,\"\" {i} "),
    }
}

pub fn ids_of(ds: &Dataset, n: usize) -> Vec<ParcelId> {
    ds.parcels.iter().take(n).map(|p| p.id.clone()).collect()
}

pub fn set<T: Ord + Clone>(xs: &[T]) -> BTreeSet<T> {
    xs.iter().cloned().collect()
}
