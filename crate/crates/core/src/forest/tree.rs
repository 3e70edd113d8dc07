use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ForestError, ForestParams, Label, TrainingData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Class counts of the rows that reached this node.
        vad_count: u32,
        total: u32,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        vad_count: u32,
        total: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafCounts {
    pub vad_count: u32,
    pub total: u32,
}

impl LeafCounts {
    pub fn vad_fraction(&self) -> f64 {
        f64::from(self.vad_count) / f64::from(self.total)
    }

    pub fn count_of(&self, label: Label) -> u32 {
        match label {
            Label::Vad => self.vad_count,
            Label::NotVad => self.total - self.vad_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub feature: usize,
    pub threshold: f64,
    pub went_left: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPath {
    pub steps: Vec<PathStep>,
    pub leaf: LeafCounts,
}

impl DecisionPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl TreeNode {
    pub fn counts(&self) -> LeafCounts {
        match self {
            TreeNode::Split {
                vad_count, total, ..
            }
            | TreeNode::Leaf { vad_count, total } => LeafCounts {
                vad_count: *vad_count,
                total: *total,
            },
        }
    }

    pub fn leaf_for(&self, x: &[f64]) -> LeafCounts {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { vad_count, total } => {
                    return LeafCounts {
                        vad_count: *vad_count,
                        total: *total,
                    }
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    /// Fraction of VAD rows in the leaf that `x` reaches.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        self.leaf_for(x).vad_fraction()
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => 1 + left.n_nodes() + right.n_nodes(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Every `(feature, threshold)` split in preorder.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.collect_splits(&mut out);
        out
    }

    fn collect_splits(&self, out: &mut Vec<(usize, f64)>) {
        if let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = self
        {
            out.push((*feature, *threshold));
            left.collect_splits(out);
            right.collect_splits(out);
        }
    }
}

/// The exact root-to-leaf route for `x`.
pub fn decision_path(tree: &TreeNode, x: &[f64]) -> DecisionPath {
    let mut steps = Vec::new();
    let mut node = tree;
    loop {
        match node {
            TreeNode::Leaf { vad_count, total } => {
                return DecisionPath {
                    steps,
                    leaf: LeafCounts {
                        vad_count: *vad_count,
                        total: *total,
                    },
                }
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let went_left = x[*feature] <= *threshold;
                steps.push(PathStep {
                    feature: *feature,
                    threshold: *threshold,
                    went_left,
                });
                node = if went_left { left } else { right };
            }
        }
    }
}

/// Score of a split as the rational `num / den`, where a larger value means
/// lower weighted child Gini: `(a²+b²)/nl + (c²+d²)/nr`.
#[derive(Clone, Copy)]
struct SplitScore {
    num: u128,
    den: u128,
}

impl SplitScore {
    fn new(vad_l: u64, n_l: u64, vad_r: u64, n_r: u64) -> Self {
        let sq = |a: u64, n: u64| u128::from(a * a + (n - a) * (n - a));
        let (sl, sr) = (sq(vad_l, n_l), sq(vad_r, n_r));
        SplitScore {
            num: sl * u128::from(n_r) + sr * u128::from(n_l),
            den: u128::from(n_l) * u128::from(n_r),
        }
    }

    fn cmp(&self, other: &SplitScore) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: SplitScore,
}

pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // adjacent floats can round the midpoint up onto b
    if m < b {
        m
    } else {
        a
    }
}

struct Builder<'a, R: Rng> {
    rows: &'a [Vec<f64>],
    labels: &'a [Label],
    params: ForestParams,
    mtry: usize,
    rng: &'a mut R,
}

impl<'a, R: Rng> Builder<'a, R> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> TreeNode {
        let total = idx.len() as u32;
        let vad_count = idx.iter().filter(|&&i| self.labels[i].is_vad()).count() as u32;
        let leaf = TreeNode::Leaf { vad_count, total };

        if vad_count == 0 || vad_count == total {
            return leaf;
        }
        if self.params.max_depth.is_some_and(|d| depth >= d) {
            return leaf;
        }
        if idx.len() < 2 * self.params.min_leaf {
            return leaf;
        }

        let Some(best) = self.best_split(idx, vad_count) else {
            return leaf;
        };

        let (feature, threshold) = (best.feature, best.threshold);
        let mut left: Vec<usize> = Vec::with_capacity(idx.len());
        let mut right: Vec<usize> = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if self.rows[i][feature] <= threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            vad_count,
            total,
            left: Box::new(self.build(&mut left, depth + 1)),
            right: Box::new(self.build(&mut right, depth + 1)),
        }
    }

    fn best_split(&mut self, idx: &[usize], vad_total: u32) -> Option<BestSplit> {
        let d = self.rows[idx[0]].len();
        // constant features are never candidates
        let mut candidates: Vec<usize> = (0..d)
            .filter(|&f| {
                let first = self.rows[idx[0]][f];
                idx.iter().any(|&i| self.rows[i][f] != first)
            })
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let take = self.mtry.min(candidates.len());
        for k in 0..take {
            let j = self.rng.random_range(k..candidates.len());
            candidates.swap(k, j);
        }
        let mut chosen = candidates[..take].to_vec();
        chosen.sort_unstable();

        let n = idx.len() as u64;
        let vad_total = u64::from(vad_total);
        let min_leaf = self.params.min_leaf as u64;
        let mut best: Option<BestSplit> = None;
        let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(idx.len());
        for &f in &chosen {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.rows[i][f], self.labels[i].is_vad())));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut vad_l = 0u64;
            for k in 0..pairs.len() - 1 {
                if pairs[k].1 {
                    vad_l += 1;
                }
                let (a, b) = (pairs[k].0, pairs[k + 1].0);
                if a == b {
                    continue;
                }
                let n_l = k as u64 + 1;
                let n_r = n - n_l;
                if n_l < min_leaf || n_r < min_leaf {
                    continue;
                }
                let score = SplitScore::new(vad_l, n_l, vad_total - vad_l, n_r);
                let better = match &best {
                    None => true,
                    Some(b) => score.cmp(&b.score) == Ordering::Greater,
                };
                if better {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: midpoint(a, b),
                        score,
                    });
                }
            }
        }
        best
    }
}

/// Grows one CART tree on the rows at `sample` (indices may repeat, as in a
/// bootstrap sample).
pub fn fit_tree<R: Rng>(
    data: &TrainingData,
    sample: &[usize],
    params: &ForestParams,
    rng: &mut R,
) -> Result<TreeNode, ForestError> {
    if sample.is_empty() {
        return Err(ForestError::EmptyTraining);
    }
    if params.min_leaf == 0 || params.mtry == 0 {
        return Err(ForestError::InvalidParams(
            "min_leaf and mtry must be >= 1".into(),
        ));
    }
    let mut idx = sample.to_vec();
    let mut builder = Builder {
        rows: data.rows(),
        labels: data.labels(),
        params: *params,
        mtry: params.mtry.min(data.n_features()).max(1),
        rng,
    };
    Ok(builder.build(&mut idx, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn data(rows: Vec<Vec<f64>>, labels: &[bool]) -> TrainingData {
        TrainingData::new(rows, labels.iter().map(|&v| Label::from_vad(v)).collect()).unwrap()
    }

    fn fit(d: &TrainingData, params: ForestParams) -> TreeNode {
        let all: Vec<usize> = (0..d.n_rows()).collect();
        fit_tree(d, &all, &params, &mut rng_for(1, 0)).unwrap()
    }

    fn full(n_features: usize) -> ForestParams {
        ForestParams::audit_tree(n_features)
    }

    #[test]
    fn separable_four_rows_split_at_five() {
        let d = data(
            vec![vec![1.0], vec![2.0], vec![8.0], vec![9.0]],
            &[false, false, true, true],
        );
        let t = fit(&d, full(1));
        match &t {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 5.0);
                assert_eq!(**left, TreeNode::Leaf { vad_count: 0, total: 2 });
                assert_eq!(**right, TreeNode::Leaf { vad_count: 2, total: 2 });
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn single_label_is_one_leaf() {
        let d = data(vec![vec![1.0], vec![2.0], vec![3.0]], &[true, true, true]);
        assert_eq!(fit(&d, full(1)), TreeNode::Leaf { vad_count: 3, total: 3 });
    }

    #[test]
    fn identical_rows_opposite_labels_irreducible() {
        let d = data(vec![vec![4.0, 4.0], vec![4.0, 4.0]], &[true, false]);
        assert_eq!(fit(&d, full(2)), TreeNode::Leaf { vad_count: 1, total: 2 });
    }

    #[test]
    fn max_depth_binds() {
        let d = data(
            vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            &[true, false, true, false],
        );
        let mut p = full(1);
        p.max_depth = Some(1);
        assert_eq!(fit(&d, p).depth(), 1);
        p.max_depth = Some(0);
        assert_eq!(fit(&d, p), TreeNode::Leaf { vad_count: 2, total: 4 });
    }

    #[test]
    fn min_leaf_respected() {
        let d = data(
            vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]],
            &[true, false, false, false, false],
        );
        let mut p = full(1);
        p.min_leaf = 2;
        let t = fit(&d, p);
        fn check(n: &TreeNode) {
            match n {
                TreeNode::Leaf { total, .. } => assert!(*total >= 2),
                TreeNode::Split { left, right, .. } => {
                    check(left);
                    check(right);
                }
            }
        }
        check(&t);
    }

    #[test]
    fn tie_goes_to_lowest_feature() {
        // both columns separate perfectly at the same place
        let d = data(
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0], vec![6.0, 6.0]],
            &[false, false, true, true],
        );
        let t = fit(&d, full(2));
        assert_eq!(t.splits()[0], (0, 3.0));
    }

    #[test]
    fn never_splits_constant_feature() {
        let d = data(
            vec![vec![7.0, 1.0], vec![7.0, 2.0], vec![7.0, 3.0], vec![7.0, 4.0]],
            &[false, true, false, true],
        );
        for seed in 0..20 {
            let all: Vec<usize> = (0..4).collect();
            let p = ForestParams { mtry: 1, ..full(2) };
            let t = fit_tree(&d, &all, &p, &mut rng_for(seed, 3)).unwrap();
            assert!(t.splits().iter().all(|(f, _)| *f == 1));
        }
    }

    #[test]
    fn decision_path_depth_two_left_left() {
        let leaf = |v, t| Box::new(TreeNode::Leaf { vad_count: v, total: t });
        let tree = TreeNode::Split {
            feature: 0,
            threshold: 5.0,
            vad_count: 3,
            total: 6,
            left: Box::new(TreeNode::Split {
                feature: 1,
                threshold: 2.0,
                vad_count: 1,
                total: 3,
                left: leaf(0, 2),
                right: leaf(1, 1),
            }),
            right: leaf(2, 3),
        };
        let p = decision_path(&tree, &[1.0, 1.0]);
        assert_eq!(p.len(), 2);
        assert!(p.steps.iter().all(|s| s.went_left));
        assert_eq!(p.leaf, tree.leaf_for(&[1.0, 1.0]));
        assert_eq!(p.leaf, LeafCounts { vad_count: 0, total: 2 });
        let leaf_only = TreeNode::Leaf { vad_count: 1, total: 1 };
        assert!(decision_path(&leaf_only, &[0.0, 0.0]).is_empty());
    }

    #[test]
    fn midpoint_never_reaches_upper_value() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a <= m && m < b);
    }
}
