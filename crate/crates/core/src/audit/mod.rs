//! Label auditing.
//!
//! Two detectors surface labels worth an expert discussion. Isolation
//! analysis fits one explainable tree per parcel kind on the labeled rows and
//! flags a label that the tree had to carve out from a large opposite-label
//! group through several splits. Disagreement detection pairs opposite labels
//! whose feature vectors are nearly identical. Resolutions are appended to the
//! label log so the original judgments stay on record.

mod export;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ParcelId, ParcelKind};
use crate::forest::{fit_tree, DecisionPath, ForestError, ForestParams, Label, LeafCounts, PathStep, TrainingData, TreeNode};
use crate::labels::{LabelLog, LabelRecord, Provenance};
use crate::util::{euclidean, Standardizer};

pub use export::{export_tree, import_tree, AuditTreeExport, ExportNode};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("conflict {0} is already resolved")]
    AlreadyResolved(String),
    #[error("unknown conflict {0}")]
    UnknownConflict(String),
    #[error("malformed tree export: {0}")]
    MalformedExport(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConflictKind {
    Isolation,
    Disagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConflictStatus {
    Open,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub final_label: Label,
    pub rationale: String,
    pub resolver_id: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelPath {
    pub parcel_id: ParcelId,
    pub path: DecisionPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceLabel {
    pub parcel_id: ParcelId,
    pub annotator_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub paths: Vec<ParcelPath>,
    pub labels: Vec<EvidenceLabel>,
    pub distance: Option<f64>,
    /// Largest opposite-label count in a sibling subtree along the path.
    pub opposite_mass: Option<u32>,
    /// Rows in the leaf sharing the flagged label, the flagged row included.
    pub leaf_allies: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictItem {
    pub conflict_id: String,
    /// Natural key, stable across audits: `iso:{parcel}` or
    /// `dis:{parcel}/{annotator}|{parcel}/{annotator}`.
    pub key: String,
    pub kind: ConflictKind,
    pub parcel_ids: Vec<ParcelId>,
    pub parcel_kind: Option<ParcelKind>,
    pub evidence: Evidence,
    pub isolation_score: f64,
    pub status: ConflictStatus,
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolationConfig {
    pub min_depth: usize,
    pub max_leaf_allies: u32,
    pub min_opposite_mass: u32,
}

impl Default for IsolationConfig {
    fn default() -> Self {
        IsolationConfig {
            min_depth: 3,
            max_leaf_allies: 2,
            min_opposite_mass: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub isolation: IsolationConfig,
    /// Disagreement radius in standardized L2 distance.
    pub eps: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            isolation: IsolationConfig::default(),
            eps: 0.5,
        }
    }
}

/// A labeled row in model-column space.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub parcel_id: ParcelId,
    pub label: Label,
    pub x: Vec<f64>,
}

/// The single explainable tree: every feature at every split, no bootstrap.
pub fn fit_audit_tree(data: &TrainingData) -> Result<TreeNode, ForestError> {
    let params = ForestParams::audit_tree(data.n_features());
    let sample: Vec<usize> = (0..data.n_rows()).collect();
    let mut rng = crate::util::rng_for(0, 0);
    fit_tree(data, &sample, &params, &mut rng)
}

struct Route {
    path: DecisionPath,
    /// Counts of the sibling subtree at each split along the path.
    siblings: Vec<LeafCounts>,
}

fn route(tree: &TreeNode, x: &[f64]) -> Route {
    let mut steps = Vec::new();
    let mut siblings = Vec::new();
    let mut node = tree;
    loop {
        match node {
            TreeNode::Leaf { vad_count, total } => {
                return Route {
                    path: DecisionPath {
                        steps,
                        leaf: LeafCounts {
                            vad_count: *vad_count,
                            total: *total,
                        },
                    },
                    siblings,
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
                let (next, other) = if went_left { (left, right) } else { (right, left) };
                siblings.push(other.counts());
                node = next;
            }
        }
    }
}

/// Flags labels the tree isolated from a large opposite-label group.
///
/// A row is flagged when its path has at least `min_depth` splits, its leaf
/// holds at most `max_leaf_allies` rows of its label, and some sibling
/// subtree along the path holds at least `min_opposite_mass` rows of the
/// opposite label. A row whose label is the majority of a leaf larger than
/// `max_leaf_allies` is never flagged. Results are ordered by descending
/// score, then parcel id.
pub fn flag_isolated_labels(tree: &TreeNode, rows: &[AuditRow], cfg: &IsolationConfig) -> Vec<ConflictItem> {
    let mut out = Vec::new();
    for row in rows {
        let r = route(tree, &row.x);
        let len = r.path.len();
        let leaf = r.path.leaf;
        let allies = leaf.count_of(row.label);
        let majority = 2 * allies >= leaf.total;
        if len < cfg.min_depth || allies > cfg.max_leaf_allies {
            continue;
        }
        if majority && leaf.total > cfg.max_leaf_allies {
            continue;
        }
        let opposite = row.label.opposite();
        let mass = r.siblings.iter().map(|c| c.count_of(opposite)).max().unwrap_or(0);
        if mass < cfg.min_opposite_mass {
            continue;
        }
        let score = len as f64 * (f64::from(mass) / f64::from(allies + 1));
        out.push(ConflictItem {
            conflict_id: format!("iso:{}", row.parcel_id),
            key: format!("iso:{}", row.parcel_id),
            kind: ConflictKind::Isolation,
            parcel_ids: vec![row.parcel_id.clone()],
            parcel_kind: None,
            evidence: Evidence {
                paths: vec![ParcelPath {
                    parcel_id: row.parcel_id.clone(),
                    path: r.path,
                }],
                labels: Vec::new(),
                distance: None,
                opposite_mass: Some(mass),
                leaf_allies: Some(allies),
            },
            isolation_score: score,
            status: ConflictStatus::Open,
            resolution: None,
        });
    }
    out.sort_by(|a, b| {
        b.isolation_score
            .total_cmp(&a.isolation_score)
            .then_with(|| a.parcel_ids.cmp(&b.parcel_ids))
    });
    out
}

/// One standing label to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPoint {
    pub parcel_id: ParcelId,
    pub annotator_id: String,
    pub label: Label,
    pub x: Vec<f64>,
}

/// Every unordered pair of opposite labels within `eps` of each other after
/// standardization. Pairs are reported once, in input order.
pub fn flag_disagreements(points: &[LabelPoint], scale: &Standardizer, eps: f64) -> Vec<ConflictItem> {
    let z: Vec<Vec<f64>> = points.iter().map(|p| scale.transform(&p.x)).collect();
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (a, b) = (&points[i], &points[j]);
            if a.label == b.label {
                continue;
            }
            let d = euclidean(&z[i], &z[j]);
            if d > eps {
                continue;
            }
            let (first, second) = if (&a.parcel_id, &a.annotator_id) <= (&b.parcel_id, &b.annotator_id) {
                (a, b)
            } else {
                (b, a)
            };
            let key = format!(
                "dis:{}/{}|{}/{}",
                first.parcel_id, first.annotator_id, second.parcel_id, second.annotator_id
            );
            out.push(ConflictItem {
                conflict_id: key.clone(),
                key,
                kind: ConflictKind::Disagreement,
                parcel_ids: vec![first.parcel_id.clone(), second.parcel_id.clone()],
                parcel_kind: None,
                evidence: Evidence {
                    paths: Vec::new(),
                    labels: [first, second]
                        .iter()
                        .map(|p| EvidenceLabel {
                            parcel_id: p.parcel_id.clone(),
                            annotator_id: p.annotator_id.clone(),
                            label: p.label,
                        })
                        .collect(),
                    distance: Some(d),
                    opposite_mass: None,
                    leaf_allies: None,
                },
                isolation_score: 0.0,
                status: ConflictStatus::Open,
                resolution: None,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRequest {
    pub final_label: Label,
    pub rationale: String,
    pub resolver_id: String,
}

/// Settles an open conflict: appends one resolution record per distinct
/// parcel and marks the conflict resolved. Earlier records stay in the log.
pub fn apply_resolution(
    conflicts: &mut BTreeMap<String, ConflictItem>,
    log: &mut LabelLog,
    conflict_id: &str,
    req: &ResolutionRequest,
    round: u32,
    timestamp: DateTime<Utc>,
) -> Result<Vec<LabelRecord>, AuditError> {
    let item = conflicts
        .get_mut(conflict_id)
        .ok_or_else(|| AuditError::UnknownConflict(conflict_id.to_string()))?;
    if item.status == ConflictStatus::Resolved {
        return Err(AuditError::AlreadyResolved(conflict_id.to_string()));
    }
    let mut parcels = item.parcel_ids.clone();
    parcels.dedup();
    let mut written = Vec::new();
    for p in parcels {
        let mut rec = LabelRecord::new(p, req.resolver_id.clone(), req.final_label, round, timestamp, Provenance::Resolution)
            .with_comment(req.rationale.clone());
        rec.resolves = Some(conflict_id.to_string());
        written.push(log.append(rec).clone());
    }
    item.status = ConflictStatus::Resolved;
    item.resolution = Some(Resolution {
        final_label: req.final_label,
        rationale: req.rationale.clone(),
        resolver_id: req.resolver_id.clone(),
        timestamp,
    });
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn cluster(lone: Label) -> (TrainingData, Vec<AuditRow>) {
        let mut xs: Vec<f64> = vec![1.0, 2.0];
        xs.extend((4..=31).map(f64::from));
        let mut rows: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let mut labels = vec![Label::NotVad; rows.len()];
        rows.push(vec![3.0]);
        labels.push(lone);
        let audit = rows
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (x, l))| AuditRow {
                parcel_id: ParcelId::new(format!("P{i:02}")),
                label: *l,
                x: x.clone(),
            })
            .collect();
        (TrainingData::new(rows, labels).unwrap(), audit)
    }

    #[test]
    fn lone_vad_inside_cluster_is_flagged() {
        let (data, rows) = cluster(Label::Vad);
        let tree = fit_audit_tree(&data).unwrap();
        let cfg = IsolationConfig {
            min_depth: 2,
            ..Default::default()
        };
        let flags = flag_isolated_labels(&tree, &rows, &cfg);
        assert_eq!(flags.len(), 1);
        let f = &flags[0];
        assert_eq!(f.parcel_ids, vec![ParcelId::from("P30")]);
        let path = &f.evidence.paths[0].path;
        assert_eq!(path.len(), 2);
        assert_eq!((path.steps[0].threshold, path.steps[1].threshold), (3.5, 2.5));
        assert_eq!(f.evidence.opposite_mass, Some(28));
        assert_eq!(f.isolation_score, 2.0 * 28.0 / 2.0);
        // the default depth of 3 is not reached
        assert!(flag_isolated_labels(&tree, &rows, &IsolationConfig::default()).is_empty());
    }

    #[test]
    fn homogeneous_cluster_has_no_flags() {
        let (data, rows) = cluster(Label::NotVad);
        let tree = fit_audit_tree(&data).unwrap();
        assert_eq!(tree.n_nodes(), 1);
        let cfg = IsolationConfig {
            min_depth: 0,
            ..Default::default()
        };
        assert!(flag_isolated_labels(&tree, &rows, &cfg).is_empty());
    }

    fn pt(id: &str, who: &str, label: Label, x: Vec<f64>) -> LabelPoint {
        LabelPoint {
            parcel_id: ParcelId::from(id),
            annotator_id: who.into(),
            label,
            x,
        }
    }

    #[test]
    fn disagreement_examples() {
        let id = Standardizer::identity(2);
        let same = [pt("A", "x", Label::Vad, vec![1.0, 1.0]), pt("B", "y", Label::NotVad, vec![1.0, 1.0])];
        let f = flag_disagreements(&same, &id, 0.5);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].evidence.distance, Some(0.0));

        let agree = [pt("A", "x", Label::Vad, vec![1.0, 1.0]), pt("B", "y", Label::Vad, vec![1.0, 1.0])];
        assert!(flag_disagreements(&agree, &id, 0.5).is_empty());

        let far = [pt("A", "x", Label::Vad, vec![0.0, 0.0]), pt("B", "y", Label::NotVad, vec![0.0, 1.5])];
        assert!(flag_disagreements(&far, &id, 1.0).is_empty());
        assert_eq!(flag_disagreements(&far, &id, 1.5).len(), 1);
    }

    #[test]
    fn resolution_is_append_only() {
        let t0 = Utc.timestamp_opt(1_600_000_000, 0).unwrap();
        let mut log = LabelLog::new();
        log.append(LabelRecord::new("A".into(), "x", Label::Vad, 1, t0, Provenance::Expert));
        log.append(LabelRecord::new("B".into(), "y", Label::NotVad, 1, t0, Provenance::Expert));
        let before = log.records().to_vec();
        let pts = [pt("A", "x", Label::Vad, vec![1.0]), pt("B", "y", Label::NotVad, vec![1.0])];
        let mut book: BTreeMap<String, ConflictItem> = flag_disagreements(&pts, &Standardizer::identity(1), 0.5)
            .into_iter()
            .map(|c| (c.conflict_id.clone(), c))
            .collect();
        let cid = book.keys().next().unwrap().clone();
        let req = ResolutionRequest {
            final_label: Label::Vad,
            rationale: "roof collapsed, see photos".into(),
            resolver_id: "lead".into(),
        };
        let written = apply_resolution(&mut book, &mut log, &cid, &req, 1, t0).unwrap();
        assert_eq!(written.len(), 2);
        assert_eq!(log.effective(&"B".into()), Some(Label::Vad));
        assert_eq!(&log.records()[..2], &before[..]);
        assert!(matches!(
            apply_resolution(&mut book, &mut log, &cid, &req, 1, t0),
            Err(AuditError::AlreadyResolved(_))
        ));
        assert!(matches!(
            apply_resolution(&mut book, &mut log, "nope", &req, 1, t0),
            Err(AuditError::UnknownConflict(_))
        ));
        assert_eq!(book[&cid].status, ConflictStatus::Resolved);
    }
}
