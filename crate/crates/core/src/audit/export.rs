use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::AuditError;
use crate::forest::TreeNode;

/// One node of an exported tree, numbered in preorder from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub vad_count: u32,
    pub not_vad_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<usize>,
    /// Human-readable split or leaf description.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTreeExport {
    pub nodes: Vec<ExportNode>,
    pub dot: String,
}

fn flatten(node: &TreeNode, names: &[String], out: &mut Vec<ExportNode>) -> usize {
    let id = out.len();
    let c = node.counts();
    let (vad, not) = (c.vad_count, c.total - c.vad_count);
    match node {
        TreeNode::Leaf { .. } => out.push(ExportNode {
            id,
            feature: None,
            feature_name: None,
            threshold: None,
            vad_count: vad,
            not_vad_count: not,
            left: None,
            right: None,
            description: format!("leaf: {vad} VAD / {not} NotVAD"),
        }),
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            let name = names.get(*feature).cloned().unwrap_or_else(|| format!("f{feature}"));
            out.push(ExportNode {
                id,
                feature: Some(*feature),
                feature_name: Some(name.clone()),
                threshold: Some(*threshold),
                vad_count: vad,
                not_vad_count: not,
                left: None,
                right: None,
                description: format!("{name} <= {threshold}"),
            });
            let l = flatten(left, names, out);
            let r = flatten(right, names, out);
            out[id].left = Some(l);
            out[id].right = Some(r);
        }
    }
    id
}

fn dot(nodes: &[ExportNode]) -> String {
    let mut s = String::from("digraph audit_tree {\n  node [shape=box];\n");
    for n in nodes {
        let _ = writeln!(
            s,
            "  n{} [label=\"{}\\n{} VAD / {} NotVAD\"];",
            n.id,
            n.description.replace('"', "\\\""),
            n.vad_count,
            n.not_vad_count
        );
    }
    for n in nodes {
        if let (Some(l), Some(r)) = (n.left, n.right) {
            let _ = writeln!(s, "  n{} -> n{} [label=\"yes\"];", n.id, l);
            let _ = writeln!(s, "  n{} -> n{} [label=\"no\"];", n.id, r);
        }
    }
    s.push_str("}\n");
    s
}

/// JSON-ready node list plus DOT text. `feature_names` maps model columns
/// to display names.
pub fn export_tree(tree: &TreeNode, feature_names: &[String]) -> AuditTreeExport {
    let mut nodes = Vec::with_capacity(tree.n_nodes());
    flatten(tree, feature_names, &mut nodes);
    let dot = dot(&nodes);
    AuditTreeExport { nodes, dot }
}

fn rebuild(nodes: &[ExportNode], id: usize, depth: usize) -> Result<TreeNode, AuditError> {
    if depth > nodes.len() {
        return Err(AuditError::MalformedExport("cycle in node references".into()));
    }
    let n = nodes
        .get(id)
        .ok_or_else(|| AuditError::MalformedExport(format!("missing node {id}")))?;
    let total = n.vad_count + n.not_vad_count;
    match (n.feature, n.threshold, n.left, n.right) {
        (None, None, None, None) => Ok(TreeNode::Leaf {
            vad_count: n.vad_count,
            total,
        }),
        (Some(feature), Some(threshold), Some(l), Some(r)) => Ok(TreeNode::Split {
            feature,
            threshold,
            vad_count: n.vad_count,
            total,
            left: Box::new(rebuild(nodes, l, depth + 1)?),
            right: Box::new(rebuild(nodes, r, depth + 1)?),
        }),
        _ => Err(AuditError::MalformedExport(format!("node {id} is neither a split nor a leaf"))),
    }
}

/// Reconstructs the tree from an exported node list.
pub fn import_tree(nodes: &[ExportNode]) -> Result<TreeNode, AuditError> {
    if nodes.is_empty() {
        return Err(AuditError::MalformedExport("no nodes".into()));
    }
    rebuild(nodes, 0, 0)
}
