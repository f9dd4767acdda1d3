//! Neural-tree extraction from attention snapshots.
//!
//! Hardening every gate (one-hot argmax, ties to the lowest index) turns the
//! gated network into a routing graph. Walking backward from the class heads
//! yields the retained blocks; everything else is prunable. The result is a
//! forest of in-trees by construction (each block keeps exactly one source);
//! it is reported as a true tree when a single root remains.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionSnapshot;
use crate::error::{Error, Result};
use crate::losses;
use crate::types::argmax;

/// One block in the extracted routing graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// "s{stage}b{block}".
    pub label: String,
    pub stage: usize,
    pub block: usize,
    /// Attention histogram over the node's sources (empty for roots).
    pub weights: Vec<f64>,
    /// Index of the retained source after hardening (None for roots).
    pub selected: Option<usize>,
    /// Label of the retained source.
    pub parent: Option<String>,
    /// On a retained path from some head.
    pub reachable: bool,
    /// Class index for head leaves.
    pub class: Option<usize>,
}

/// Routing graph of retained blocks; leaves are the class heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralTree {
    pub k: usize,
    /// All blocks (including unreachable ones), sorted by (stage, block).
    pub nodes: Vec<TreeNode>,
    /// Retained edges, child label -> parent label.
    pub edges: Vec<(String, String)>,
    /// Single root and connected: the DAG is a genuine tree.
    pub is_true_tree: bool,
}

/// Entropy summary of a snapshot (same aggregation as the training
/// regularizer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// (label, entropy) per gated module, sorted by (stage, block).
    pub per_module: Vec<(String, f64)>,
    pub mean_entropy: f64,
    pub total_entropy: f64,
    /// Blocks reachable from the heads under hardened routing (roots
    /// included).
    pub retained_blocks: usize,
    /// (class, branch label): the retained last-stage expert feeding each
    /// head; classes sharing a label share a branch.
    pub branch_assignment: Vec<(usize, String)>,
}

fn parse_label(label: &str) -> Option<(usize, usize)> {
    let rest = label.strip_prefix('s')?;
    let (stage, block) = rest.split_once('b')?;
    Some((stage.parse().ok()?, block.parse().ok()?))
}

/// Internal adjacency built from a snapshot: every record keeps its argmax
/// source; recordless sources become roots.
struct Routing {
    /// label -> (stage, block, weights, selected index, parent label).
    selected: BTreeMap<String, (usize, usize, Vec<f64>, usize, String)>,
    /// Referenced labels without a record.
    roots: BTreeSet<String>,
    /// Labels of the max-stage records (the heads), in block order.
    heads: Vec<String>,
    max_stage: usize,
}

fn build_routing(snapshot: &AttentionSnapshot) -> Result<Routing> {
    snapshot.validate()?;
    let mut stages_with_records = BTreeSet::new();
    let mut by_label = BTreeMap::new();
    for r in &snapshot.records {
        stages_with_records.insert(r.stage);
        if by_label.insert(r.label(), r).is_some() {
            return Err(Error::validation(format!(
                "duplicate attention record for {}",
                r.label()
            )));
        }
    }
    let mut selected = BTreeMap::new();
    let mut roots = BTreeSet::new();
    for r in &snapshot.records {
        let label = r.label();
        let pick = argmax(&r.weights);
        let parent = r.sources[pick].clone();
        for src in &r.sources {
            match parse_label(src) {
                Some((stage, _)) => {
                    if stages_with_records.contains(&stage) && !by_label.contains_key(src) {
                        return Err(Error::validation(format!(
                            "module {label} references missing source {src}"
                        )));
                    }
                    if !by_label.contains_key(src) {
                        roots.insert(src.clone());
                    }
                }
                None => {
                    return Err(Error::validation(format!(
                        "module {label} has malformed source label '{src}'"
                    )));
                }
            }
        }
        selected.insert(label, (r.stage, r.block, r.weights.clone(), pick, parent));
    }
    let max_stage = snapshot.records.iter().map(|r| r.stage).max().unwrap_or(0);
    let mut head_records: Vec<(usize, String)> = snapshot
        .records
        .iter()
        .filter(|r| r.stage == max_stage)
        .map(|r| (r.block, r.label()))
        .collect();
    head_records.sort();
    Ok(Routing {
        heads: head_records.into_iter().map(|(_, l)| l).collect(),
        selected,
        roots,
        max_stage,
    })
}

/// Labels reachable from the heads by following retained sources.
fn reachable_set(routing: &Routing) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<String> = routing.heads.clone();
    while let Some(label) = stack.pop() {
        if !seen.insert(label.clone()) {
            continue;
        }
        if let Some((_, _, _, _, parent)) = routing.selected.get(&label) {
            stack.push(parent.clone());
        }
    }
    seen
}

/// Number of records at the snapshot's deepest stage: binary heads for
/// explainer models, the last wrapped convolution's output blocks for VAM
/// networks. This is the `k` that [`extract_tree`] expects.
pub fn snapshot_leaf_count(snapshot: &AttentionSnapshot) -> usize {
    let max_stage = snapshot
        .records
        .iter()
        .map(|r| r.stage)
        .max()
        .unwrap_or(0);
    snapshot
        .records
        .iter()
        .filter(|r| r.stage == max_stage)
        .count()
}

/// Hardens a snapshot and walks backward from the K heads (the max-stage
/// records). Heads must number exactly `k`; each becomes a class leaf.
pub fn extract_tree(snapshot: &AttentionSnapshot, k: usize) -> Result<NeuralTree> {
    if k == 0 {
        return Err(Error::invalid_argument("class count must be >= 1"));
    }
    if snapshot.records.is_empty() {
        // K unattached class leaves.
        let nodes = (0..k)
            .map(|c| TreeNode {
                label: format!("s1b{c}"),
                stage: 1,
                block: c,
                weights: Vec::new(),
                selected: None,
                parent: None,
                reachable: true,
                class: Some(c),
            })
            .collect();
        return Ok(NeuralTree { k, nodes, edges: Vec::new(), is_true_tree: k == 1 });
    }
    let routing = build_routing(snapshot)?;
    if routing.heads.len() != k {
        return Err(Error::validation(format!(
            "snapshot has {} blocks at max stage {}, expected {} class heads",
            routing.heads.len(),
            routing.max_stage,
            k
        )));
    }
    for (c, label) in routing.heads.iter().enumerate() {
        let (_, block, ..) = routing.selected[label];
        if block != c {
            return Err(Error::validation(format!(
                "head blocks must cover classes 0..{k}; found block {block} at position {c}"
            )));
        }
    }
    let reachable = reachable_set(&routing);

    let mut nodes = Vec::new();
    for label in &routing.roots {
        let (stage, block) = parse_label(label).expect("validated above");
        nodes.push(TreeNode {
            label: label.clone(),
            stage,
            block,
            weights: Vec::new(),
            selected: None,
            parent: None,
            reachable: reachable.contains(label),
            class: None,
        });
    }
    for (label, (stage, block, weights, pick, parent)) in &routing.selected {
        let class =
            if *stage == routing.max_stage { Some(*block) } else { None };
        nodes.push(TreeNode {
            label: label.clone(),
            stage: *stage,
            block: *block,
            weights: weights.clone(),
            selected: Some(*pick),
            parent: Some(parent.clone()),
            reachable: reachable.contains(label),
            class,
        });
    }
    nodes.sort_by_key(|n| (n.stage, n.block));

    let mut edges = Vec::new();
    for n in &nodes {
        if n.reachable {
            if let Some(parent) = &n.parent {
                edges.push((n.label.clone(), parent.clone()));
            }
        }
    }
    let retained_roots = nodes.iter().filter(|n| n.reachable && n.parent.is_none()).count();
    Ok(NeuralTree { k, nodes, edges, is_true_tree: retained_roots <= 1 })
}

impl NeuralTree {
    /// Labels of retained blocks.
    pub fn retained_labels(&self) -> Vec<String> {
        self.nodes.iter().filter(|n| n.reachable).map(|n| n.label.clone()).collect()
    }

    pub fn retained_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.reachable).count()
    }

    /// Structural invariants: edge endpoints exist, leaves cover the classes.
    pub fn validate(&self) -> Result<()> {
        let labels: BTreeSet<&str> = self.nodes.iter().map(|n| n.label.as_str()).collect();
        if labels.len() != self.nodes.len() {
            return Err(Error::validation("duplicate node labels"));
        }
        for (child, parent) in &self.edges {
            if !labels.contains(child.as_str()) || !labels.contains(parent.as_str()) {
                return Err(Error::validation(format!(
                    "edge {child} -> {parent} references a missing node"
                )));
            }
        }
        let mut classes: Vec<usize> = self.nodes.iter().filter_map(|n| n.class).collect();
        classes.sort_unstable();
        let expect: Vec<usize> = (0..self.k).collect();
        if classes != expect {
            return Err(Error::validation(format!(
                "leaves must map 1:1 to classes 0..{}, found {classes:?}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Entropy summary plus retained-set statistics for a snapshot.
pub fn entropy_report(snapshot: &AttentionSnapshot) -> Result<EntropyReport> {
    if snapshot.records.is_empty() {
        return Ok(EntropyReport {
            per_module: Vec::new(),
            mean_entropy: 0.0,
            total_entropy: 0.0,
            retained_blocks: 0,
            branch_assignment: Vec::new(),
        });
    }
    let routing = build_routing(snapshot)?;
    let mut per_module: Vec<(usize, usize, String, f64)> = snapshot
        .records
        .iter()
        .map(|r| (r.stage, r.block, r.label(), losses::entropy_slice(&r.weights)))
        .collect();
    per_module.sort_by_key(|(s, b, _, _)| (*s, *b));
    let total: f64 = per_module.iter().map(|(_, _, _, h)| h).sum();
    let mean = total / per_module.len() as f64;
    let reachable = reachable_set(&routing);
    let branch_assignment = routing
        .heads
        .iter()
        .enumerate()
        .map(|(c, label)| (c, routing.selected[label].4.clone()))
        .collect();
    Ok(EntropyReport {
        per_module: per_module.into_iter().map(|(_, _, l, h)| (l, h)).collect(),
        mean_entropy: mean,
        total_entropy: total,
        retained_blocks: reachable.len(),
        branch_assignment,
    })
}

fn histogram_cells(weights: &[f64]) -> String {
    if weights.is_empty() {
        return String::new();
    }
    let hi = argmax(weights);
    let lo = weights
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite weights"))
        .map(|(i, _)| i)
        .expect("non-empty");
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let cell = format!("{w:.4}");
            if i == hi {
                format!("<FONT COLOR=\"red\">{cell}</FONT>")
            } else if i == lo {
                format!("<FONT COLOR=\"blue\">{cell}</FONT>")
            } else {
                cell
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Graphviz rendering of the retained tree: one box per reachable block with
/// its attention histogram (max weight red, min blue), edges child -> parent.
/// Deterministic: the same tree always yields byte-identical text.
pub fn to_dot(tree: &NeuralTree) -> String {
    let mut out = String::from("digraph neural_tree {\n");
    out.push_str("  rankdir=BT;\n");
    out.push_str("  node [shape=box, fontname=\"Helvetica\"];\n");
    for n in tree.nodes.iter().filter(|n| n.reachable) {
        let title = match n.class {
            Some(c) => format!("<B>{}</B> (class {c})", n.label),
            None => format!("<B>{}</B>", n.label),
        };
        let hist = histogram_cells(&n.weights);
        let label = if hist.is_empty() { title } else { format!("{title}<BR/>{hist}") };
        out.push_str(&format!("  \"{}\" [label=<{label}>];\n", n.label));
    }
    for (child, parent) in &tree.edges {
        out.push_str(&format!("  \"{child}\" -> \"{parent}\";\n"));
    }
    out.push_str("}\n");
    out
}

/// JSON rendering; [`parse_tree`] inverts it losslessly.
pub fn to_json(tree: &NeuralTree) -> Result<String> {
    Ok(serde_json::to_string_pretty(tree)?)
}

pub fn parse_tree(text: &str) -> Result<NeuralTree> {
    let tree: NeuralTree = serde_json::from_str(text)?;
    tree.validate()?;
    Ok(tree)
}
