//! Medication–diagnosis connection graphs from attention weights.
//!
//! Edge weights are accumulated attention, divided by the patient's
//! largest edge so the strength cut-points apply on `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::claims::io::Vocabulary;
use crate::claims::{Label, PatientRecord};
use crate::encoder::{AttentionRecord, Pair};
use crate::error::{Error, Result};

pub const MODERATE_THRESHOLD: f64 = 0.3;
pub const STRONG_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Moderate,
    Strong,
}

impl Strength {
    /// `weak < 0.3 ≤ moderate < 0.6 ≤ strong`.
    pub fn classify(weight: f64) -> Self {
        if weight >= STRONG_THRESHOLD {
            Strength::Strong
        } else if weight >= MODERATE_THRESHOLD {
            Strength::Moderate
        } else {
            Strength::Weak
        }
    }

    pub fn dot_style(self) -> &'static str {
        match self {
            Strength::Strong => "solid",
            Strength::Moderate => "dashed",
            Strength::Weak => "dotted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Med,
    Diag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub index: u32,
}

impl Node {
    fn token(&self, vocab: Option<&Vocabulary>) -> String {
        let name = vocab.and_then(|v| match self.kind {
            NodeKind::Med => v.medication_token(self.index),
            NodeKind::Diag => v.diagnosis_token(self.index),
        });
        match (name, self.kind) {
            (Some(n), _) => n.to_string(),
            (None, NodeKind::Med) => format!("med{}", self.index),
            (None, NodeKind::Diag) => format!("diag{}", self.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Token on the query side.
    pub from: Node,
    /// Token on the key side.
    pub to: Node,
    /// Accumulated attention before normalisation.
    pub raw: f64,
    pub weight: f64,
    pub strength: Strength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGraph {
    pub patient_id: String,
    pub label: Label,
    pub layer: usize,
    pub pair: Pair,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

fn active(p: &PatientRecord, kind: NodeKind) -> Vec<Vec<u32>> {
    p.months
        .iter()
        .map(|m| match kind {
            NodeKind::Med => m.meds.clone(),
            NodeKind::Diag => m.diags.clone(),
        })
        .collect()
}

fn pair_kinds(pair: Pair) -> (NodeKind, NodeKind) {
    match pair {
        Pair::MM => (NodeKind::Med, NodeKind::Med),
        Pair::MD => (NodeKind::Med, NodeKind::Diag),
        Pair::DD => (NodeKind::Diag, NodeKind::Diag),
    }
}

/// Sums `att[t_i, t_j]` for every (query token active at `t_i`, key token
/// active at `t_j`).
pub fn aggregate_matrix(att: &Tensor, p: &PatientRecord, pair: Pair) -> Result<BTreeMap<(Node, Node), f64>> {
    let t = p.len();
    if att.rows() != t || att.cols() != t {
        return Err(Error::invalid(format!(
            "attention matrix {} does not match patient {} with {t} months",
            att.shape(),
            p.id
        )));
    }
    let (qk, kk) = pair_kinds(pair);
    let (q_tokens, k_tokens) = (active(p, qk), active(p, kk));
    let mut sums = BTreeMap::new();
    for ti in 0..t {
        for tj in 0..t {
            let a = att.get(ti, tj);
            for &qi in &q_tokens[ti] {
                for &kj in &k_tokens[tj] {
                    let key = (Node { kind: qk, index: qi }, Node { kind: kk, index: kj });
                    *sums.entry(key).or_insert(0.0) += a;
                }
            }
        }
    }
    Ok(sums)
}

/// Builds the connection graph from the first-layer `MD` record.
pub fn aggregate_attention(records: &[AttentionRecord], p: &PatientRecord) -> Result<AttentionGraph> {
    aggregate_attention_at(records, p, 0, Pair::MD)
}

pub fn aggregate_attention_at(
    records: &[AttentionRecord],
    p: &PatientRecord,
    layer: usize,
    pair: Pair,
) -> Result<AttentionGraph> {
    if records.is_empty() {
        return Err(Error::invalid("attention trace is empty"));
    }
    let record = records
        .iter()
        .find(|r| r.layer == layer && r.pair == pair)
        .ok_or_else(|| Error::invalid(format!("trace has no layer {layer} {} record", pair.name())))?;
    let sums = aggregate_matrix(&record.weights, p, pair)?;
    let max = sums.values().copied().fold(0.0, f64::max);
    let edges = sums
        .into_iter()
        .filter(|&(_, raw)| raw > 0.0)
        .map(|((from, to), raw)| {
            let weight = raw / max;
            Edge {
                from,
                to,
                raw,
                weight,
                strength: Strength::classify(weight),
            }
        })
        .collect();
    let (qk, kk) = pair_kinds(pair);
    let mut nodes = BTreeSet::new();
    for kind in [qk, kk] {
        for month in active(p, kind) {
            nodes.extend(month.into_iter().map(|index| Node { kind, index }));
        }
    }
    Ok(AttentionGraph {
        patient_id: p.id.clone(),
        label: p.label,
        layer,
        pair,
        nodes: nodes.into_iter().collect(),
        edges,
    })
}

/// Cosine of two streams flattened row-major; the shorter one is padded
/// with zero months. Returns 0 when either is all zeros.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::invalid(format!(
            "streams have {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let n = a.len().min(b.len());
    let dot: f64 = a.data()[..n].iter().zip(&b.data()[..n]).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders graphs as one undirected DOT graph with a cluster per patient.
/// Medications are boxes, diagnoses ovals; edge style follows strength
/// and colour follows the patient label.
pub fn export_dot(graphs: &[AttentionGraph], vocab: Option<&Vocabulary>) -> Result<String> {
    if graphs.is_empty() {
        return Err(Error::invalid("nothing to export"));
    }
    let mut sorted: Vec<&AttentionGraph> = graphs.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.layer.cmp(&b.layer)).then(a.pair.cmp(&b.pair)));

    let mut s = String::from("graph attention {\n");
    for (gi, g) in sorted.iter().enumerate() {
        let color = if g.label.is_positive() { "red" } else { "black" };
        let node_id = |n: &Node| quote(&format!("{}/{}", g.patient_id, n.token(vocab)));
        let _ = writeln!(s, "  subgraph {} {{", quote(&format!("cluster_{gi}_{}", g.patient_id)));
        let label = if g.label.is_positive() { "positive" } else { "negative" };
        let _ = writeln!(s, "    label={};", quote(&format!("{} ({label})", g.patient_id)));
        for n in &g.nodes {
            let shape = match n.kind {
                NodeKind::Med => "box",
                NodeKind::Diag => "oval",
            };
            let _ = writeln!(s, "    {} [shape={shape}, label={}];", node_id(n), quote(&n.token(vocab)));
        }
        let mut edges: Vec<&Edge> = g.edges.iter().collect();
        edges.sort_by_key(|a| (a.from, a.to));
        for e in edges {
            let _ = writeln!(
                s,
                "    {} -- {} [style={}, color={color}, label={}];",
                node_id(&e.from),
                node_id(&e.to),
                e.strength.dot_style(),
                quote(&format!("{:.4}", e.weight)),
            );
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{demographics, MonthEvents};

    fn patient(label: Label, months: &[(&[u32], &[u32])]) -> PatientRecord {
        PatientRecord {
            id: "p1".into(),
            label,
            demo: demographics(30.0, false),
            months: months
                .iter()
                .enumerate()
                .map(|(t, (m, d))| MonthEvents { t: t as u32, meds: m.to_vec(), diags: d.to_vec() })
                .collect(),
        }
    }

    fn record(weights: Tensor) -> AttentionRecord {
        let t = weights.rows();
        AttentionRecord { layer: 0, pair: Pair::MD, weights, output: Tensor::zeros(t, 1) }
    }

    #[test]
    fn threshold_boundaries() {
        assert_eq!(Strength::classify(0.0), Strength::Weak);
        assert_eq!(Strength::classify(0.299_999), Strength::Weak);
        assert_eq!(Strength::classify(0.3), Strength::Moderate);
        assert_eq!(Strength::classify(0.45), Strength::Moderate);
        assert_eq!(Strength::classify(0.6), Strength::Strong);
        assert_eq!(Strength::classify(1.0), Strength::Strong);
    }

    #[test]
    fn single_pair_is_strong() {
        let p = patient(Label::Positive, &[(&[2], &[]), (&[], &[1])]);
        let att = Tensor::from_rows(&[&[0.4, 0.6], &[0.5, 0.5]]);
        let g = aggregate_attention(&[record(att)], &p).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].weight, 1.0);
        assert_eq!(g.edges[0].raw, 0.6);
        assert_eq!(g.edges[0].strength, Strength::Strong);
    }

    #[test]
    fn empty_trace_is_rejected() {
        let p = patient(Label::Negative, &[(&[0], &[0])]);
        assert!(aggregate_attention(&[], &p).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &Tensor::zeros(3, 2)).unwrap(), 0.0);
        // Padding: the extra month of `c` only changes its norm.
        let c = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!((cosine_similarity(&a, &c).unwrap() - 2.0 / (2f64.sqrt() * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn one_strong_positive_edge_line() {
        let p = patient(Label::Positive, &[(&[0], &[0])]);
        let g = aggregate_attention(&[record(Tensor::from_rows(&[&[1.0]]))], &p).unwrap();
        let dot = export_dot(&[g], None).unwrap();
        let line = dot.lines().find(|l| l.contains("--")).unwrap();
        assert!(line.contains("style=solid") && line.contains("color=red"), "{line}");
        assert!(dot.contains("shape=box") && dot.contains("shape=oval"));
    }

    #[test]
    fn nodes_only_graph() {
        let p = patient(Label::Negative, &[(&[0], &[]), (&[], &[])]);
        let g = aggregate_attention(&[record(Tensor::filled(2, 2, 0.5))], &p).unwrap();
        assert!(g.edges.is_empty());
        let dot = export_dot(&[g], None).unwrap();
        assert!(!dot.contains("--"));
        assert!(dot.contains("\"p1/med0\""));
    }
}
