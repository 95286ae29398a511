//! Physical plans and their decomposition into pipelines.
//!
//! A plan is a tree of operators. A pipeline is a maximal connected set of
//! operators that execute concurrently; blocking operators split the tree.
//! The rules used here:
//!
//! * `Sort` consumes its whole input before producing output. It is the root
//!   of the pipeline containing its input; its consumer starts a new pipeline.
//! * `HashJoin` and `HashAggregate` push their build child (the first child)
//!   into a preceding pipeline. The hash node itself stays with its consumer
//!   (for a join, with the probe side).
//! * Everything else is non-blocking.
//!
//! Driver nodes are the leaves of a pipeline once the inner (non-first)
//! subtrees of nested loop joins have been removed.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    TableScan,
    IndexScan,
    IndexSeek,
    Filter,
    Sort,
    BatchSort,
    HashJoin,
    HashAggregate,
    MergeJoin,
    NestedLoopJoin,
    StreamAggregate,
    Top,
    Spool,
    Other,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 14] = [
        OperatorKind::TableScan,
        OperatorKind::IndexScan,
        OperatorKind::IndexSeek,
        OperatorKind::Filter,
        OperatorKind::Sort,
        OperatorKind::BatchSort,
        OperatorKind::HashJoin,
        OperatorKind::HashAggregate,
        OperatorKind::MergeJoin,
        OperatorKind::NestedLoopJoin,
        OperatorKind::StreamAggregate,
        OperatorKind::Top,
        OperatorKind::Spool,
        OperatorKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::TableScan => "TableScan",
            OperatorKind::IndexScan => "IndexScan",
            OperatorKind::IndexSeek => "IndexSeek",
            OperatorKind::Filter => "Filter",
            OperatorKind::Sort => "Sort",
            OperatorKind::BatchSort => "BatchSort",
            OperatorKind::HashJoin => "HashJoin",
            OperatorKind::HashAggregate => "HashAggregate",
            OperatorKind::MergeJoin => "MergeJoin",
            OperatorKind::NestedLoopJoin => "NestedLoopJoin",
            OperatorKind::StreamAggregate => "StreamAggregate",
            OperatorKind::Top => "Top",
            OperatorKind::Spool => "Spool",
            OperatorKind::Other => "Other",
        }
    }

    /// Position in [`OperatorKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_scan(self) -> bool {
        matches!(
            self,
            OperatorKind::TableScan | OperatorKind::IndexScan | OperatorKind::IndexSeek
        )
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = std::convert::Infallible;

    /// Names outside the vocabulary map to `Other`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(OperatorKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .unwrap_or(OperatorKind::Other))
    }
}

impl Serialize for OperatorKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OperatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(s.parse().unwrap_or(OperatorKind::Other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: NodeId,
    pub kind: OperatorKind,
    /// First child is the outer input of a nested loop join and the build
    /// input of a hash join.
    pub children: Vec<NodeId>,
    pub est_cardinality: u64,
    pub est_row_width: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub root: NodeId,
    pub nodes: Vec<PlanNode>,
}

/// One line of a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub query_id: String,
    #[serde(flatten)]
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(NodeId),
    DanglingChild { node: NodeId, child: NodeId },
    MissingRoot(NodeId),
    MultipleParents(NodeId),
    RootHasParent(NodeId),
    Cycle(NodeId),
    Unreachable(NodeId),
    ZeroRowWidth(NodeId),
}

impl Violation {
    pub fn node(&self) -> NodeId {
        match *self {
            Violation::DuplicateId(n)
            | Violation::MissingRoot(n)
            | Violation::MultipleParents(n)
            | Violation::RootHasParent(n)
            | Violation::Cycle(n)
            | Violation::Unreachable(n)
            | Violation::ZeroRowWidth(n) => n,
            Violation::DanglingChild { node, .. } => node,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(n) => write!(f, "duplicate node id {n}"),
            Violation::DanglingChild { node, child } => {
                write!(f, "node {node} references missing child {child}")
            }
            Violation::MissingRoot(n) => write!(f, "root {n} is not a node of the plan"),
            Violation::MultipleParents(n) => write!(f, "node {n} has more than one parent"),
            Violation::RootHasParent(n) => write!(f, "root {n} has a parent"),
            Violation::Cycle(n) => write!(f, "node {n} lies on a cycle"),
            Violation::Unreachable(n) => write!(f, "node {n} is not reachable from the root"),
            Violation::ZeroRowWidth(n) => write!(f, "node {n} has est_row_width 0"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("malformed plan: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
}

impl Plan {
    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn index_map(&self) -> HashMap<NodeId, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect()
    }

    pub fn node(&self, id: NodeId) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Parent position of every node (by position), `None` for the root.
    /// Assumes a valid plan.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let index = self.index_map();
        let mut parents = vec![None; self.nodes.len()];
        for (p, node) in self.nodes.iter().enumerate() {
            for c in &node.children {
                if let Some(&ci) = index.get(c) {
                    parents[ci] = Some(p);
                }
            }
        }
        parents
    }

    /// Child positions of every node. Assumes a valid plan.
    pub fn child_positions(&self) -> Vec<Vec<usize>> {
        let index = self.index_map();
        self.nodes
            .iter()
            .map(|n| n.children.iter().filter_map(|c| index.get(c).copied()).collect())
            .collect()
    }

    /// Positions of all strict descendants of each node. Assumes a valid plan.
    pub fn descendants(&self) -> Vec<BTreeSet<usize>> {
        let children = self.child_positions();
        let mut out = vec![BTreeSet::new(); self.nodes.len()];
        fn visit(i: usize, children: &[Vec<usize>], out: &mut [BTreeSet<usize>]) {
            let mut acc = BTreeSet::new();
            for &c in &children[i] {
                visit(c, children, out);
                acc.insert(c);
                acc.extend(out[c].iter().copied());
            }
            out[i] = acc;
        }
        if let Some(r) = self.position(self.root) {
            visit(r, &children, &mut out);
        }
        out
    }
}

/// Checks every structural invariant and returns the violations found.
pub fn validate_plan(plan: &Plan) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut index = HashMap::new();
    for (i, n) in plan.nodes.iter().enumerate() {
        if index.insert(n.id, i).is_some() {
            violations.push(Violation::DuplicateId(n.id));
        }
        if n.est_row_width == 0 {
            violations.push(Violation::ZeroRowWidth(n.id));
        }
    }
    let mut parent_count: HashMap<NodeId, usize> = HashMap::new();
    for n in &plan.nodes {
        for &c in &n.children {
            if !index.contains_key(&c) {
                violations.push(Violation::DanglingChild { node: n.id, child: c });
            } else {
                *parent_count.entry(c).or_default() += 1;
            }
        }
    }
    let mut reported_multi = BTreeSet::new();
    for n in &plan.nodes {
        for &c in &n.children {
            if parent_count.get(&c).copied().unwrap_or(0) > 1 && reported_multi.insert(c) {
                violations.push(Violation::MultipleParents(c));
            }
        }
    }
    if !index.contains_key(&plan.root) {
        violations.push(Violation::MissingRoot(plan.root));
        return violations;
    }
    if parent_count.contains_key(&plan.root) {
        violations.push(Violation::RootHasParent(plan.root));
    }

    // Reachability and cycle detection from the root (iterative DFS, colors).
    let mut color = vec![0u8; plan.nodes.len()];
    let mut stack = vec![(index[&plan.root], 0usize)];
    color[index[&plan.root]] = 1;
    let mut cycle_nodes = BTreeSet::new();
    while let Some(&mut (i, ref mut next)) = stack.last_mut() {
        let children = &plan.nodes[i].children;
        if *next < children.len() {
            let c = children[*next];
            *next += 1;
            if let Some(&ci) = index.get(&c) {
                match color[ci] {
                    0 => {
                        color[ci] = 1;
                        stack.push((ci, 0));
                    }
                    1 => {
                        cycle_nodes.insert(c);
                    }
                    _ => {}
                }
            }
        } else {
            color[i] = 2;
            stack.pop();
        }
    }
    for c in cycle_nodes {
        violations.push(Violation::Cycle(c));
    }
    for (i, n) in plan.nodes.iter().enumerate() {
        if color[i] == 0 && index.get(&n.id) == Some(&i) {
            violations.push(Violation::Unreachable(n.id));
        }
    }
    violations
}

pub type PipelineId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub id: PipelineId,
    /// Node ids, in plan pre-order.
    pub nodes: Vec<NodeId>,
    pub drivers: Vec<NodeId>,
    pub root: NodeId,
}

impl Pipeline {
    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn is_driver(&self, id: NodeId) -> bool {
        self.drivers.contains(&id)
    }
}

/// How a child edge behaves with respect to pipelines.
fn child_starts_new_pipeline(parent: OperatorKind, child_slot: usize, child: OperatorKind) -> bool {
    if child == OperatorKind::Sort {
        return true;
    }
    matches!(parent, OperatorKind::HashJoin | OperatorKind::HashAggregate) && child_slot == 0
}

/// Splits a plan into pipelines, listed in execution order (every pipeline
/// comes after the pipelines that feed it).
pub fn decompose_pipelines(plan: &Plan) -> Result<Vec<Pipeline>, PlanError> {
    let violations = validate_plan(plan);
    if !violations.is_empty() {
        return Err(PlanError::Invalid(violations));
    }
    let index = plan.index_map();

    struct Builder<'a> {
        plan: &'a Plan,
        index: &'a HashMap<NodeId, usize>,
        out: Vec<Pipeline>,
    }

    impl Builder<'_> {
        /// Builds the pipeline rooted at `root` after building its feeders.
        fn build(&mut self, root: NodeId) {
            let mut members = Vec::new();
            let mut drivers = Vec::new();
            let mut feeders = Vec::new();
            self.collect(root, false, &mut members, &mut drivers, &mut feeders);
            for f in feeders {
                self.build(f);
            }
            let id = self.out.len();
            self.out.push(Pipeline {
                id,
                nodes: members,
                drivers,
                root,
            });
        }

        fn collect(
            &self,
            id: NodeId,
            in_inner: bool,
            members: &mut Vec<NodeId>,
            drivers: &mut Vec<NodeId>,
            feeders: &mut Vec<NodeId>,
        ) {
            let node = &self.plan.nodes[self.index[&id]];
            members.push(id);
            let mut has_outer_child = false;
            for (slot, &c) in node.children.iter().enumerate() {
                let child = &self.plan.nodes[self.index[&c]];
                if child_starts_new_pipeline(node.kind, slot, child.kind) {
                    feeders.push(c);
                    continue;
                }
                let inner = node.kind == OperatorKind::NestedLoopJoin && slot > 0;
                if !inner {
                    has_outer_child = true;
                }
                self.collect(c, in_inner || inner, members, drivers, feeders);
            }
            if !in_inner && !has_outer_child {
                drivers.push(id);
            }
        }
    }

    let mut b = Builder {
        plan,
        index: &index,
        out: Vec::new(),
    };
    b.build(plan.root);
    Ok(b.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(id: NodeId, kind: OperatorKind, children: &[NodeId], e: u64) -> PlanNode {
        PlanNode {
            id,
            kind,
            children: children.to_vec(),
            est_cardinality: e,
            est_row_width: 8,
        }
    }

    #[test]
    fn chain_is_one_pipeline() {
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::StreamAggregate, &[1], 1),
                node(1, OperatorKind::Filter, &[2], 10),
                node(2, OperatorKind::TableScan, &[], 100),
            ],
        };
        assert!(validate_plan(&plan).is_empty());
        let p = decompose_pipelines(&plan).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].drivers, vec![2]);
        assert_eq!(p[0].nodes, vec![0, 1, 2]);
    }

    #[test]
    fn nested_loop_inner_is_not_a_driver() {
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::NestedLoopJoin, &[1, 2], 10),
                node(1, OperatorKind::TableScan, &[], 10),
                node(2, OperatorKind::IndexSeek, &[], 10),
            ],
        };
        let p = decompose_pipelines(&plan).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].drivers, vec![1]);
    }

    #[test]
    fn hash_join_splits_build_side() {
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::HashJoin, &[1, 2], 10),
                node(1, OperatorKind::TableScan, &[], 10),
                node(2, OperatorKind::TableScan, &[], 10),
            ],
        };
        let p = decompose_pipelines(&plan).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].nodes, vec![1]);
        assert_eq!(p[0].drivers, vec![1]);
        assert_eq!(p[1].nodes, vec![0, 2]);
        assert_eq!(p[1].drivers, vec![2]);
    }

    #[test]
    fn merge_join_has_two_drivers_and_sort_blocks() {
        // Filter(MergeJoin(IndexScan, Sort(TableScan)))
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::Filter, &[1], 10),
                node(1, OperatorKind::MergeJoin, &[2, 3], 10),
                node(2, OperatorKind::IndexScan, &[], 10),
                node(3, OperatorKind::IndexScan, &[], 10),
            ],
        };
        let p = decompose_pipelines(&plan).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].drivers, vec![2, 3]);

        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::Top, &[1], 10),
                node(1, OperatorKind::Sort, &[2], 10),
                node(2, OperatorKind::TableScan, &[], 10),
            ],
        };
        let p = decompose_pipelines(&plan).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].nodes, vec![1, 2]);
        assert_eq!(p[0].root, 1);
        assert_eq!(p[1].nodes, vec![0]);
        assert_eq!(p[1].drivers, vec![0]);
    }

    #[test]
    fn hash_aggregate_output_drives_consumer() {
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::Filter, &[1], 10),
                node(1, OperatorKind::HashAggregate, &[2], 10),
                node(2, OperatorKind::TableScan, &[], 10),
            ],
        };
        let p = decompose_pipelines(&plan).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].nodes, vec![2]);
        assert_eq!(p[1].nodes, vec![0, 1]);
        assert_eq!(p[1].drivers, vec![1]);
    }

    #[test]
    fn validation_reports_duplicates_and_dangling() {
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::Filter, &[1], 10),
                node(1, OperatorKind::TableScan, &[], 10),
                node(1, OperatorKind::TableScan, &[], 10),
            ],
        };
        let v = validate_plan(&plan);
        assert!(v.contains(&Violation::DuplicateId(1)));

        let plan = Plan {
            root: 0,
            nodes: vec![node(0, OperatorKind::Filter, &[7], 10)],
        };
        let v = validate_plan(&plan);
        assert_eq!(v, vec![Violation::DanglingChild { node: 0, child: 7 }]);
        let err = decompose_pipelines(&plan).unwrap_err();
        assert!(err.to_string().contains("node 0"));
    }

    #[test]
    fn validation_reports_cycles_and_unreachable() {
        let plan = Plan {
            root: 0,
            nodes: vec![
                node(0, OperatorKind::Filter, &[1], 10),
                node(1, OperatorKind::Filter, &[2], 10),
                node(2, OperatorKind::Filter, &[1], 10),
                node(3, OperatorKind::TableScan, &[], 10),
            ],
        };
        let v = validate_plan(&plan);
        assert!(v.iter().any(|x| matches!(x, Violation::MultipleParents(1))));
        assert!(v.iter().any(|x| matches!(x, Violation::Cycle(1))));
        assert!(v.contains(&Violation::Unreachable(3)));
    }

    #[test]
    fn unknown_kind_parses_as_other() {
        let json = r#"{"query_id":"q","root":0,"nodes":[{"id":0,"kind":"Exchange","children":[],"est_cardinality":3,"est_row_width":4}]}"#;
        let rec: PlanRecord = serde_json::from_str(json).unwrap();
        assert_eq!(rec.plan.nodes[0].kind, OperatorKind::Other);
        let back = serde_json::to_string(&rec).unwrap();
        assert!(back.contains("\"kind\":\"Other\""));
    }
}
