use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{static_bounds, NodeSpec, QuerySpec, SimError, DEFAULT_INTERVAL};
use crate::plan::{OperatorKind, Plan, PlanNode};

/// Seconds per GetNext for a node of relative weight 1.
const BASE_COST: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    ScanFilterAgg,
    SortTop,
    HashJoinAgg,
    HashChain,
    MergeFilter,
    NlSeek,
    NlSeekFilter,
    BatchNl,
    BatchNlAgg,
    NlNl,
    HashNl,
    SpoolAgg,
}

impl Template {
    pub const ALL: [Template; 12] = [
        Template::ScanFilterAgg,
        Template::SortTop,
        Template::HashJoinAgg,
        Template::HashChain,
        Template::MergeFilter,
        Template::NlSeek,
        Template::NlSeekFilter,
        Template::BatchNl,
        Template::BatchNlAgg,
        Template::NlNl,
        Template::HashNl,
        Template::SpoolAgg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::ScanFilterAgg => "scan_filter_agg",
            Template::SortTop => "sort_top",
            Template::HashJoinAgg => "hash_join_agg",
            Template::HashChain => "hash_chain",
            Template::MergeFilter => "merge_filter",
            Template::NlSeek => "nl_seek",
            Template::NlSeekFilter => "nl_seek_filter",
            Template::BatchNl => "batch_nl",
            Template::BatchNlAgg => "batch_nl_agg",
            Template::NlNl => "nl_nl",
            Template::HashNl => "hash_nl",
            Template::SpoolAgg => "spool_agg",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown plan template '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostProfile {
    /// Per-operator relative weights (seeks cost more than filters, ...).
    Operator,
    /// Every node costs the same before noise.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub family_id: String,
    pub query_count: usize,
    pub scale: f64,
    pub skew_z: f64,
    pub estimate_error_sigma: f64,
    pub operator_mix: Vec<(Template, f64)>,
    pub observation_interval: f64,
    pub seed: u64,
    pub cost_profile: CostProfile,
    /// Log-normal sigma applied to each node's per-tuple cost.
    pub cost_sigma: f64,
    pub spill_probability: f64,
}

impl WorkloadConfig {
    pub fn new(family_id: impl Into<String>) -> Self {
        WorkloadConfig {
            family_id: family_id.into(),
            query_count: 10,
            scale: 1.0,
            skew_z: 0.0,
            estimate_error_sigma: 0.0,
            operator_mix: Template::ALL.iter().map(|&t| (t, 1.0)).collect(),
            observation_interval: DEFAULT_INTERVAL,
            seed: 0,
            cost_profile: CostProfile::Operator,
            cost_sigma: 0.2,
            spill_probability: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: &str| Err(SimError::Config(format!("family {}: {m}", self.family_id)));
        if self.query_count < 1 {
            return err("query_count must be >= 1");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return err("scale must be > 0");
        }
        if !(self.estimate_error_sigma >= 0.0) || !(self.cost_sigma >= 0.0) {
            return err("sigma must be >= 0");
        }
        if !(self.skew_z >= 0.0 && self.skew_z.is_finite()) {
            return err("skew_z must be >= 0");
        }
        if !(self.observation_interval > 0.0 && self.observation_interval.is_finite()) {
            return err("observation_interval must be > 0");
        }
        if !(0.0..=1.0).contains(&self.spill_probability) {
            return err("spill_probability must lie in [0,1]");
        }
        if self.operator_mix.is_empty() || self.operator_mix.iter().all(|(_, w)| *w <= 0.0) {
            return err("operator_mix is empty");
        }
        if self.operator_mix.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return err("operator_mix weights must be finite and >= 0");
        }
        Ok(())
    }
}

fn relative_cost(kind: OperatorKind) -> f64 {
    match kind {
        OperatorKind::TableScan => 1.0,
        OperatorKind::IndexScan => 1.2,
        OperatorKind::IndexSeek => 4.0,
        OperatorKind::Filter => 0.3,
        OperatorKind::Sort => 2.0,
        OperatorKind::BatchSort => 1.0,
        OperatorKind::HashJoin => 1.5,
        OperatorKind::HashAggregate => 1.5,
        OperatorKind::MergeJoin => 1.0,
        OperatorKind::NestedLoopJoin => 0.5,
        OperatorKind::StreamAggregate => 0.5,
        OperatorKind::Top => 0.2,
        OperatorKind::Spool => 0.8,
        OperatorKind::Other => 1.0,
    }
}

struct Draft {
    kind: OperatorKind,
    children: Vec<usize>,
    rows: u64,
    table: u64,
    width: u32,
    spill: f64,
    batch_fraction: Option<f64>,
}

/// Builds a template at unit scale; row counts are integers so that
/// integral scale factors multiply them exactly.
struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    spill_probability: f64,
    nodes: Vec<Draft>,
}

impl Builder<'_> {
    fn push(&mut self, kind: OperatorKind, children: Vec<usize>, rows: u64, table: u64) -> usize {
        let width = self.rng.gen_range(16..=200);
        let spill = if matches!(
            kind,
            OperatorKind::HashJoin | OperatorKind::HashAggregate | OperatorKind::Sort
        ) && self.rng.gen_bool(self.spill_probability)
        {
            self.rng.gen_range(0.1..0.5)
        } else {
            0.0
        };
        self.nodes.push(Draft {
            kind,
            children,
            rows: rows.max(1),
            table,
            width,
            spill,
            batch_fraction: None,
        });
        self.nodes.len() - 1
    }

    fn leaf_rows(&mut self) -> u64 {
        let lo = 400f64.ln();
        let hi = 4000f64.ln();
        self.rng.gen_range(lo..hi).exp().round() as u64
    }

    fn scan(&mut self, kind: OperatorKind) -> usize {
        let rows = self.leaf_rows();
        self.push(kind, vec![], rows, rows)
    }

    fn filter(&mut self, child: usize) -> usize {
        let sel = self.rng.gen_range(0.05..0.9);
        let rows = (self.nodes[child].rows as f64 * sel).round() as u64;
        self.push(OperatorKind::Filter, vec![child], rows, 0)
    }

    fn aggregate(&mut self, kind: OperatorKind, child: usize) -> usize {
        let g = self.rng.gen_range(0.001..0.2);
        let rows = (self.nodes[child].rows as f64 * g).round() as u64;
        self.push(kind, vec![child], rows, 0)
    }

    fn passthrough(&mut self, kind: OperatorKind, child: usize) -> usize {
        let rows = self.nodes[child].rows;
        self.push(kind, vec![child], rows, 0)
    }

    fn hash_join(&mut self, build: usize, probe: usize) -> usize {
        let m = self.rng.gen_range(0.2..1.5);
        let rows = (self.nodes[probe].rows as f64 * m).round() as u64;
        self.push(OperatorKind::HashJoin, vec![build, probe], rows, 0)
    }

    fn merge_join(&mut self, a: usize, b: usize) -> usize {
        let m = self.rng.gen_range(0.3..1.0);
        let rows = (self.nodes[a].rows.max(self.nodes[b].rows) as f64 * m).round() as u64;
        self.push(OperatorKind::MergeJoin, vec![a, b], rows, 0)
    }

    /// Nested loop join over `outer` with an index seek inner side, optionally
    /// filtered. Returns the join node.
    fn nested_loop(&mut self, outer: usize, inner_filter: bool) -> usize {
        let outer_rows = self.nodes[outer].rows;
        let fanout = self.rng.gen_range(0.5f64.ln()..8f64.ln()).exp();
        let seek_rows = ((outer_rows as f64 * fanout).round() as u64).max(1);
        let table = self.leaf_rows() * 10;
        let seek = self.push(OperatorKind::IndexSeek, vec![], seek_rows, table);
        let inner = if inner_filter { self.filter(seek) } else { seek };
        let s = self.rng.gen_range(0.3..1.0);
        let rows = (self.nodes[inner].rows as f64 * s).round() as u64;
        self.push(OperatorKind::NestedLoopJoin, vec![outer, inner], rows, 0)
    }

    fn batch_sort(&mut self, child: usize) -> usize {
        let bs = self.passthrough(OperatorKind::BatchSort, child);
        let frac = [0.125, 0.25, 0.5, 1.0][self.rng.gen_range(0..4)];
        self.nodes[bs].batch_fraction = Some(frac);
        bs
    }

    fn build(&mut self, t: Template) -> usize {
        use OperatorKind::*;
        match t {
            Template::ScanFilterAgg => {
                let s = self.scan(TableScan);
                let f = self.filter(s);
                self.aggregate(StreamAggregate, f)
            }
            Template::SortTop => {
                let s = self.scan(TableScan);
                let f = self.filter(s);
                let so = self.passthrough(Sort, f);
                let rows = self.nodes[so].rows.min(100);
                self.push(Top, vec![so], rows, 0)
            }
            Template::HashJoinAgg => {
                let a = self.scan(TableScan);
                let fa = self.filter(a);
                let b = self.scan(TableScan);
                let j = self.hash_join(fa, b);
                self.aggregate(HashAggregate, j)
            }
            Template::HashChain => {
                let c = self.scan(TableScan);
                let a = self.scan(TableScan);
                let b = self.scan(TableScan);
                let fb = self.filter(b);
                let j1 = self.hash_join(a, fb);
                self.hash_join(c, j1)
            }
            Template::MergeFilter => {
                let a = self.scan(IndexScan);
                let b = self.scan(IndexScan);
                let m = self.merge_join(a, b);
                self.filter(m)
            }
            Template::NlSeek => {
                let a = self.scan(TableScan);
                self.nested_loop(a, false)
            }
            Template::NlSeekFilter => {
                let a = self.scan(TableScan);
                let fa = self.filter(a);
                let nl = self.nested_loop(fa, false);
                self.aggregate(StreamAggregate, nl)
            }
            Template::BatchNl => {
                let a = self.scan(TableScan);
                let bs = self.batch_sort(a);
                self.nested_loop(bs, false)
            }
            Template::BatchNlAgg => {
                let a = self.scan(IndexScan);
                let bs = self.batch_sort(a);
                let nl = self.nested_loop(bs, true);
                self.aggregate(StreamAggregate, nl)
            }
            Template::NlNl => {
                let a = self.scan(TableScan);
                let nl = self.nested_loop(a, false);
                self.nested_loop(nl, false)
            }
            Template::HashNl => {
                let d = self.scan(TableScan);
                let a = self.scan(TableScan);
                let nl = self.nested_loop(a, false);
                self.hash_join(d, nl)
            }
            Template::SpoolAgg => {
                let s = self.scan(TableScan);
                let f = self.filter(s);
                let sp = self.passthrough(Spool, f);
                self.aggregate(HashAggregate, sp)
            }
        }
    }
}

fn scaled(base: u64, scale: f64) -> u64 {
    ((base as f64 * scale).round() as u64).max(1)
}

fn make_query(config: &WorkloadConfig, index: usize, template: Template, seed: u64) -> Result<QuerySpec, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        spill_probability: config.spill_probability,
        nodes: Vec::new(),
    };
    let root = b.build(template);
    let drafts = b.nodes;

    // Pre-order ids starting at the root.
    let mut order = Vec::with_capacity(drafts.len());
    fn preorder(i: usize, d: &[Draft], out: &mut Vec<usize>) {
        out.push(i);
        for &c in &d[i].children {
            preorder(c, d, out);
        }
    }
    preorder(root, &drafts, &mut order);
    let mut id_of = vec![0u32; drafts.len()];
    for (id, &i) in order.iter().enumerate() {
        id_of[i] = id as u32;
    }

    let mut plan_nodes = Vec::with_capacity(order.len());
    let mut node_specs = Vec::with_capacity(order.len());
    for &i in &order {
        let d = &drafts[i];
        let rows = scaled(d.rows, config.scale);
        let cost_noise = (config.cost_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
        let weight = match config.cost_profile {
            CostProfile::Operator => relative_cost(d.kind),
            CostProfile::Uniform => 1.0,
        };
        let batch_size = d.batch_fraction.map(|f| {
            let input = scaled(drafts[d.children[0]].rows, config.scale);
            ((input as f64 * f).round() as u64).max(1)
        });
        plan_nodes.push(PlanNode {
            id: id_of[i],
            kind: d.kind,
            children: d.children.iter().map(|&c| id_of[c]).collect(),
            est_cardinality: 0,
            est_row_width: d.width,
        });
        node_specs.push(NodeSpec {
            id: id_of[i],
            true_cardinality: rows,
            table_rows: if d.table > 0 { scaled(d.table, config.scale) } else { 0 },
            per_tuple_cost: BASE_COST * weight * cost_noise,
            spill_fraction: d.spill,
            batch_size,
        });
    }

    let mut spec = QuerySpec {
        query_id: format!("{}-{:05}", config.family_id, index),
        family: config.family_id.clone(),
        plan: Plan {
            root: 0,
            nodes: plan_nodes,
        },
        nodes: node_specs,
        skew_z: config.skew_z,
        seed: rng.gen(),
        observation_interval: config.observation_interval,
    };
    let (lb, ub) = static_bounds(&spec)?;
    for i in 0..spec.nodes.len() {
        let n = spec.total_getnext(i);
        let noise = (config.estimate_error_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
        let e = (n as f64 * noise).ceil() as u64;
        spec.plan.nodes[i].est_cardinality = e.clamp(lb[i], ub[i].max(lb[i]));
    }
    Ok(spec)
}

/// Draws `query_count` query specs for one workload family.
pub fn generate_workload(config: &WorkloadConfig) -> Result<Vec<QuerySpec>, SimError> {
    config.validate()?;
    let weights: Vec<f64> = config.operator_mix.iter().map(|(_, w)| *w).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| SimError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.query_count)
        .map(|i| {
            let template = config.operator_mix[dist.sample(&mut rng)].0;
            let seed: u64 = rng.gen();
            make_query(config, i, template, seed)
        })
        .collect()
}
