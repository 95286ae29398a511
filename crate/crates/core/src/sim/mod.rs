//! Synthetic workloads and deterministic counter traces.
//!
//! [`generate_workload`] draws query specs from plan templates; [`execute`]
//! runs one spec through an iterator-model simulation and records counter
//! snapshots with exact ground truth.

mod execute;
pub mod io;
mod workload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{NodeId, Pipeline, Plan, PlanError};

pub use execute::{execute, execute_all, static_bounds};
pub use workload::{generate_workload, CostProfile, Template, WorkloadConfig};

pub const DEFAULT_INTERVAL: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid query spec {query}: {reason}")]
    InvalidSpec { query: String, reason: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("degenerate trace {0}: start and end times coincide")]
    DegenerateTrace(String),
    #[error("observation {index} out of range ({len} observations)")]
    ObservationOutOfRange { index: usize, len: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

/// Per-node execution parameters. Aligned with `Plan::nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Rows output by the node over the whole query.
    pub true_cardinality: u64,
    /// Size of the underlying relation for scans and seeks (per execution).
    pub table_rows: u64,
    /// Simulated seconds per GetNext call.
    pub per_tuple_cost: f64,
    /// Fraction of output rows re-read and re-written through a spill.
    pub spill_fraction: f64,
    /// Rows per batch; only meaningful for `BatchSort`.
    pub batch_size: Option<u64>,
}

impl NodeSpec {
    pub fn spill_calls(&self) -> u64 {
        (self.spill_fraction * self.true_cardinality as f64).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub family: String,
    pub plan: Plan,
    pub nodes: Vec<NodeSpec>,
    /// Zipf exponent for nested-loop fan-out.
    pub skew_z: f64,
    /// Seeds the fan-out permutation drawn during execution.
    pub seed: u64,
    /// Simulated seconds between counter snapshots.
    #[serde(default = "default_interval")]
    pub observation_interval: f64,
}

fn default_interval() -> f64 {
    DEFAULT_INTERVAL
}

impl QuerySpec {
    /// Total GetNext calls of node at position `i` (output rows, spill calls,
    /// and the sorting pass of a batch sort).
    pub fn total_getnext(&self, i: usize) -> u64 {
        let n = &self.nodes[i];
        let mut total = n.true_cardinality + n.spill_calls();
        if self.plan.nodes[i].kind == crate::plan::OperatorKind::BatchSort {
            total += n.true_cardinality;
        }
        total
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| SimError::InvalidSpec {
            query: self.query_id.clone(),
            reason,
        };
        let violations = crate::plan::validate_plan(&self.plan);
        if let Some(v) = violations.first() {
            return Err(bad(v.to_string()));
        }
        if self.nodes.len() != self.plan.nodes.len() {
            return Err(bad("node spec count differs from plan".into()));
        }
        for (n, p) in self.nodes.iter().zip(&self.plan.nodes) {
            if n.id != p.id {
                return Err(bad(format!("node spec {} misaligned with plan node {}", n.id, p.id)));
            }
            if !(n.per_tuple_cost > 0.0 && n.per_tuple_cost.is_finite()) {
                return Err(bad(format!("node {} has non-positive per_tuple_cost", n.id)));
            }
            if !(0.0..=1.0).contains(&n.spill_fraction) {
                return Err(bad(format!("node {} spill_fraction outside [0,1]", n.id)));
            }
            if p.kind == crate::plan::OperatorKind::BatchSort && n.batch_size.unwrap_or(0) == 0 {
                return Err(bad(format!("batch sort {} needs batch_size >= 1", n.id)));
            }
        }
        if !(self.observation_interval > 0.0 && self.observation_interval.is_finite()) {
            return Err(bad("observation_interval must be > 0".into()));
        }
        if !(self.skew_z >= 0.0 && self.skew_z.is_finite()) {
            return Err(bad("skew_z must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Counter values of every plan node at one observation. Vectors are
/// aligned with `Plan::nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub time: f64,
    pub k: Vec<u64>,
    pub e: Vec<u64>,
    pub lb: Vec<u64>,
    pub ub: Vec<u64>,
    pub r: Vec<u64>,
    pub w: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// N_i: total GetNext calls per node.
    pub getnext: Vec<u64>,
    pub bytes_read: Vec<u64>,
    pub bytes_written: Vec<u64>,
}

/// Observation indices bounding one pipeline's execution (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub query_id: String,
    pub family: String,
    pub plan: Plan,
    pub pipelines: Vec<Pipeline>,
    pub spans: Vec<Span>,
    pub truth: Truth,
    pub observations: Vec<CounterSnapshot>,
}

impl Trace {
    pub fn t_start(&self) -> f64 {
        self.observations.first().map(|o| o.time).unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.observations.last().map(|o| o.time).unwrap_or(0.0)
    }

    /// Positions (in `plan.nodes`) of a pipeline's nodes.
    pub fn pipeline_positions(&self, pipeline: usize) -> Vec<usize> {
        let index = self.plan.index_map();
        self.pipelines[pipeline]
            .nodes
            .iter()
            .map(|id| index[id])
            .collect()
    }

    /// Fraction of a pipeline's elapsed time at observation `t`.
    pub fn pipeline_true_progress(&self, pipeline: usize, t: usize) -> Result<f64, SimError> {
        let span = self.spans[pipeline];
        let start = self.observations[span.start].time;
        let end = self.observations[span.end].time;
        if end <= start {
            return Err(SimError::DegenerateTrace(format!(
                "{} pipeline {pipeline}",
                self.query_id
            )));
        }
        let time = self.observations[t].time;
        Ok(((time - start) / (end - start)).clamp(0.0, 1.0))
    }
}

/// Elapsed-time fraction of the query at observation `t`.
pub fn ground_truth_progress(trace: &Trace, t: usize) -> Result<f64, SimError> {
    let len = trace.observations.len();
    if t >= len {
        return Err(SimError::ObservationOutOfRange { index: t, len });
    }
    let (start, end) = (trace.t_start(), trace.t_end());
    if end <= start {
        return Err(SimError::DegenerateTrace(trace.query_id.clone()));
    }
    Ok((trace.observations[t].time - start) / (end - start))
}
