//! Progress estimators over counter snapshots.
//!
//! Each estimator has a raw form (may leave [0,1] when estimates are off)
//! and a reported form clamped to [0,1]. Cardinality refinement follows the
//! estimator's origin: the GetNext-ratio estimators (DNE, TGN and their
//! variants) use bound clamping, LUO uses interpolation, and TGNINT has the
//! interpolation folded into its formula.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{NodeId, OperatorKind, PipelineId};
use crate::sim::Trace;

/// Trailing window (seconds) for LUO's byte rate.
pub const DEFAULT_LUO_WINDOW: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("node {0}: lower bound exceeds upper bound")]
    BoundsViolated(NodeId),
    #[error("unsupported estimator '{0}'")]
    Unsupported(String),
    #[error("observation {0} outside pipeline span")]
    OutOfSpan(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    Dne,
    Tgn,
    Luo,
    BatchDne,
    DneSeek,
    TgnInt,
    GoldGn,
    GoldBytes,
}

impl EstimatorId {
    /// The selectable estimators, in tie-breaking order.
    pub const CANDIDATES: [EstimatorId; 6] = [
        EstimatorId::Dne,
        EstimatorId::Tgn,
        EstimatorId::Luo,
        EstimatorId::BatchDne,
        EstimatorId::DneSeek,
        EstimatorId::TgnInt,
    ];

    pub const BASELINE: [EstimatorId; 3] = [EstimatorId::Dne, EstimatorId::Tgn, EstimatorId::Luo];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Dne => "DNE",
            EstimatorId::Tgn => "TGN",
            EstimatorId::Luo => "LUO",
            EstimatorId::BatchDne => "BATCHDNE",
            EstimatorId::DneSeek => "DNESEEK",
            EstimatorId::TgnInt => "TGNINT",
            EstimatorId::GoldGn => "GOLD_GN",
            EstimatorId::GoldBytes => "GOLD_BYTES",
        }
    }

    pub fn is_gold(self) -> bool {
        matches!(self, EstimatorId::GoldGn | EstimatorId::GoldBytes)
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorId {
    type Err = EstimateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = [
            EstimatorId::Dne,
            EstimatorId::Tgn,
            EstimatorId::Luo,
            EstimatorId::BatchDne,
            EstimatorId::DneSeek,
            EstimatorId::TgnInt,
            EstimatorId::GoldGn,
            EstimatorId::GoldBytes,
        ];
        all.iter()
            .copied()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EstimateError::Unsupported(s.to_string()))
    }
}

impl Serialize for EstimatorId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EstimatorId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeCounters {
    pub id: NodeId,
    pub kind: OperatorKind,
    pub driver: bool,
    /// Root of the pipeline (its output is the pipeline's output).
    pub root: bool,
    pub width: f64,
    pub k: f64,
    pub e: f64,
    pub lb: f64,
    pub ub: f64,
    pub r: f64,
    pub w: f64,
}

/// Counters of one pipeline's nodes at one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSnapshot {
    pub pipeline: PipelineId,
    pub time: f64,
    pub nodes: Vec<NodeCounters>,
}

impl PipelineSnapshot {
    pub fn from_trace(trace: &Trace, pipeline: PipelineId, obs: usize) -> Self {
        Self::from_positions(trace, pipeline, &trace.pipeline_positions(pipeline), obs)
    }

    /// Like [`PipelineSnapshot::from_trace`] with the pipeline's node
    /// positions already resolved.
    pub fn from_positions(trace: &Trace, pipeline: PipelineId, positions: &[usize], obs: usize) -> Self {
        let p = &trace.pipelines[pipeline];
        let o = &trace.observations[obs];
        let nodes = positions
            .iter()
            .map(|&i| {
                let node = &trace.plan.nodes[i];
                NodeCounters {
                    id: node.id,
                    kind: node.kind,
                    driver: p.is_driver(node.id),
                    root: p.root == node.id,
                    width: node.est_row_width as f64,
                    k: o.k[i] as f64,
                    e: o.e[i] as f64,
                    lb: o.lb[i] as f64,
                    ub: o.ub[i] as f64,
                    r: o.r[i] as f64,
                    w: o.w[i] as f64,
                }
            })
            .collect();
        PipelineSnapshot {
            pipeline,
            time: o.time,
            nodes,
        }
    }

    pub fn sum_k(&self) -> f64 {
        self.nodes.iter().map(|n| n.k).sum()
    }

    pub fn sum_e(&self) -> f64 {
        self.nodes.iter().map(|n| n.e).sum()
    }

    pub fn driver_sums(&self) -> (f64, f64) {
        self.nodes
            .iter()
            .filter(|n| n.driver)
            .fold((0.0, 0.0), |(k, e), n| (k + n.k, e + n.e))
    }
}

pub fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Fraction of the driver input consumed.
pub fn alpha(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    let (k, e) = s.driver_sums();
    if e <= 0.0 {
        return Err(EstimateError::Degenerate("zero driver estimate"));
    }
    Ok(clamp01(k / e))
}

/// Interpolates each estimate towards the extrapolation `k / alpha`:
/// `alpha * (k / alpha) + (1 - alpha) * e`, clipped to the node's bounds.
/// Nodes keep their estimate when alpha is undefined or zero.
pub fn refine_interpolate(s: &PipelineSnapshot) -> Vec<f64> {
    match alpha(s) {
        Ok(a) if a > 0.0 => s
            .nodes
            .iter()
            .map(|n| {
                let extrapolated = n.k / a;
                let refined = a * extrapolated + (1.0 - a) * n.e;
                if n.lb <= n.ub {
                    refined.clamp(n.lb, n.ub)
                } else {
                    refined
                }
            })
            .collect(),
        _ => s.nodes.iter().map(|n| n.e).collect(),
    }
}

/// Moves estimates outside their bounds onto the nearest bound.
pub fn refine_clamp(s: &PipelineSnapshot) -> Result<Vec<f64>, EstimateError> {
    s.nodes
        .iter()
        .map(|n| {
            if n.lb > n.ub {
                Err(EstimateError::BoundsViolated(n.id))
            } else {
                Ok(n.e.max(n.lb).min(n.ub))
            }
        })
        .collect()
}

fn ratio_over(
    s: &PipelineSnapshot,
    include: impl Fn(&NodeCounters) -> bool,
) -> Result<f64, EstimateError> {
    let e = refine_clamp(s)?;
    let (num, den) = s
        .nodes
        .iter()
        .zip(&e)
        .filter(|(n, _)| include(n))
        .fold((0.0, 0.0), |(k, d), (n, e)| (k + n.k, d + e));
    if den <= 0.0 {
        return Err(EstimateError::Degenerate("zero estimate denominator"));
    }
    Ok(num / den)
}

pub fn dne_raw(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    ratio_over(s, |n| n.driver)
}

pub fn dne(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    dne_raw(s).map(clamp01)
}

pub fn tgn_raw(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    ratio_over(s, |_| true)
}

pub fn tgn(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    tgn_raw(s).map(clamp01)
}

/// DNE with batch sorts counted among the drivers.
pub fn batchdne_raw(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    ratio_over(s, |n| n.driver || n.kind == OperatorKind::BatchSort)
}

pub fn batchdne(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    batchdne_raw(s).map(clamp01)
}

/// DNE with index seeks counted among the drivers.
pub fn dneseek_raw(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    ratio_over(s, |n| n.driver || n.kind == OperatorKind::IndexSeek)
}

pub fn dneseek(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    dneseek_raw(s).map(clamp01)
}

/// `sum k / (sum k + (1 - DNE) * sum e)`; zero before any work.
pub fn tgnint_raw(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    let d = dne(s)?;
    let e = refine_clamp(s)?;
    let sum_k = s.sum_k();
    if sum_k == 0.0 {
        return Ok(0.0);
    }
    let sum_e: f64 = e.iter().sum();
    Ok(sum_k / (sum_k + (1.0 - d) * sum_e))
}

pub fn tgnint(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    tgnint_raw(s).map(clamp01)
}

/// Query progress from per-pipeline DNE values and their driver estimate
/// sums: `sum_j DNE_j * driverE_j / sum of all estimates`.
pub fn dne_query(pipelines: &[(f64, f64)], plan_estimate_sum: f64) -> Result<f64, EstimateError> {
    if plan_estimate_sum <= 0.0 {
        return Err(EstimateError::Degenerate("zero plan-wide estimate"));
    }
    Ok(pipelines.iter().map(|(d, w)| d * w).sum::<f64>() / plan_estimate_sum)
}

/// Bytes processed at a pipeline's inputs and output, including spills.
fn bytes_processed(s: &PipelineSnapshot) -> f64 {
    s.nodes.iter().map(|n| n.r + n.w).sum()
}

/// Estimated bytes still to come, from interpolation-refined GetNext
/// estimates times each node's observed bytes per call.
fn bytes_remaining(s: &PipelineSnapshot) -> f64 {
    let refined = refine_interpolate(s);
    s.nodes
        .iter()
        .zip(refined)
        .map(|(n, e)| {
            let per_call = if n.k > 0.0 {
                (n.r + n.w) / n.k
            } else {
                n.width * (n.driver as u8 + n.root as u8) as f64
            };
            (e - n.k).max(0.0) * per_call
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LuoEstimate {
    pub fraction: f64,
    /// `None` until a full window has elapsed or while the rate is zero.
    pub remaining_seconds: Option<f64>,
}

pub fn luo_raw(s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    let done = bytes_processed(s);
    let total = done + bytes_remaining(s);
    if total <= 0.0 {
        return Err(EstimateError::Degenerate("zero estimated bytes"));
    }
    Ok(done / total)
}

/// LUO over a time-ordered history ending at the current observation.
pub fn luo(history: &[PipelineSnapshot], window: f64) -> Result<LuoEstimate, EstimateError> {
    let now = history
        .last()
        .ok_or(EstimateError::Degenerate("empty snapshot history"))?;
    let fraction = clamp01(luo_raw(now)?);
    let remaining = bytes_remaining(now);
    let done = bytes_processed(now);
    let cutoff = now.time - window;
    let remaining_seconds = history
        .iter()
        .rev()
        .find(|h| h.time <= cutoff)
        .and_then(|past| {
            let rate = (done - bytes_processed(past)) / (now.time - past.time);
            (rate > 0.0).then(|| remaining / rate)
        });
    Ok(LuoEstimate {
        fraction,
        remaining_seconds,
    })
}

/// Query-level gold standards computed with true totals.
pub fn gold_estimate(trace: &Trace, t: usize, model: EstimatorId) -> Result<f64, EstimateError> {
    let o = &trace.observations[t];
    match model {
        EstimatorId::GoldGn => {
            let n: u64 = trace.truth.getnext.iter().sum();
            let k: u64 = o.k.iter().sum();
            ratio(k as f64, n as f64)
        }
        EstimatorId::GoldBytes => {
            let total: u64 = trace
                .truth
                .bytes_read
                .iter()
                .zip(&trace.truth.bytes_written)
                .map(|(r, w)| r + w)
                .sum();
            let done: u64 = o.r.iter().zip(&o.w).map(|(r, w)| r + w).sum();
            ratio(done as f64, total as f64)
        }
        other => Err(EstimateError::Unsupported(other.to_string())),
    }
}

/// Gold standards restricted to one pipeline's nodes.
pub fn gold_pipeline(trace: &Trace, pipeline: PipelineId, t: usize, model: EstimatorId) -> Result<f64, EstimateError> {
    let o = &trace.observations[t];
    let pos = trace.pipeline_positions(pipeline);
    match model {
        EstimatorId::GoldGn => {
            let n: u64 = pos.iter().map(|&i| trace.truth.getnext[i]).sum();
            let k: u64 = pos.iter().map(|&i| o.k[i]).sum();
            ratio(k as f64, n as f64)
        }
        EstimatorId::GoldBytes => {
            let total: u64 = pos
                .iter()
                .map(|&i| trace.truth.bytes_read[i] + trace.truth.bytes_written[i])
                .sum();
            let done: u64 = pos.iter().map(|&i| o.r[i] + o.w[i]).sum();
            ratio(done as f64, total as f64)
        }
        other => Err(EstimateError::Unsupported(other.to_string())),
    }
}

fn ratio(num: f64, den: f64) -> Result<f64, EstimateError> {
    if den <= 0.0 {
        Err(EstimateError::Degenerate("zero true total"))
    } else {
        Ok(num / den)
    }
}

/// Raw (unclamped) value of a selectable estimator on one snapshot.
pub fn estimate_raw(id: EstimatorId, s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    match id {
        EstimatorId::Dne => dne_raw(s),
        EstimatorId::Tgn => tgn_raw(s),
        EstimatorId::Luo => luo_raw(s),
        EstimatorId::BatchDne => batchdne_raw(s),
        EstimatorId::DneSeek => dneseek_raw(s),
        EstimatorId::TgnInt => tgnint_raw(s),
        EstimatorId::GoldGn | EstimatorId::GoldBytes => Err(EstimateError::Unsupported(format!(
            "{id} needs a complete trace"
        ))),
    }
}

/// Reported (clamped) value of a selectable estimator on one snapshot.
pub fn estimate(id: EstimatorId, s: &PipelineSnapshot) -> Result<f64, EstimateError> {
    estimate_raw(id, s).map(clamp01)
}

/// Estimator value for a pipeline of a trace, gold models included.
pub fn estimate_in_trace(
    id: EstimatorId,
    trace: &Trace,
    pipeline: PipelineId,
    t: usize,
    clamped: bool,
) -> Result<f64, EstimateError> {
    let span = trace.spans[pipeline];
    if t < span.start || t > span.end {
        return Err(EstimateError::OutOfSpan(t));
    }
    let v = if id.is_gold() {
        gold_pipeline(trace, pipeline, t, id)?
    } else {
        estimate_raw(id, &PipelineSnapshot::from_trace(trace, pipeline, t))?
    };
    Ok(if clamped { clamp01(v) } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn nc(kind: OperatorKind, driver: bool, k: f64, e: f64) -> NodeCounters {
        NodeCounters {
            id: 0,
            kind,
            driver,
            root: false,
            width: 1.0,
            k,
            e,
            lb: k,
            ub: f64::MAX,
            r: 0.0,
            w: 0.0,
        }
    }

    fn snap(nodes: Vec<NodeCounters>) -> PipelineSnapshot {
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(i, mut n)| {
                n.id = i as u32;
                n
            })
            .collect();
        PipelineSnapshot {
            pipeline: 0,
            time: 0.0,
            nodes,
        }
    }

    const EPS: f64 = 1e-9;

    #[test]
    fn alpha_examples() {
        let s = snap(vec![nc(OperatorKind::TableScan, true, 25.0, 100.0)]);
        assert!((alpha(&s).unwrap() - 0.25).abs() < EPS);
        let s = snap(vec![nc(OperatorKind::TableScan, true, 100.0, 100.0)]);
        assert_eq!(alpha(&s).unwrap(), 1.0);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 30.0, 50.0),
            nc(OperatorKind::TableScan, true, 10.0, 50.0),
        ]);
        assert!((alpha(&s).unwrap() - 0.4).abs() < EPS);
        let s = snap(vec![nc(OperatorKind::TableScan, true, 0.0, 0.0)]);
        assert!(matches!(alpha(&s), Err(EstimateError::Degenerate(_))));
    }

    #[test]
    fn interpolation_examples() {
        // alpha = 0.5 from the driver; node k=10, e=40 -> 30
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 50.0, 100.0),
            nc(OperatorKind::Filter, false, 10.0, 40.0),
        ]);
        let r = refine_interpolate(&s);
        assert!((r[1] - 30.0).abs() < EPS);
        // alpha = 1 -> e_new = k
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 100.0, 100.0),
            nc(OperatorKind::Filter, false, 37.0, 80.0),
        ]);
        assert!((refine_interpolate(&s)[1] - 37.0).abs() < EPS);
        // alpha -> 0 leaves e unchanged in the limit
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 1e-9, 100.0),
            nc(OperatorKind::Filter, false, 0.0, 80.0),
        ]);
        assert!((refine_interpolate(&s)[1] - 80.0).abs() < 1e-6);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 0.0, 100.0),
            nc(OperatorKind::Filter, false, 0.0, 80.0),
        ]);
        assert_eq!(refine_interpolate(&s)[1], 80.0);
    }

    #[test]
    fn clamp_examples() {
        let mut n = nc(OperatorKind::Filter, false, 0.0, 120.0);
        n.lb = 0.0;
        n.ub = 100.0;
        assert_eq!(refine_clamp(&snap(vec![n.clone()])).unwrap(), vec![100.0]);
        n.e = 5.0;
        n.lb = 10.0;
        assert_eq!(refine_clamp(&snap(vec![n.clone()])).unwrap(), vec![10.0]);
        n.e = 50.0;
        assert_eq!(refine_clamp(&snap(vec![n.clone()])).unwrap(), vec![50.0]);
        n.lb = 200.0;
        assert!(matches!(
            refine_clamp(&snap(vec![n])),
            Err(EstimateError::BoundsViolated(0))
        ));
    }

    #[test]
    fn dne_and_tgn_examples() {
        let s = snap(vec![nc(OperatorKind::TableScan, true, 25.0, 100.0)]);
        assert!((dne(&s).unwrap() - 0.25).abs() < EPS);
        let s = snap(vec![nc(OperatorKind::TableScan, true, 100.0, 100.0)]);
        assert_eq!(dne(&s).unwrap(), 1.0);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 30.0, 50.0),
            nc(OperatorKind::TableScan, true, 10.0, 50.0),
        ]);
        assert!((dne(&s).unwrap() - 0.4).abs() < EPS);

        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 50.0, 100.0),
            nc(OperatorKind::Filter, false, 10.0, 40.0),
        ]);
        assert!((tgn(&s).unwrap() - 60.0 / 140.0).abs() < EPS);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 0.0, 100.0),
            nc(OperatorKind::Filter, false, 0.0, 40.0),
        ]);
        assert_eq!(tgn(&s).unwrap(), 0.0);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 100.0, 100.0),
            nc(OperatorKind::Filter, false, 40.0, 40.0),
        ]);
        assert_eq!(tgn(&s).unwrap(), 1.0);
    }

    #[test]
    fn dne_query_examples() {
        // one pipeline whose nodes are all drivers: weights collapse
        assert!((dne_query(&[(0.3, 100.0)], 100.0).unwrap() - 0.3).abs() < EPS);
        assert!((dne_query(&[(0.5, 100.0), (0.2, 300.0)], 1000.0).unwrap() - 0.11).abs() < EPS);
        assert_eq!(dne_query(&[(0.0, 100.0), (0.0, 300.0)], 1000.0).unwrap(), 0.0);
        assert!(dne_query(&[(0.5, 1.0)], 0.0).is_err());
    }

    #[test]
    fn batch_and_seek_variants() {
        let plain = snap(vec![
            nc(OperatorKind::TableScan, true, 30.0, 100.0),
            nc(OperatorKind::Filter, false, 3.0, 10.0),
        ]);
        assert_eq!(batchdne(&plain).unwrap(), dne(&plain).unwrap());
        assert_eq!(dneseek(&plain).unwrap(), dne(&plain).unwrap());

        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 100.0, 100.0),
            nc(OperatorKind::BatchSort, false, 40.0, 100.0),
        ]);
        assert!((batchdne(&s).unwrap() - 0.7).abs() < EPS);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 100.0, 100.0),
            nc(OperatorKind::BatchSort, false, 100.0, 100.0),
        ]);
        assert_eq!(batchdne(&s).unwrap(), 1.0);

        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 50.0, 100.0),
            nc(OperatorKind::IndexSeek, false, 200.0, 400.0),
        ]);
        assert!((dneseek(&s).unwrap() - 0.5).abs() < EPS);
        // seek estimate far too low: the lower bound k lifts it
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 50.0, 100.0),
            nc(OperatorKind::IndexSeek, false, 500.0, 10.0),
        ]);
        assert!(dneseek(&s).unwrap() <= 1.0);
        assert!(dneseek_raw(&s).unwrap() <= 1.0);
    }

    #[test]
    fn tgnint_examples() {
        // sum k = 60, DNE = 0.5, sum e = 140
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 50.0, 100.0),
            nc(OperatorKind::Filter, false, 10.0, 40.0),
        ]);
        assert!((tgnint(&s).unwrap() - 60.0 / 130.0).abs() < EPS);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 100.0, 100.0),
            nc(OperatorKind::Filter, false, 10.0, 40.0),
        ]);
        assert_eq!(tgnint(&s).unwrap(), 1.0);
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 0.0, 100.0),
            nc(OperatorKind::Filter, false, 0.0, 40.0),
        ]);
        assert_eq!(tgnint(&s).unwrap(), 0.0);
    }

    #[test]
    fn luo_examples() {
        assert_eq!(DEFAULT_LUO_WINDOW, 10.0);
        const MB: f64 = 1e6;
        // 50 MB read so far at the driver, 75 MB more expected
        let mut d = nc(OperatorKind::TableScan, true, 50.0, 125.0);
        d.width = MB;
        d.r = 50.0 * MB;
        d.lb = 125.0;
        d.ub = 125.0;
        let now = PipelineSnapshot {
            pipeline: 0,
            time: 100.0,
            nodes: vec![d.clone()],
        };
        assert!((luo_raw(&now).unwrap() - 0.4).abs() < EPS);
        // 5 MB over the trailing 10 s -> 0.5 MB/s -> 150 s for 75 MB
        let mut past_node = d.clone();
        past_node.k = 45.0;
        past_node.r = 45.0 * MB;
        let past = PipelineSnapshot {
            pipeline: 0,
            time: 90.0,
            nodes: vec![past_node],
        };
        let est = luo(&[past.clone(), now.clone()], 10.0).unwrap();
        assert!((est.fraction - 0.4).abs() < EPS);
        assert!((est.remaining_seconds.unwrap() - 150.0).abs() < 1e-6);
        // less than one window of history: fraction only
        let est = luo(&[now], 20.0).unwrap();
        assert!(est.remaining_seconds.is_none());

        let empty = snap(vec![nc(OperatorKind::TableScan, true, 0.0, 0.0)]);
        assert!(luo_raw(&empty).is_err());
    }

    #[test]
    fn estimator_names_and_dispatch() {
        assert_eq!("TGNINT".parse::<EstimatorId>().unwrap(), EstimatorId::TgnInt);
        assert!(matches!(
            "PMAX".parse::<EstimatorId>(),
            Err(EstimateError::Unsupported(_))
        ));
        let s = snap(vec![
            nc(OperatorKind::TableScan, true, 30.0, 100.0),
            nc(OperatorKind::Filter, false, 3.0, 10.0),
        ]);
        assert_eq!(estimate(EstimatorId::Dne, &s).unwrap(), dne(&s).unwrap());
        assert_eq!(estimate(EstimatorId::BatchDne, &s).unwrap(), dne(&s).unwrap());
        assert!(estimate(EstimatorId::GoldGn, &s).is_err());
        let mut sorted = EstimatorId::CANDIDATES.to_vec();
        sorted.sort();
        assert_eq!(sorted, EstimatorId::CANDIDATES.to_vec());
    }
}
