//! Static plan features and dynamic execution features for estimator
//! selection.
//!
//! A [`FeatureVector`] follows a fixed [`FeatureSchema`]: per-operator
//! counts, cardinalities and relative selectivities, the driver share, then
//! pairwise estimator differences and time-correlation features at the
//! checkpoints `t{x}`, and one indicator per checkpoint telling whether it
//! was reached. Undefined entries carry a cleared mask bit and the value 0.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{estimate_raw, EstimatorId, PipelineSnapshot};
use crate::plan::{OperatorKind, Pipeline, PipelineId, Plan};
use crate::sim::Trace;

pub const SCHEMA_VERSION: u32 = 1;

/// Checkpoint percentages used for dynamic features.
pub const CHECKPOINTS: [u32; 5] = [1, 2, 5, 10, 20];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown node {0} in pipeline")]
    UnknownNode(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorForm {
    /// `(T(t{ix/k}) - T0) / (T(t{x/k}) - T0) / est(t{x})`
    #[default]
    Verbatim,
    /// `(T(t{ix/k}) - T0) / (T(t{x}) - T0) / est(t{ix/k})`
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Estimators with time-correlation features.
    pub estimators: Vec<EstimatorId>,
    /// Ordered pairs with absolute-difference features.
    pub pairs: Vec<(EstimatorId, EstimatorId)>,
    pub checkpoints: Vec<u32>,
    /// Number of sub-checkpoints per time-correlation feature.
    pub k: u32,
    pub cor_form: CorForm,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        use EstimatorId::*;
        FeatureConfig {
            estimators: EstimatorId::CANDIDATES.to_vec(),
            pairs: vec![(Dne, Tgn), (Dne, TgnInt), (Tgn, TgnInt)],
            checkpoints: CHECKPOINTS.to_vec(),
            k: 4,
            cor_form: CorForm::Verbatim,
        }
    }
}

impl FeatureConfig {
    /// Every ordered pair of distinct estimators, in canonical order.
    pub fn all_pairs(estimators: &[EstimatorId]) -> Vec<(EstimatorId, EstimatorId)> {
        let mut out = Vec::new();
        for (i, &a) in estimators.iter().enumerate() {
            for &b in &estimators[i + 1..] {
                out.push((a, b));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub version: u32,
    pub config: FeatureConfig,
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(config: FeatureConfig) -> Self {
        let mut names = Vec::new();
        for prefix in ["Count", "Card", "SelAt", "SelAbove", "SelBelow"] {
            for op in OperatorKind::ALL {
                names.push(format!("{prefix}_{}", op.name()));
            }
        }
        names.push("SelAt_DN".to_string());
        for &(a, b) in &config.pairs {
            for x in &config.checkpoints {
                names.push(format!("{a}vs{b}_{x}"));
            }
        }
        for est in &config.estimators {
            for i in 1..=config.k {
                for x in &config.checkpoints {
                    names.push(format!("Cor_{est}_{i}_{x}"));
                }
            }
        }
        for x in &config.checkpoints {
            names.push(format!("Reached_{x}"));
        }
        FeatureSchema {
            version: SCHEMA_VERSION,
            config,
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn static_len(&self) -> usize {
        5 * OperatorKind::ALL.len() + 1
    }

    pub fn dynamic_len(&self) -> usize {
        self.len() - self.static_len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Identifies version and column layout; models record it.
    pub fn fingerprint(&self) -> String {
        let hash = self.names.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, n| {
            n.bytes()
                .chain(std::iter::once(0))
                .fold(h, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        });
        format!("v{}-{}-{hash:016x}", self.version, self.len())
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema::new(FeatureConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Static portion of a feature vector; always fully defined.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures(pub Vec<f64>);

/// Dynamic portion of a feature vector with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFeatures {
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

impl DynamicFeatures {
    fn masked(len: usize) -> Self {
        DynamicFeatures {
            values: vec![0.0; len],
            defined: vec![false; len],
        }
    }

    fn set(&mut self, i: usize, v: Option<f64>) {
        match v.filter(|v| v.is_finite()) {
            Some(v) => {
                self.values[i] = v;
                self.defined[i] = true;
            }
            None => {
                self.values[i] = 0.0;
                self.defined[i] = false;
            }
        }
    }
}

/// Selection stage: before execution, or at a reached checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Static,
    At(u32),
}

impl Stage {
    pub fn all(checkpoints: &[u32]) -> Vec<Stage> {
        std::iter::once(Stage::Static)
            .chain(checkpoints.iter().map(|&x| Stage::At(x)))
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Static => f.write_str("static"),
            Stage::At(x) => write!(f, "t{x}"),
        }
    }
}

/// Features of one pipeline computed from its optimizer estimates.
pub fn static_features(plan: &Plan, pipeline: &Pipeline) -> Result<StaticFeatures, FeatureError> {
    let index = plan.index_map();
    let positions = pipeline
        .nodes
        .iter()
        .map(|id| index.get(id).copied().ok_or(FeatureError::UnknownNode(*id)))
        .collect::<Result<Vec<_>, _>>()?;
    let descendants = plan.descendants();
    let est = |i: usize| plan.nodes[i].est_cardinality as f64;
    let total: f64 = positions.iter().map(|&i| est(i)).sum();
    if total <= 0.0 {
        return Err(FeatureError::Degenerate("zero pipeline estimate"));
    }
    let ops = OperatorKind::ALL.len();
    let mut v = vec![0.0; 5 * ops + 1];
    for &i in &positions {
        let kind = plan.nodes[i].kind.index();
        v[kind] += 1.0;
        v[ops + kind] += est(i);
    }
    for op in 0..ops {
        v[2 * ops + op] = v[ops + op] / total;
    }
    for op in OperatorKind::ALL {
        let of_kind: Vec<usize> = positions
            .iter()
            .copied()
            .filter(|&j| plan.nodes[j].kind == op)
            .collect();
        if of_kind.is_empty() {
            continue;
        }
        let mut above = 0.0;
        let mut below = 0.0;
        for &i in &positions {
            if of_kind.iter().any(|&j| descendants[i].contains(&j)) {
                above += est(i);
            }
            if of_kind.iter().any(|&j| descendants[j].contains(&i)) {
                below += est(i);
            }
        }
        v[3 * ops + op.index()] = above / total;
        v[4 * ops + op.index()] = below / total;
    }
    let drivers: f64 = positions
        .iter()
        .filter(|&&i| pipeline.is_driver(plan.nodes[i].id))
        .map(|&i| est(i))
        .sum();
    v[5 * ops] = drivers / total;
    Ok(StaticFeatures(v))
}

/// First index whose consumed driver fraction reaches `fraction`.
pub fn first_reaching(
    driver_k: &[f64],
    driver_e: &[f64],
    fraction: f64,
) -> Result<Option<usize>, FeatureError> {
    for (t, (&k, &e)) in driver_k.iter().zip(driver_e).enumerate() {
        if e <= 0.0 {
            return Err(FeatureError::Degenerate("zero driver estimate"));
        }
        if k / e >= fraction {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Observations of one pipeline from its start up to a prefix end.
pub struct PipelinePrefix<'a> {
    pub trace: &'a Trace,
    pub pipeline: PipelineId,
    positions: Vec<usize>,
    drivers: Vec<usize>,
    start: usize,
    end: usize,
}

impl<'a> PipelinePrefix<'a> {
    /// `end` is an inclusive observation index; `None` means the whole
    /// pipeline. An `end` before the pipeline starts yields an empty prefix.
    pub fn new(trace: &'a Trace, pipeline: PipelineId, end: Option<usize>) -> Self {
        let span = trace.spans[pipeline];
        let positions = trace.pipeline_positions(pipeline);
        let p = &trace.pipelines[pipeline];
        let drivers = positions
            .iter()
            .copied()
            .filter(|&i| p.is_driver(trace.plan.nodes[i].id))
            .collect();
        PipelinePrefix {
            trace,
            pipeline,
            positions,
            drivers,
            start: span.start,
            end: end.map_or(span.end, |e| e.min(span.end)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn start_time(&self) -> f64 {
        self.trace.observations[self.start].time
    }

    pub fn time(&self, obs: usize) -> f64 {
        self.trace.observations[obs].time
    }

    pub fn snapshot(&self, obs: usize) -> PipelineSnapshot {
        PipelineSnapshot::from_positions(self.trace, self.pipeline, &self.positions, obs)
    }

    /// `t{x}`: the first observation at which `x` percent of the driver
    /// input has been consumed.
    pub fn checkpoint(&self, x: f64) -> Result<Option<usize>, FeatureError> {
        if self.is_empty() {
            return Ok(None);
        }
        let obs = &self.trace.observations;
        let sum = |t: usize, f: fn(&crate::sim::CounterSnapshot) -> &Vec<u64>| -> f64 {
            self.drivers.iter().map(|&i| f(&obs[t])[i] as f64).sum()
        };
        let range = self.start..=self.end;
        let k: Vec<f64> = range.clone().map(|t| sum(t, |o| &o.k)).collect();
        let e: Vec<f64> = range.map(|t| sum(t, |o| &o.e)).collect();
        Ok(first_reaching(&k, &e, x / 100.0)?.map(|i| i + self.start))
    }

    fn raw(&self, id: EstimatorId, obs: usize) -> Option<f64> {
        estimate_raw(id, &self.snapshot(obs)).ok()
    }
}

/// `|A(t{x}) - B(t{x})|` for every configured pair and checkpoint, using
/// raw estimator values.
pub fn pairwise_diff_features(
    schema: &FeatureSchema,
    prefix: &PipelinePrefix,
) -> Result<DynamicFeatures, FeatureError> {
    let cfg = &schema.config;
    let mut out = DynamicFeatures::masked(cfg.pairs.len() * cfg.checkpoints.len());
    for (xi, &x) in cfg.checkpoints.iter().enumerate() {
        let Some(t) = prefix.checkpoint(x as f64)? else {
            continue;
        };
        for (pi, &(a, b)) in cfg.pairs.iter().enumerate() {
            let v = match (prefix.raw(a, t), prefix.raw(b, t)) {
                (Some(a), Some(b)) => Some((a - b).abs()),
                _ => None,
            };
            out.set(pi * cfg.checkpoints.len() + xi, v);
        }
    }
    Ok(out)
}

/// `(time - t0) / (base_time - t0) * 1 / est`; undefined when either
/// divisor is zero.
pub fn cor_value(time: f64, base_time: f64, t0: f64, est: f64) -> Option<f64> {
    let den = base_time - t0;
    (den != 0.0 && est != 0.0).then(|| (time - t0) / den * (1.0 / est))
}

/// Time-correlation features `Cor_est,i,x` for every configured estimator,
/// `i` in `1..=k` and checkpoint `x`.
pub fn time_correlation_features(
    schema: &FeatureSchema,
    prefix: &PipelinePrefix,
) -> Result<DynamicFeatures, FeatureError> {
    let cfg = &schema.config;
    let kk = cfg.k as usize;
    let nx = cfg.checkpoints.len();
    let mut out = DynamicFeatures::masked(cfg.estimators.len() * kk * nx);
    if prefix.is_empty() {
        return Ok(out);
    }
    let t0 = prefix.start_time();
    for (xi, &x) in cfg.checkpoints.iter().enumerate() {
        let Some(tx) = prefix.checkpoint(x as f64)? else {
            continue;
        };
        let sub: Vec<Option<usize>> = (1..=kk)
            .map(|i| prefix.checkpoint(x as f64 * i as f64 / kk as f64))
            .collect::<Result<_, _>>()?;
        let base = sub[0];
        for (ei, &est) in cfg.estimators.iter().enumerate() {
            let at_x = prefix.raw(est, tx);
            for i in 0..kk {
                let v = match cfg.cor_form {
                    CorForm::Verbatim => match (sub[i], base, at_x) {
                        (Some(ti), Some(tb), Some(ev)) => {
                            cor_value(prefix.time(ti), prefix.time(tb), t0, ev)
                        }
                        _ => None,
                    },
                    CorForm::Alternative => sub[i].and_then(|ti| {
                        let ev = prefix.raw(est, ti)?;
                        cor_value(prefix.time(ti), prefix.time(tx), t0, ev)
                    }),
                };
                out.set((ei * kk + i) * nx + xi, v);
            }
        }
    }
    Ok(out)
}

/// Indicators of the checkpoints reached in the prefix; always defined.
pub fn reached_features(
    schema: &FeatureSchema,
    prefix: &PipelinePrefix,
) -> Result<DynamicFeatures, FeatureError> {
    let n = schema.config.checkpoints.len();
    let mut out = DynamicFeatures {
        values: vec![0.0; n],
        defined: vec![true; n],
    };
    for (i, &x) in schema.config.checkpoints.iter().enumerate() {
        if prefix.checkpoint(x as f64)?.is_some() {
            out.values[i] = 1.0;
        }
    }
    Ok(out)
}

/// All dynamic features of a prefix in schema order.
pub fn dynamic_features(
    schema: &FeatureSchema,
    prefix: &PipelinePrefix,
) -> Result<DynamicFeatures, FeatureError> {
    let mut out = pairwise_diff_features(schema, prefix)?;
    for part in [
        time_correlation_features(schema, prefix)?,
        reached_features(schema, prefix)?,
    ] {
        out.values.extend(part.values);
        out.defined.extend(part.defined);
    }
    Ok(out)
}

/// Dynamic features before execution: every checkpoint unreached.
pub fn unreached_features(schema: &FeatureSchema) -> DynamicFeatures {
    let n = schema.config.checkpoints.len();
    let mut out = DynamicFeatures::masked(schema.dynamic_len());
    let reached = schema.dynamic_len() - n;
    for i in reached..schema.dynamic_len() {
        out.defined[i] = true;
    }
    out
}

pub fn assemble(
    schema: &FeatureSchema,
    static_part: &StaticFeatures,
    dynamic: &DynamicFeatures,
) -> Result<FeatureVector, FeatureError> {
    if static_part.0.len() != schema.static_len()
        || dynamic.values.len() != schema.dynamic_len()
        || dynamic.defined.len() != schema.dynamic_len()
    {
        return Err(FeatureError::SchemaMismatch(format!(
            "expected {} static and {} dynamic values, got {} and {}",
            schema.static_len(),
            schema.dynamic_len(),
            static_part.0.len(),
            dynamic.values.len()
        )));
    }
    let mut values = static_part.0.clone();
    let mut defined = vec![true; values.len()];
    for (v, d) in dynamic.values.iter().zip(&dynamic.defined) {
        values.push(if *d { *v } else { 0.0 });
        defined.push(*d);
    }
    Ok(FeatureVector { values, defined })
}

/// Observation index at which a stage's features become available, or
/// `None` for the static stage. Unreached checkpoints resolve to the
/// pipeline's last observation.
pub fn stage_observation(trace: &Trace, pipeline: PipelineId, stage: Stage) -> Result<Option<usize>, FeatureError> {
    match stage {
        Stage::Static => Ok(None),
        Stage::At(x) => {
            let prefix = PipelinePrefix::new(trace, pipeline, None);
            Ok(Some(prefix.checkpoint(x as f64)?.unwrap_or(trace.spans[pipeline].end)))
        }
    }
}

/// Feature vector of a pipeline as seen at observation `obs` (`None`
/// before execution starts).
pub fn features_at(
    schema: &FeatureSchema,
    trace: &Trace,
    pipeline: PipelineId,
    obs: Option<usize>,
) -> Result<FeatureVector, FeatureError> {
    let st = static_features(&trace.plan, &trace.pipelines[pipeline])?;
    let dynamic = match obs {
        None => unreached_features(schema),
        Some(o) => {
            let prefix = PipelinePrefix::new(trace, pipeline, Some(o));
            if prefix.is_empty() {
                unreached_features(schema)
            } else {
                dynamic_features(schema, &prefix)?
            }
        }
    };
    assemble(schema, &st, &dynamic)
}

/// One feature vector per stage for a pipeline.
pub fn stage_features(
    schema: &FeatureSchema,
    trace: &Trace,
    pipeline: PipelineId,
) -> Result<Vec<(Stage, FeatureVector)>, FeatureError> {
    Stage::all(&schema.config.checkpoints)
        .into_iter()
        .map(|stage| {
            let obs = stage_observation(trace, pipeline, stage)?;
            Ok((stage, features_at(schema, trace, pipeline, obs)?))
        })
        .collect()
}

/// One row of a feature matrix file.
pub struct FeatureRow<'a> {
    pub query_id: &'a str,
    pub pipeline: PipelineId,
    pub stage: Stage,
    pub vector: &'a FeatureVector,
}

/// Writes a feature matrix: identifying columns, the schema names, then
/// one `defined_<name>` column per feature.
pub fn write_feature_matrix<W: Write>(
    out: W,
    schema: &FeatureSchema,
    rows: &[FeatureRow],
) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| FeatureError::Io(e.into());
    let mut header = vec!["query_id".to_string(), "pipeline".into(), "stage".into()];
    header.extend(schema.names.iter().cloned());
    header.extend(schema.names.iter().map(|n| format!("defined_{n}")));
    w.write_record(&header).map_err(to_io)?;
    for r in rows {
        if r.vector.len() != schema.len() {
            return Err(FeatureError::SchemaMismatch("row width differs from schema".into()));
        }
        let mut rec = vec![r.query_id.to_string(), r.pipeline.to_string(), r.stage.to_string()];
        rec.extend(r.vector.values.iter().map(|v| v.to_string()));
        rec.extend(r.vector.defined.iter().map(|d| (*d as u8).to_string()));
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
