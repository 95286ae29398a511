//! Error metrics, comparison tables and the leave-one-family-out
//! evaluation harness.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{estimate_in_trace, EstimatorId};
use crate::features::{FeatureConfig, FeatureSchema};
use crate::par::Exec;
use crate::plan::PipelineId;
use crate::selection::mart::{train_mart, Dataset, MartError, MartParams};
use crate::selection::{
    build_training_set, pipeline_progress, select_online, train_selection, SelectionError,
    SelectionModel,
};
use crate::sim::{ground_truth_progress, Trace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty observation set")]
    Empty,
    #[error("length mismatch: {0} estimates for {1} observations")]
    Length(usize, usize),
    #[error("unsupported norm p = {0}")]
    BadP(u32),
    #[error("thresholds must be strictly ascending")]
    Thresholds,
    #[error("family '{0}' not present in the traces")]
    MissingFamily(String),
    #[error("need {needed} features for {rounds} rounds, have {have}")]
    TooManyRounds { rounds: usize, have: usize, needed: usize },
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Mart(#[from] MartError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Average over observations.
    #[default]
    Mean,
    /// Plain sum over observations.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorOptions {
    /// Score the clamped estimator outputs (otherwise raw values).
    pub clamped: bool,
    pub norm: Norm,
}

impl Default for ErrorOptions {
    fn default() -> Self {
        ErrorOptions {
            clamped: true,
            norm: Norm::Mean,
        }
    }
}

/// `(agg_t |est_t - true_t|^p)^(1/p)` with `agg` the mean or the sum.
pub fn lp_error(estimates: &[f64], truth: &[f64], p: u32, norm: Norm) -> Result<f64, EvalError> {
    if !(p == 1 || p == 2) {
        return Err(EvalError::BadP(p));
    }
    if estimates.len() != truth.len() {
        return Err(EvalError::Length(estimates.len(), truth.len()));
    }
    if estimates.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).abs().powi(p as i32))
        .sum();
    let agg = match norm {
        Norm::Mean => total / estimates.len() as f64,
        Norm::Sum => total,
    };
    Ok(if p == 1 { agg } else { agg.sqrt() })
}

/// True progress of a pipeline at each of its observations.
pub fn truth_series(trace: &Trace, pipeline: PipelineId) -> Option<Vec<f64>> {
    trace.spans[pipeline]
        .indices()
        .map(|t| trace.pipeline_true_progress(pipeline, t).ok())
        .collect()
}

/// An estimator's values at each observation of a pipeline, or `None` if
/// it is degenerate at any of them.
pub fn estimator_series(trace: &Trace, pipeline: PipelineId, id: EstimatorId, clamped: bool) -> Option<Vec<f64>> {
    trace.spans[pipeline]
        .indices()
        .map(|t| estimate_in_trace(id, trace, pipeline, t, clamped).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineError {
    pub l1: f64,
    pub l2: f64,
}

/// L1 and L2 error of each candidate over a pipeline. `None` when the
/// pipeline has no duration to measure progress against.
pub fn pipeline_errors(
    trace: &Trace,
    pipeline: PipelineId,
    candidates: &[EstimatorId],
    opts: &ErrorOptions,
) -> Option<Vec<Option<PipelineError>>> {
    let truth = truth_series(trace, pipeline)?;
    Some(
        candidates
            .iter()
            .map(|&id| {
                let est = estimator_series(trace, pipeline, id, opts.clamped)?;
                Some(PipelineError {
                    l1: lp_error(&est, &truth, 1, opts.norm).ok()?,
                    l2: lp_error(&est, &truth, 2, opts.norm).ok()?,
                })
            })
            .collect(),
    )
}

/// Minimum defined error and the first candidate attaining it.
pub fn oracle_policy(errors: &[Option<f64>]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, e) in errors.iter().enumerate() {
        if let Some(e) = *e {
            if best.is_none_or(|(b, _)| e < b) {
                best = Some((e, i));
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    /// Final choice of the online schedule.
    Selection,
    /// Choice made before execution only.
    StaticSelection,
    Oracle,
    Fixed(EstimatorId),
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Selection => f.write_str("SELECTION"),
            Policy::StaticSelection => f.write_str("STATIC_SELECTION"),
            Policy::Oracle => f.write_str("ORACLE"),
            Policy::Fixed(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub family: String,
    pub query_id: String,
    pub pipeline: PipelineId,
    pub candidates: Vec<EstimatorId>,
    pub errors: Vec<Option<PipelineError>>,
    pub static_choice: EstimatorId,
    pub selected: EstimatorId,
}

impl PipelineResult {
    pub fn l1(&self) -> Vec<Option<f64>> {
        self.errors.iter().map(|e| e.map(|e| e.l1)).collect()
    }

    fn index(&self, id: EstimatorId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == id)
    }

    pub fn oracle(&self) -> (f64, EstimatorId) {
        let (e, i) = oracle_policy(&self.l1()).expect("result has a defined candidate");
        (e, self.candidates[i])
    }

    pub fn choice(&self, policy: Policy) -> Option<EstimatorId> {
        match policy {
            Policy::Selection => Some(self.selected),
            Policy::StaticSelection => Some(self.static_choice),
            Policy::Oracle => Some(self.oracle().1),
            Policy::Fixed(id) => self.index(id).map(|_| id),
        }
    }

    pub fn error(&self, policy: Policy) -> Option<PipelineError> {
        self.errors[self.index(self.choice(policy)?)?]
    }
}

/// Fraction of pipelines on which the policy attains the minimum error.
pub fn percent_optimal(results: &[PipelineResult], policy: Policy) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|r| r.error(policy).is_some_and(|e| e.l1 <= r.oracle().0))
        .count();
    hits as f64 / results.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub policy: Policy,
    /// Fraction of included pipelines whose error exceeds each threshold
    /// times the minimum error.
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<RatioRow>,
    pub included: usize,
    /// Pipelines skipped because their minimum error is below 1e-6.
    pub excluded: usize,
}

pub const RATIO_MIN_ERROR: f64 = 1e-6;

pub fn ratio_table(results: &[PipelineResult], policies: &[Policy], thresholds: &[f64]) -> Result<RatioTable, EvalError> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Thresholds);
    }
    let included: Vec<&PipelineResult> = results
        .iter()
        .filter(|r| r.oracle().0 >= RATIO_MIN_ERROR)
        .collect();
    let rows = policies
        .iter()
        .map(|&policy| {
            let fractions = thresholds
                .iter()
                .map(|&th| {
                    if included.is_empty() {
                        return 0.0;
                    }
                    let over = included
                        .iter()
                        .filter(|r| r.error(policy).is_none_or(|e| e.l1 / r.oracle().0 > th))
                        .count();
                    over as f64 / included.len() as f64
                })
                .collect();
            RatioRow { policy, fractions }
        })
        .collect();
    Ok(RatioTable {
        thresholds: thresholds.to_vec(),
        rows,
        included: included.len(),
        excluded: results.len() - included.len(),
    })
}

pub const NEAR_ABS: f64 = 0.01;
pub const NEAR_REL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearOptimality {
    pub estimator: EstimatorId,
    pub almost_optimal: f64,
    pub significantly_outperforms: f64,
}

/// Whether error `e` is close enough to the minimum `min`.
pub fn almost_optimal(e: f64, min: f64) -> bool {
    e <= min || e - min < NEAR_ABS || (min > 0.0 && (e - min) / min < NEAR_REL)
}

/// Whether `e` beats the next-best error by a clear margin.
pub fn significantly_outperforms(e: f64, next_best: f64) -> bool {
    let gap = next_best - e;
    gap > NEAR_ABS && (e == 0.0 || gap / e > NEAR_REL)
}

pub fn near_optimality_table(results: &[PipelineResult], candidates: &[EstimatorId]) -> Vec<NearOptimality> {
    candidates
        .iter()
        .map(|&id| {
            let mut almost = 0usize;
            let mut sig = 0usize;
            for r in results {
                let Some(i) = r.index(id) else { continue };
                let l1 = r.l1();
                let Some(e) = l1[i] else { continue };
                let min = r.oracle().0;
                if almost_optimal(e, min) {
                    almost += 1;
                }
                let next = l1
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .filter_map(|(_, x)| *x)
                    .fold(f64::INFINITY, f64::min);
                if e < next && significantly_outperforms(e, next) {
                    sig += 1;
                }
            }
            let n = results.len().max(1) as f64;
            NearOptimality {
                estimator: id,
                almost_optimal: almost as f64 / n,
                significantly_outperforms: sig as f64 / n,
            }
        })
        .collect()
}

/// Greedily adds the feature whose inclusion gives the lowest 2-fold
/// cross-validated MSE. Returns each selected feature with that MSE.
pub fn greedy_feature_selection(
    data: &Dataset,
    labels: &[f64],
    rounds: usize,
    params: &MartParams,
    exec: Exec,
) -> Result<Vec<(usize, f64)>, EvalError> {
    let f = data.features();
    if rounds == 0 || rounds > f {
        return Err(EvalError::TooManyRounds {
            rounds,
            have: f,
            needed: rounds.max(1),
        });
    }
    let n = data.rows();
    if n < 2 {
        return Err(EvalError::Empty);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
    let (a, b) = idx.split_at(n / 2);
    let mut folds = [a.to_vec(), b.to_vec()];
    folds[0].sort_unstable();
    folds[1].sort_unstable();

    let cv_mse = |features: &[usize]| -> Result<f64, EvalError> {
        let cols = data.select_features(features);
        let mut sse = 0.0;
        for k in 0..2 {
            let (train, test) = (&folds[k], &folds[1 - k]);
            let y: Vec<f64> = train.iter().map(|&r| labels[r]).collect();
            let model = train_mart(&cols.select_rows(train), &y, params, "", Exec::Sequential)?;
            for &r in test {
                let v: Vec<f64> = features.iter().map(|&j| data.value(r, j)).collect();
                sse += (model.predict(&v)? - labels[r]).powi(2);
            }
        }
        Ok(sse / n as f64)
    };

    let mut selected: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..rounds {
        let remaining: Vec<usize> = (0..f).filter(|j| !selected.contains(j)).collect();
        let scores = exec.map(&remaining, |&j| {
            let mut set = selected.clone();
            set.push(j);
            cv_mse(&set)
        });
        let mut best: Option<(usize, f64)> = None;
        for (&j, s) in remaining.iter().zip(scores) {
            let s = s?;
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((j, s));
            }
        }
        let (j, s) = best.expect("at least one remaining feature");
        selected.push(j);
        out.push((j, s));
    }
    Ok(out)
}

/// One row of the per-observation series file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub family: String,
    pub query_id: String,
    pub pipeline: PipelineId,
    pub observation: usize,
    /// Elapsed fraction of the whole query.
    pub time_fraction: f64,
    /// Elapsed fraction of the pipeline.
    pub true_progress: f64,
    pub estimates: Vec<Option<f64>>,
    pub selected: EstimatorId,
    pub selected_estimate: f64,
}

/// Scores a trained model on test traces.
pub fn evaluate(
    model: &SelectionModel,
    traces: &[&Trace],
    opts: &ErrorOptions,
    exec: Exec,
) -> Result<(Vec<PipelineResult>, Vec<SeriesRow>), EvalError> {
    let candidates = model.candidates.clone();
    let per_trace = exec.map(traces, |trace| -> Result<_, EvalError> {
        let mut results = Vec::new();
        let mut series = Vec::new();
        for p in 0..trace.pipelines.len() {
            let Some(errors) = pipeline_errors(trace, p, &candidates, opts) else {
                continue;
            };
            if errors.iter().all(Option::is_none) {
                continue;
            }
            let schedule = select_online(model, trace, p, false)?;
            let defined = |id: &EstimatorId| {
                candidates
                    .iter()
                    .position(|c| c == id)
                    .is_some_and(|i| errors[i].is_some())
            };
            let pick = |choice: &crate::selection::Choice| {
                std::iter::once(choice.estimator)
                    .chain(choice.ranking.iter().copied())
                    .find(|id| defined(id))
                    .expect("some candidate is defined")
            };
            let static_choice = pick(&schedule.choices[0]);
            let selected = pick(schedule.final_choice());
            for t in trace.spans[p].indices() {
                series.push(SeriesRow {
                    family: trace.family.clone(),
                    query_id: trace.query_id.clone(),
                    pipeline: p,
                    observation: t,
                    time_fraction: ground_truth_progress(trace, t).unwrap_or(0.0),
                    true_progress: trace.pipeline_true_progress(p, t).unwrap_or(0.0),
                    estimates: candidates
                        .iter()
                        .map(|&id| estimate_in_trace(id, trace, p, t, opts.clamped).ok())
                        .collect(),
                    selected: schedule.active_at(t),
                    selected_estimate: pipeline_progress(trace, &schedule, t),
                });
            }
            results.push(PipelineResult {
                family: trace.family.clone(),
                query_id: trace.query_id.clone(),
                pipeline: p,
                candidates: candidates.clone(),
                errors,
                static_choice,
                selected,
            });
        }
        Ok((results, series))
    });
    let mut results = Vec::new();
    let mut series = Vec::new();
    for part in per_trace {
        let (r, s) = part?;
        results.extend(r);
        series.extend(s);
    }
    Ok((results, series))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Families to hold out, one fold each; empty means every family.
    pub held_out: Vec<String>,
    pub candidates: Vec<EstimatorId>,
    pub features: FeatureConfig,
    pub params: MartParams,
    pub errors: ErrorOptions,
    pub ratio_thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            held_out: Vec::new(),
            candidates: EstimatorId::CANDIDATES.to_vec(),
            features: FeatureConfig::default(),
            params: MartParams::default(),
            errors: ErrorOptions::default(),
            ratio_thresholds: vec![2.0, 5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub held_out: String,
    pub training_examples: usize,
    pub results: Vec<PipelineResult>,
    pub series: Vec<SeriesRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub candidates: Vec<EstimatorId>,
    pub thresholds: Vec<f64>,
    pub folds: Vec<FoldReport>,
}

impl ErrorReport {
    pub fn policies(&self) -> Vec<Policy> {
        let mut p = vec![Policy::Selection, Policy::StaticSelection, Policy::Oracle];
        p.extend(self.candidates.iter().map(|&c| Policy::Fixed(c)));
        p
    }

    pub fn all_results(&self) -> Vec<PipelineResult> {
        self.folds.iter().flat_map(|f| f.results.iter().cloned()).collect()
    }
}

/// Mean L1 of a policy over a set of results (pipelines where the policy's
/// choice is undefined are skipped).
pub fn mean_l1(results: &[PipelineResult], policy: Policy) -> f64 {
    let v: Vec<f64> = results.iter().filter_map(|r| r.error(policy)).map(|e| e.l1).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_l2(results: &[PipelineResult], policy: Policy) -> f64 {
    let v: Vec<f64> = results.iter().filter_map(|r| r.error(policy)).map(|e| e.l2).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Leave-one-family-out: for each held-out family, train on the others and
/// evaluate on it.
pub fn run_experiment(traces: &[Trace], config: &ExperimentConfig, exec: Exec) -> Result<ErrorReport, EvalError> {
    let families: BTreeSet<&str> = traces.iter().map(|t| t.family.as_str()).collect();
    let held: Vec<String> = if config.held_out.is_empty() {
        families.iter().map(|s| s.to_string()).collect()
    } else {
        for f in &config.held_out {
            if !families.contains(f.as_str()) {
                return Err(EvalError::MissingFamily(f.clone()));
            }
        }
        config.held_out.clone()
    };
    let schema = FeatureSchema::new(config.features.clone());
    let examples = build_training_set(traces, &config.candidates, &schema, &config.errors, exec)?;
    let mut folds = Vec::new();
    for family in held {
        let train: Vec<_> = examples.iter().filter(|e| e.group != family).cloned().collect();
        log::info!("fold {family}: {} training examples", train.len());
        let model = train_selection(&train, &config.candidates, &schema, &config.params, exec)?;
        let test: Vec<&Trace> = traces.iter().filter(|t| t.family == family).collect();
        let (results, series) = evaluate(&model, &test, &config.errors, exec)?;
        folds.push(FoldReport {
            held_out: family,
            training_examples: train.len(),
            results,
            series,
        });
    }
    let mut candidates = config.candidates.clone();
    candidates.sort();
    Ok(ErrorReport {
        candidates,
        thresholds: config.ratio_thresholds.clone(),
        folds,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place,
/// so readers never see a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)
}

fn finish(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<(), EvalError> {
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes the report tables and the series file into `dir`. Returns the
/// paths written.
pub fn write_report(dir: &Path, report: &ErrorReport) -> Result<Vec<std::path::PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let policies = report.policies();
    let all = report.all_results();

    let path = dir.join("pipeline_errors.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["fold", "family", "query_id", "pipeline", "static_choice", "selected", "oracle"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for c in &report.candidates {
        header.push(format!("{c}_L1"));
        header.push(format!("{c}_L2"));
    }
    w.write_record(&header)?;
    for fold in &report.folds {
        for r in &fold.results {
            let mut rec = vec![
                fold.held_out.clone(),
                r.family.clone(),
                r.query_id.clone(),
                r.pipeline.to_string(),
                r.static_choice.to_string(),
                r.selected.to_string(),
                r.oracle().1.to_string(),
            ];
            for c in &report.candidates {
                match r.index(*c).and_then(|i| r.errors[i]) {
                    Some(e) => {
                        rec.push(fmt_f(e.l1));
                        rec.push(fmt_f(e.l2));
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec)?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "policy", "pipelines", "mean_L1", "mean_L2", "percent_optimal"])?;
    let mut scopes: Vec<(String, Vec<PipelineResult>)> =
        report.folds.iter().map(|f| (f.held_out.clone(), f.results.clone())).collect();
    scopes.push(("ALL".into(), all.clone()));
    for (name, results) in &scopes {
        for &p in &policies {
            w.write_record([
                name.clone(),
                p.to_string(),
                results.len().to_string(),
                fmt_f(mean_l1(results, p)),
                fmt_f(mean_l2(results, p)),
                fmt_f(percent_optimal(results, p)),
            ])?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("ratio_table.csv");
    let table = ratio_table(&all, &policies, &report.thresholds)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["policy".to_string(), "included".into(), "excluded".into()];
    header.extend(table.thresholds.iter().map(|t| format!("gt_{t}x")));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.policy.to_string(), table.included.to_string(), table.excluded.to_string()];
        rec.extend(row.fractions.iter().map(|f| fmt_f(*f)));
        w.write_record(&rec)?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("near_optimality.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["estimator", "pipelines", "almost_optimal", "significantly_outperforms"])?;
    for row in near_optimality_table(&all, &report.candidates) {
        w.write_record([
            row.estimator.to_string(),
            all.len().to_string(),
            fmt_f(row.almost_optimal),
            fmt_f(row.significantly_outperforms),
        ])?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("series.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["family", "query_id", "pipeline", "observation", "time_fraction", "true_progress"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(report.candidates.iter().map(|c| c.to_string()));
    header.push("selected".into());
    header.push("selected_estimate".into());
    w.write_record(&header)?;
    for fold in &report.folds {
        for s in &fold.series {
            let mut rec = vec![
                s.family.clone(),
                s.query_id.clone(),
                s.pipeline.to_string(),
                s.observation.to_string(),
                fmt_f(s.time_fraction),
                fmt_f(s.true_progress),
            ];
            rec.extend(s.estimates.iter().map(|e| e.map(fmt_f).unwrap_or_default()));
            rec.push(s.selected.to_string());
            rec.push(fmt_f(s.selected_estimate));
            w.write_record(&rec)?;
        }
    }
    finish(w, &path)?;
    written.push(path);
    Ok(written)
}

/// Writes a two-column table of greedily selected features.
pub fn write_feature_ranking<W: Write>(out: W, names: &[String], ranking: &[(usize, f64)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "feature", "cv_mse"])?;
    for (i, (f, mse)) in ranking.iter().enumerate() {
        w.write_record([(i + 1).to_string(), names[*f].clone(), format!("{mse:.9}")])?;
    }
    w.flush()?;
    Ok(())
}
