//! Estimator selection: one boosted error-regression model per candidate
//! estimator, with the candidate of least predicted error chosen before
//! execution and revised at the dynamic checkpoints.

pub mod mart;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{clamp01, estimate, EstimatorId, PipelineSnapshot};
use crate::eval::{pipeline_errors, ErrorOptions};
use crate::features::{
    features_at, stage_features, FeatureConfig, FeatureError, FeatureSchema, FeatureVector,
    PipelinePrefix, Stage,
};
use crate::par::Exec;
use crate::plan::PipelineId;
use crate::sim::Trace;
use mart::{train_mart, Dataset, MartError, MartModel, MartParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Mart(#[from] MartError),
    #[error("no model for estimator {0}")]
    MissingModel(EstimatorId),
    #[error("no training examples{0}")]
    EmptyTrainingSet(String),
    #[error("schema mismatch: model has {model}, features have {features}")]
    SchemaMismatch { model: String, features: String },
    #[error("model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: FeatureVector,
    /// Error of each candidate over the pipeline; `None` when the estimator
    /// is degenerate somewhere on the pipeline.
    pub labels: Vec<Option<f64>>,
    pub group: String,
    pub query_id: String,
    pub pipeline: PipelineId,
    pub stage: Stage,
}

/// One example per (pipeline, stage). Pipelines without a usable duration
/// or without any defined label are skipped.
pub fn build_training_set(
    traces: &[Trace],
    candidates: &[EstimatorId],
    schema: &FeatureSchema,
    opts: &ErrorOptions,
    exec: Exec,
) -> Result<Vec<TrainingExample>, SelectionError> {
    let per_trace = exec.map(traces, |trace| -> Result<Vec<TrainingExample>, SelectionError> {
        let mut out = Vec::new();
        for p in 0..trace.pipelines.len() {
            let Some(labels) = pipeline_errors(trace, p, candidates, opts) else {
                continue;
            };
            let labels: Vec<Option<f64>> = labels.into_iter().map(|e| e.map(|e| e.l1)).collect();
            if labels.iter().all(Option::is_none) {
                continue;
            }
            for (stage, features) in stage_features(schema, trace, p)? {
                out.push(TrainingExample {
                    features,
                    labels: labels.clone(),
                    group: trace.family.clone(),
                    query_id: trace.query_id.clone(),
                    pipeline: p,
                    stage,
                });
            }
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for part in per_trace {
        all.extend(part?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub format_version: u32,
    pub schema: String,
    pub feature_config: FeatureConfig,
    /// Candidates in tie-breaking order, aligned with `models`.
    pub candidates: Vec<EstimatorId>,
    pub models: Vec<MartModel>,
}

/// Trains one model per candidate on the examples where its label is
/// defined. `candidates` must match the label layout of the examples.
pub fn train_selection(
    examples: &[TrainingExample],
    candidates: &[EstimatorId],
    schema: &FeatureSchema,
    params: &MartParams,
    exec: Exec,
) -> Result<SelectionModel, SelectionError> {
    if examples.is_empty() {
        return Err(SelectionError::EmptyTrainingSet(String::new()));
    }
    let fingerprint = schema.fingerprint();
    let rows: Vec<&[f64]> = examples.iter().map(|e| e.features.values.as_slice()).collect();
    let data = Dataset::with_exec(&rows, exec)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i]);
    let mut models = Vec::with_capacity(candidates.len());
    for (n, &c) in order.iter().enumerate() {
        let labeled: Vec<usize> = (0..examples.len())
            .filter(|&r| examples[r].labels[c].is_some())
            .collect();
        if labeled.is_empty() {
            return Err(SelectionError::EmptyTrainingSet(format!(" for {}", candidates[c])));
        }
        let labels: Vec<f64> = labeled.iter().map(|&r| examples[r].labels[c].unwrap()).collect();
        let p = MartParams {
            seed: params.seed.wrapping_add(n as u64),
            ..params.clone()
        };
        let model = if labeled.len() == examples.len() {
            train_mart(&data, &labels, &p, &fingerprint, exec)?
        } else {
            train_mart(&data.select_rows(&labeled), &labels, &p, &fingerprint, exec)?
        };
        log::debug!("trained {} on {} examples", candidates[c], labeled.len());
        models.push(model);
    }
    Ok(SelectionModel {
        format_version: MODEL_FORMAT_VERSION,
        schema: fingerprint,
        feature_config: schema.config.clone(),
        candidates: order.iter().map(|&i| candidates[i]).collect(),
        models,
    })
}

impl SelectionModel {
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::new(self.feature_config.clone())
    }

    pub fn model(&self, id: EstimatorId) -> Result<&MartModel, SelectionError> {
        self.candidates
            .iter()
            .position(|&c| c == id)
            .map(|i| &self.models[i])
            .ok_or(SelectionError::MissingModel(id))
    }

    pub fn predict_errors(&self, v: &FeatureVector) -> Result<Vec<f64>, SelectionError> {
        if self.models.len() != self.candidates.len() {
            let missing = self.candidates[self.models.len().min(self.candidates.len().saturating_sub(1))];
            return Err(SelectionError::MissingModel(missing));
        }
        self.models
            .iter()
            .map(|m| m.predict(&v.values).map_err(SelectionError::from))
            .collect()
    }

    /// Candidates ordered by predicted error, ties in canonical order.
    pub fn ranked(&self, v: &FeatureVector) -> Result<Vec<EstimatorId>, SelectionError> {
        let pred = self.predict_errors(v)?;
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        idx.sort_by(|&a, &b| {
            pred[a]
                .total_cmp(&pred[b])
                .then(self.candidates[a].cmp(&self.candidates[b]))
        });
        Ok(idx.into_iter().map(|i| self.candidates[i]).collect())
    }

    pub fn select_estimator(&self, v: &FeatureVector) -> Result<EstimatorId, SelectionError> {
        self.ranked(v)?
            .first()
            .copied()
            .ok_or(SelectionError::MissingModel(EstimatorId::Tgn))
    }

    pub fn to_json(&self) -> Result<String, SelectionError> {
        serde_json::to_string(self).map_err(|e| SelectionError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, SelectionError> {
        let m: SelectionModel =
            serde_json::from_str(text).map_err(|e| SelectionError::Format(e.to_string()))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(SelectionError::Format(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        let schema = m.schema();
        if schema.fingerprint() != m.schema || m.models.iter().any(|x| x.schema != m.schema) {
            return Err(SelectionError::SchemaMismatch {
                model: m.schema.clone(),
                features: schema.fingerprint(),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), SelectionError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SelectionError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub stage: Stage,
    /// Observation from which the choice applies.
    pub observation: usize,
    pub estimator: EstimatorId,
    /// All candidates by predicted error at this stage.
    pub ranking: Vec<EstimatorId>,
}

/// Estimator choices of one pipeline over its execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub pipeline: PipelineId,
    pub choices: Vec<Choice>,
}

impl Schedule {
    pub fn active_at(&self, obs: usize) -> EstimatorId {
        self.choices
            .iter()
            .take_while(|c| c.observation <= obs)
            .last()
            .or(self.choices.first())
            .map_or(EstimatorId::Tgn, |c| c.estimator)
    }

    pub fn final_choice(&self) -> &Choice {
        self.choices.last().expect("schedule has a static choice")
    }
}

fn choose(
    model: &SelectionModel,
    v: &FeatureVector,
    snapshot: &PipelineSnapshot,
) -> Result<(EstimatorId, Vec<EstimatorId>), SelectionError> {
    let ranking = model.ranked(v)?;
    let chosen = ranking
        .iter()
        .copied()
        .find(|&id| estimate(id, snapshot).is_ok())
        .unwrap_or(EstimatorId::Tgn);
    Ok((chosen, ranking))
}

/// Replays a pipeline: a static choice, then a revised choice at every
/// checkpoint reached before the pipeline's last observation. Choices stop
/// after the last checkpoint. With `static_only` only the first is made.
pub fn select_online(
    model: &SelectionModel,
    trace: &Trace,
    pipeline: PipelineId,
    static_only: bool,
) -> Result<Schedule, SelectionError> {
    let schema = model.schema();
    let span = trace.spans[pipeline];
    let prefix = PipelinePrefix::new(trace, pipeline, None);
    let v = features_at(&schema, trace, pipeline, None)?;
    let (estimator, ranking) = choose(model, &v, &prefix.snapshot(span.start))?;
    let mut choices = vec![Choice {
        stage: Stage::Static,
        observation: span.start,
        estimator,
        ranking,
    }];
    if !static_only {
        for &x in &schema.config.checkpoints {
            let Some(t) = prefix.checkpoint(x as f64)? else {
                break;
            };
            if t >= span.end {
                break;
            }
            let v = features_at(&schema, trace, pipeline, Some(t))?;
            let (estimator, ranking) = choose(model, &v, &prefix.snapshot(t))?;
            choices.push(Choice {
                stage: Stage::At(x),
                observation: t,
                estimator,
                ranking,
            });
        }
    }
    Ok(Schedule { pipeline, choices })
}

/// Progress of a pipeline at `t` under its schedule: 0 before it starts,
/// 1 once it has finished, otherwise the active estimator (TGN if that
/// is degenerate).
pub fn pipeline_progress(trace: &Trace, schedule: &Schedule, t: usize) -> f64 {
    let span = trace.spans[schedule.pipeline];
    if t < span.start {
        return 0.0;
    }
    if t >= span.end {
        return 1.0;
    }
    let snap = PipelineSnapshot::from_trace(trace, schedule.pipeline, t);
    estimate(schedule.active_at(t), &snap)
        .or_else(|_| estimate(EstimatorId::Tgn, &snap))
        .unwrap_or(0.0)
}

/// Query progress at `t`: pipeline progress weighted by each pipeline's
/// current driver estimate, with weights normalised to sum to one.
pub fn query_progress(trace: &Trace, schedules: &[Schedule], t: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in schedules {
        let w = PipelineSnapshot::from_trace(trace, s.pipeline, t).driver_sums().1;
        num += w * pipeline_progress(trace, s, t);
        den += w;
    }
    if den > 0.0 {
        clamp01(num / den)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::mart::{RegressionTree, TreeNode};
    use crate::sim::{execute, generate_workload, WorkloadConfig};

    fn constant_model(schema: &FeatureSchema, base: f64) -> MartModel {
        MartModel {
            schema: schema.fingerprint(),
            feature_count: schema.len(),
            params: MartParams::default(),
            base,
            trees: vec![],
        }
    }

    fn model_with(schema: &FeatureSchema, preds: &[(EstimatorId, MartModel)]) -> SelectionModel {
        SelectionModel {
            format_version: MODEL_FORMAT_VERSION,
            schema: schema.fingerprint(),
            feature_config: schema.config.clone(),
            candidates: preds.iter().map(|p| p.0).collect(),
            models: preds.iter().map(|p| p.1.clone()).collect(),
        }
    }

    fn vector(schema: &FeatureSchema) -> FeatureVector {
        FeatureVector {
            values: vec![0.0; schema.len()],
            defined: vec![true; schema.len()],
        }
    }

    #[test]
    fn argmin_and_tie_break() {
        use EstimatorId::*;
        let s = FeatureSchema::default();
        let m = model_with(
            &s,
            &[
                (Dne, constant_model(&s, 0.1)),
                (Tgn, constant_model(&s, 0.05)),
                (Luo, constant_model(&s, 0.2)),
            ],
        );
        assert_eq!(m.select_estimator(&vector(&s)).unwrap(), Tgn);
        let tie = model_with(&s, &[(Dne, constant_model(&s, 0.1)), (Tgn, constant_model(&s, 0.1))]);
        assert_eq!(tie.select_estimator(&vector(&s)).unwrap(), Dne);
        let single = model_with(&s, &[(Luo, constant_model(&s, 0.7))]);
        assert_eq!(single.select_estimator(&vector(&s)).unwrap(), Luo);
        assert!(matches!(single.model(Dne), Err(SelectionError::MissingModel(Dne))));
    }

    fn long_trace() -> Trace {
        let mut c = WorkloadConfig::new("f");
        c.query_count = 8;
        c.scale = 2.0;
        c.seed = 5;
        let specs = generate_workload(&c).unwrap();
        specs
            .iter()
            .map(|s| execute(s, 0.05).unwrap())
            .max_by_key(|t| t.spans[0].len())
            .unwrap()
    }

    #[test]
    fn schedule_revises_then_freezes() {
        use EstimatorId::*;
        let s = FeatureSchema::default();
        let trace = long_trace();
        let reached10 = s.index_of("Reached_10").unwrap() as u32;
        let mut tgn = constant_model(&s, 0.2);
        tgn.params.shrinkage = 1.0;
        tgn.trees.push(RegressionTree {
            nodes: vec![
                TreeNode::Split {
                    feature: reached10,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { value: -0.1 },
                TreeNode::Leaf { value: 0.3 },
            ],
        });
        let m = model_with(
            &s,
            &[
                (Dne, constant_model(&s, 1.0)),
                (Tgn, tgn),
                (Luo, constant_model(&s, 0.3)),
            ],
        );
        let sched = select_online(&m, &trace, 0, false).unwrap();
        let stages: Vec<Stage> = sched.choices.iter().map(|c| c.stage).collect();
        assert_eq!(
            stages,
            vec![
                Stage::Static,
                Stage::At(1),
                Stage::At(2),
                Stage::At(5),
                Stage::At(10),
                Stage::At(20)
            ]
        );
        let picks: Vec<EstimatorId> = sched.choices.iter().map(|c| c.estimator).collect();
        assert_eq!(picks, vec![Tgn, Tgn, Tgn, Tgn, Luo, Luo]);
        let span = trace.spans[0];
        assert_eq!(sched.active_at(span.end), Luo);
        let stat = select_online(&m, &trace, 0, true).unwrap();
        assert_eq!(stat.choices.len(), 1);
        let p = query_progress(&trace, &[sched], trace.observations.len() - 1);
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn training_set_counts_and_round_trip() {
        let mut c = WorkloadConfig::new("f");
        c.query_count = 6;
        c.estimate_error_sigma = 0.5;
        let traces: Vec<Trace> = generate_workload(&c)
            .unwrap()
            .iter()
            .map(|s| execute(s, 1.0).unwrap())
            .collect();
        let s = FeatureSchema::default();
        let cands = EstimatorId::CANDIDATES.to_vec();
        let opts = ErrorOptions::default();
        let ex = build_training_set(&traces, &cands, &s, &opts, Exec::Sequential).unwrap();
        assert_eq!(ex.len() % 6, 0);
        assert!(!ex.is_empty());
        let again = build_training_set(&traces, &cands, &s, &opts, Exec::Parallel).unwrap();
        assert_eq!(ex, again);
        let params = MartParams {
            iterations: 5,
            ..MartParams::default()
        };
        let m = train_selection(&ex, &cands, &s, &params, Exec::Sequential).unwrap();
        let back = SelectionModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for e in &ex {
            assert_eq!(
                m.predict_errors(&e.features).unwrap(),
                back.predict_errors(&e.features).unwrap()
            );
        }
        let mut bad = m.clone();
        bad.schema = "other".into();
        assert!(SelectionModel::from_json(&bad.to_json().unwrap()).is_err());
    }
}
