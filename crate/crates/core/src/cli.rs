//! Command-line front end: `gen`, `simulate`, `train`, `eval` and
//! `progress`. Every command that writes files also writes a manifest
//! recording its configuration, seed and artifact versions.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::estimators::EstimatorId;
use crate::eval::{evaluate, run_experiment, write_report, ErrorReport, EvalError, ExperimentConfig, FoldReport, Norm};
use crate::features::{CorForm, FeatureConfig, FeatureSchema, SCHEMA_VERSION};
use crate::par::Exec;
use crate::selection::{
    build_training_set, query_progress, select_online, train_selection, SelectionError, SelectionModel,
    MODEL_FORMAT_VERSION,
};
use crate::sim::io::{apply_key, parse_workload_config, read_specs, read_trace, reseed, write_specs, write_trace};
use crate::sim::{execute_all, generate_workload, QuerySpec, SimError, Trace};

const SPEC_SUFFIX: &str = ".specs.jsonl";
const TRACE_SUFFIX: &str = ".trace.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Sim(SimError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "progest", version, about = "Query progress estimation lab")]
pub struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate query specs for every workload family in a config file.
    Gen(GenArgs),
    /// Execute query specs into counter traces.
    Simulate(SimulateArgs),
    /// Train a selection model on traces.
    Train(TrainArgs),
    /// Evaluate estimators and selection on traces.
    Eval(EvalArgs),
    /// Replay a trace, printing the selected estimator and query progress.
    Progress(ProgressArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Key-value parameter file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides any seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "params", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Workload config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "params", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// A spec file, or a directory of `*.specs.jsonl` files.
    #[arg(long)]
    pub specs: PathBuf,
    /// Observation interval in simulated seconds; defaults to each spec's own.
    #[arg(long)]
    pub interval: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `*.trace.jsonl` files.
    #[arg(long)]
    pub traces: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Score an existing model on the given traces.
    Holdout,
    /// Leave one family out: train on the others, test on it, per family.
    Lofo,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    pub protocol: Protocol,
    /// Model file; required for the holdout protocol.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProgressArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Keep the static choice for the whole pipeline.
    #[arg(long)]
    pub static_only: bool,
}

#[derive(Debug, Serialize)]
struct Versions {
    tool: &'static str,
    model_format: u32,
    feature_schema: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_fingerprint: Option<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<C: Serialize> {
    command: &'static str,
    seed: Option<u64>,
    config: C,
    inputs: Vec<String>,
    outputs: Vec<String>,
    versions: Versions,
    /// Wall-clock fields; everything else is reproducible.
    created_unix_ms: u128,
    elapsed_seconds: f64,
}

fn versions(fingerprint: Option<String>) -> Versions {
    Versions {
        tool: env!("CARGO_PKG_VERSION"),
        model_format: MODEL_FORMAT_VERSION,
        feature_schema: SCHEMA_VERSION,
        feature_fingerprint: fingerprint,
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    crate::eval::write_atomic(path, bytes).map_err(io_err(path))
}

fn display(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &'static str,
    seed: Option<u64>,
    config: C,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    fingerprint: Option<String>,
    started: Instant,
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        command,
        seed,
        config,
        inputs: display(inputs),
        outputs: display(outputs),
        versions: versions(fingerprint),
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    let path = dir.join(format!("{command}.manifest.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Check(e.to_string()))?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Usage(format!("{}: file not found", path.display())),
        _ => CliError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn split_param(p: &str) -> Result<(&str, &str), CliError> {
    p.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got '{p}'")))
}

/// Files in `dir` whose names end with `suffix`, sorted by name.
fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Err(CliError::Usage(format!("{}: not found", dir.display())));
    }
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_traces(dir: &Path) -> Result<Vec<Trace>, CliError> {
    list_files(dir, TRACE_SUFFIX)?
        .iter()
        .map(|p| {
            let f = fs::File::open(p).map_err(io_err(p))?;
            read_trace(BufReader::new(f)).map_err(CliError::from)
        })
        .collect()
}

/// Experiment settings from an optional key-value file, `--params`
/// overrides and `--seed`.
pub fn experiment_config(run: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    let mut entries: Vec<(String, String)> = Vec::new();
    if let Some(path) = &run.config {
        for (n, raw) in read_text(path)?.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{} line {}: expected key = value", path.display(), n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    for p in &run.params {
        let (k, v) = split_param(p)?;
        entries.push((k.to_string(), v.to_string()));
    }
    for (k, v) in &entries {
        apply_experiment_key(&mut cfg, k, v)?;
    }
    if let Some(seed) = run.seed {
        cfg.params.seed = seed;
    }
    cfg.params
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn parse_ids(v: &str) -> Result<Vec<EstimatorId>, CliError> {
    v.split(',')
        .map(|s| s.trim().parse::<EstimatorId>().map_err(|e| CliError::Config(e.to_string())))
        .collect()
}

fn apply_experiment_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), CliError> {
    let bad = || CliError::Config(format!("bad value '{value}' for {key}"));
    let list = || -> Vec<String> {
        value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    };
    match key {
        "iterations" | "M" => cfg.params.iterations = value.parse().map_err(|_| bad())?,
        "max_leaves" | "leaves" => cfg.params.tree.max_leaves = value.parse().map_err(|_| bad())?,
        "min_leaf" => cfg.params.tree.min_leaf = value.parse().map_err(|_| bad())?,
        "shrinkage" => cfg.params.shrinkage = value.parse().map_err(|_| bad())?,
        "subsample" => cfg.params.subsample = value.parse().map_err(|_| bad())?,
        "seed" => cfg.params.seed = value.parse().map_err(|_| bad())?,
        "candidates" => cfg.candidates = parse_ids(value)?,
        "held_out" => cfg.held_out = list(),
        "ratio_thresholds" => {
            cfg.ratio_thresholds = list()
                .iter()
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?
        }
        "norm" => {
            cfg.errors.norm = match value {
                "mean" => Norm::Mean,
                "sum" => Norm::Sum,
                _ => return Err(bad()),
            }
        }
        "clamped" => cfg.errors.clamped = value.parse().map_err(|_| bad())?,
        "pairs" => {
            cfg.features.pairs = match value {
                "default" => FeatureConfig::default().pairs,
                "all" => FeatureConfig::all_pairs(&cfg.features.estimators),
                _ => return Err(bad()),
            }
        }
        "cor_form" => {
            cfg.features.cor_form = match value {
                "verbatim" => CorForm::Verbatim,
                "alternative" => CorForm::Alternative,
                _ => return Err(bad()),
            }
        }
        "cor_k" => cfg.features.k = value.parse().map_err(|_| bad())?,
        _ => return Err(CliError::Config(format!("unknown parameter '{key}'"))),
    }
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> Result<Vec<PathBuf>, CliError> {
    let started = Instant::now();
    let text = read_text(&args.config)?;
    let mut configs = parse_workload_config(&text)?;
    if let Some(seed) = args.seed {
        reseed(&mut configs, seed);
    }
    for p in &args.params {
        let (k, v) = split_param(p)?;
        for c in configs.iter_mut() {
            apply_key(c, k, v, 0)?;
        }
    }
    for c in &configs {
        c.validate()?;
    }
    let mut outputs = Vec::new();
    for c in &configs {
        let specs = generate_workload(c)?;
        let mut buf = Vec::new();
        write_specs(&mut buf, &specs)?;
        let path = args.out.join(format!("{}{SPEC_SUFFIX}", c.family_id));
        write_atomic(&path, &buf)?;
        log::info!("{}: {} specs", path.display(), specs.len());
        outputs.push(path);
    }
    write_manifest(
        &args.out,
        "gen",
        args.seed,
        &configs,
        std::slice::from_ref(&args.config),
        &outputs,
        None,
        started,
    )?;
    Ok(outputs)
}

fn check_conservation(trace: &Trace) -> Result<(), CliError> {
    let last = trace
        .observations
        .last()
        .ok_or_else(|| CliError::Check(format!("{}: no observations", trace.query_id)))?;
    for (i, &n) in trace.truth.getnext.iter().enumerate() {
        if last.k[i] != n || last.lb[i] != n || last.ub[i] != n {
            return Err(CliError::Check(format!(
                "{}: node {} final counters do not match its total {n}",
                trace.query_id, trace.plan.nodes[i].id
            )));
        }
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let started = Instant::now();
    if let Some(i) = args.interval {
        if !(i > 0.0) {
            return Err(CliError::Usage("--interval must be > 0".into()));
        }
    }
    let inputs = list_files(&args.specs, SPEC_SUFFIX)?;
    let mut specs: Vec<QuerySpec> = Vec::new();
    for p in &inputs {
        let f = fs::File::open(p).map_err(io_err(p))?;
        specs.extend(read_specs(BufReader::new(f))?);
    }
    if specs.is_empty() {
        log::warn!("no query specs found under {}", args.specs.display());
    }
    let mut outputs = Vec::new();
    for trace in execute_all(&specs, args.interval, exec) {
        let trace = trace?;
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace)?;
        let path = args.out.join(format!("{}{TRACE_SUFFIX}", trace.query_id));
        write_atomic(&path, &buf)?;
        let back = read_trace(BufReader::new(fs::File::open(&path).map_err(io_err(&path))?))?;
        check_conservation(&back)?;
        outputs.push(path);
    }
    #[derive(Serialize)]
    struct SimConfig {
        interval: Option<f64>,
        queries: usize,
    }
    write_manifest(
        &args.out,
        "simulate",
        None,
        SimConfig {
            interval: args.interval,
            queries: specs.len(),
        },
        &inputs,
        &outputs,
        None,
        started,
    )?;
    Ok(outputs)
}

pub fn cmd_train(args: &TrainArgs, exec: Exec) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let cfg = experiment_config(&args.run)?;
    let traces = load_traces(&args.traces)?;
    let loaded = started.elapsed().as_secs_f64();
    let schema = FeatureSchema::new(cfg.features.clone());
    let examples = build_training_set(&traces, &cfg.candidates, &schema, &cfg.errors, exec)?;
    if examples.is_empty() {
        return Err(SelectionError::EmptyTrainingSet(format!(" from {}", args.traces.display())).into());
    }
    let featurized = started.elapsed().as_secs_f64();
    let model = train_selection(&examples, &cfg.candidates, &schema, &cfg.params, exec)?;
    let trained = started.elapsed().as_secs_f64();
    let model_path = args.out.join("model.json");
    write_atomic(&model_path, model.to_json()?.as_bytes())?;
    let timing = format!(
        "stage,seconds\nload,{loaded:.3}\nfeatures,{:.3}\ntrain,{:.3}\n",
        featurized - loaded,
        trained - featurized
    );
    let timing_path = args.out.join("train_timing.csv");
    write_atomic(&timing_path, timing.as_bytes())?;
    log::info!(
        "trained on {} examples from {} traces in {:.2} s (M={}, leaves={})",
        examples.len(),
        traces.len(),
        trained - featurized,
        cfg.params.iterations,
        cfg.params.tree.max_leaves
    );
    write_manifest(
        &args.out,
        "train",
        Some(cfg.params.seed),
        &cfg,
        std::slice::from_ref(&args.traces),
        &[model_path.clone(), timing_path],
        Some(model.schema.clone()),
        started,
    )?;
    Ok(model_path)
}

pub fn cmd_eval(args: &EvalArgs, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let started = Instant::now();
    let cfg = experiment_config(&args.run)?;
    let traces = load_traces(&args.traces)?;
    let (report, fingerprint) = match args.protocol {
        Protocol::Holdout => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| CliError::Usage("--model is required with --protocol holdout".into()))?;
            if !path.exists() {
                return Err(CliError::Usage(format!("{}: file not found", path.display())));
            }
            let model = SelectionModel::load(path)?;
            let refs: Vec<&Trace> = traces.iter().collect();
            let (results, series) = evaluate(&model, &refs, &cfg.errors, exec)?;
            let report = ErrorReport {
                candidates: model.candidates.clone(),
                thresholds: cfg.ratio_thresholds.clone(),
                folds: vec![FoldReport {
                    held_out: "holdout".into(),
                    training_examples: 0,
                    results,
                    series,
                }],
            };
            (report, model.schema.clone())
        }
        Protocol::Lofo => {
            if args.model.is_some() {
                return Err(CliError::Usage("--model is only used with --protocol holdout".into()));
            }
            let report = run_experiment(&traces, &cfg, exec)?;
            (report, FeatureSchema::new(cfg.features.clone()).fingerprint())
        }
    };
    let outputs = write_report(&args.out, &report)?;
    log::info!(
        "{} folds, {} pipelines evaluated",
        report.folds.len(),
        report.folds.iter().map(|f| f.results.len()).sum::<usize>()
    );
    let mut inputs = vec![args.traces.clone()];
    inputs.extend(args.model.clone());
    write_manifest(
        &args.out,
        "eval",
        Some(cfg.params.seed),
        &cfg,
        &inputs,
        &outputs,
        Some(fingerprint),
        started,
    )?;
    Ok(outputs)
}

/// Writes one tab-separated line per observation: time, the estimator of
/// each running pipeline, and query progress. Switches are logged.
pub fn cmd_progress<W: Write>(args: &ProgressArgs, mut out: W) -> Result<(), CliError> {
    let model = SelectionModel::load(&args.model)?;
    let f = fs::File::open(&args.trace).map_err(io_err(&args.trace))?;
    let trace = read_trace(BufReader::new(f))?;
    let schedules = (0..trace.pipelines.len())
        .map(|p| select_online(&model, &trace, p, args.static_only))
        .collect::<Result<Vec<_>, _>>()?;
    for s in &schedules {
        for pair in s.choices.windows(2) {
            if pair[0].estimator != pair[1].estimator {
                log::info!(
                    "pipeline {} switches {} -> {} at {} (observation {})",
                    s.pipeline,
                    pair[0].estimator,
                    pair[1].estimator,
                    pair[1].stage,
                    pair[1].observation
                );
            }
        }
    }
    let w = |e: std::io::Error| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    writeln!(out, "time\testimators\tprogress").map_err(w)?;
    for (t, obs) in trace.observations.iter().enumerate() {
        let running: Vec<String> = schedules
            .iter()
            .filter(|s| {
                let span = trace.spans[s.pipeline];
                span.start <= t && t <= span.end
            })
            .map(|s| format!("p{}:{}", s.pipeline, s.active_at(t)))
            .collect();
        writeln!(
            out,
            "{:.6}\t{}\t{:.6}",
            obs.time,
            running.join(","),
            query_progress(&trace, &schedules, t)
        )
        .map_err(w)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(drop),
        Command::Simulate(a) => cmd_simulate(a, exec).map(drop),
        Command::Train(a) => cmd_train(a, exec).map(drop),
        Command::Eval(a) => cmd_eval(a, exec).map(drop),
        Command::Progress(a) => cmd_progress(a, std::io::stdout().lock()),
    }
}
