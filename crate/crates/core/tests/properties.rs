use std::collections::BTreeSet;

use proptest::prelude::*;

use progest::estimators::*;
use progest::eval::{lp_error, oracle_policy, ratio_table, Norm, PipelineError, PipelineResult, Policy};
use progest::features::{features_at, static_features, FeatureConfig, FeatureSchema, PipelinePrefix, CHECKPOINTS};
use progest::plan::{decompose_pipelines, NodeId, OperatorKind};
use progest::selection::mart::{train_mart, train_mart_traced, Dataset, MartParams, TreeParams};
use progest::sim::{execute, generate_workload, Template, Trace, WorkloadConfig};

fn corpus(seed: u64, queries: usize, skew: f64, sigma: f64) -> Vec<Trace> {
    let mut cfg = WorkloadConfig::new("prop");
    cfg.seed = seed;
    cfg.query_count = queries;
    cfg.skew_z = skew;
    cfg.estimate_error_sigma = sigma;
    generate_workload(&cfg)
        .unwrap()
        .iter()
        .map(|s| execute(s, s.observation_interval).unwrap())
        .collect()
}

fn has_kind(trace: &Trace, pipeline: usize, kind: OperatorKind) -> bool {
    trace.pipelines[pipeline]
        .nodes
        .iter()
        .any(|id| trace.plan.node(*id).unwrap().kind == kind)
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 12,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn pipelines_partition_the_plan(seed in any::<u64>()) {
        for trace in corpus(seed, 4, 1.0, 0.5) {
            let plan = &trace.plan;
            let again = decompose_pipelines(plan).unwrap();
            prop_assert_eq!(&again, &trace.pipelines);
            let mut seen = BTreeSet::new();
            for p in &trace.pipelines {
                for id in &p.nodes {
                    prop_assert!(seen.insert(*id), "node {} in two pipelines", id);
                }
            }
            let all: BTreeSet<NodeId> = plan.nodes.iter().map(|n| n.id).collect();
            prop_assert_eq!(seen, all);

            // Producers come before consumers.
            let owner = |id: NodeId| trace.pipelines.iter().position(|p| p.contains(id)).unwrap();
            for n in &plan.nodes {
                for c in &n.children {
                    prop_assert!(owner(*c) <= owner(n.id));
                }
            }
        }
    }

    #[test]
    fn drivers_are_pipeline_leaves_outside_nested_loop_inners(seed in any::<u64>()) {
        for trace in corpus(seed, 4, 1.0, 0.5) {
            for p in &trace.pipelines {
                let mut excluded = BTreeSet::new();
                for id in &p.nodes {
                    let n = trace.plan.node(*id).unwrap();
                    if n.kind == OperatorKind::NestedLoopJoin && n.children.len() > 1 {
                        let mut stack = vec![n.children[1]];
                        while let Some(c) = stack.pop() {
                            excluded.insert(c);
                            stack.extend(trace.plan.node(c).unwrap().children.iter().copied());
                        }
                    }
                }
                let leaves: BTreeSet<NodeId> = p
                    .nodes
                    .iter()
                    .copied()
                    .filter(|id| !excluded.contains(id))
                    .filter(|id| trace.plan.node(*id).unwrap().children.iter().all(|c| !p.contains(*c)))
                    .collect();
                let drivers: BTreeSet<NodeId> = p.drivers.iter().copied().collect();
                prop_assert_eq!(drivers, leaves);
            }
        }
    }

    #[test]
    fn traces_satisfy_counter_invariants(seed in any::<u64>()) {
        for trace in corpus(seed, 4, 1.5, 0.8) {
            let obs = &trace.observations;
            prop_assert!(obs[0].k.iter().all(|&k| k == 0));
            let last = obs.last().unwrap();
            prop_assert_eq!(&last.k, &trace.truth.getnext);
            prop_assert_eq!(&last.lb, &trace.truth.getnext);
            prop_assert_eq!(&last.ub, &trace.truth.getnext);
            for w in obs.windows(2) {
                prop_assert!(w[1].time > w[0].time);
                for i in 0..w[0].k.len() {
                    prop_assert!(w[1].k[i] >= w[0].k[i]);
                    prop_assert!(w[1].r[i] >= w[0].r[i]);
                    prop_assert!(w[1].w[i] >= w[0].w[i]);
                }
            }
            for o in obs {
                for i in 0..o.k.len() {
                    prop_assert!(o.lb[i] <= o.e[i] && o.e[i] <= o.ub[i]);
                    prop_assert!(o.k[i] <= o.ub[i]);
                }
            }
        }
    }

    #[test]
    fn estimates_are_fractions_and_identities_hold(seed in any::<u64>()) {
        for trace in corpus(seed, 5, 1.0, 0.7) {
            for p in 0..trace.pipelines.len() {
                let no_batch = !has_kind(&trace, p, OperatorKind::BatchSort);
                let no_seek = !has_kind(&trace, p, OperatorKind::IndexSeek);
                for t in trace.spans[p].indices() {
                    let s = PipelineSnapshot::from_trace(&trace, p, t);
                    for id in EstimatorId::CANDIDATES {
                        if let Ok(v) = estimate_in_trace(id, &trace, p, t, true) {
                            prop_assert!((0.0..=1.0).contains(&v), "{} = {}", id, v);
                        }
                    }
                    if no_batch {
                        prop_assert_eq!(batchdne(&s).ok(), dne(&s).ok());
                    }
                    if no_seek {
                        prop_assert_eq!(dneseek(&s).ok(), dne(&s).ok());
                    }
                }
            }
        }
    }

    #[test]
    fn dne_is_monotone_with_fixed_driver_estimates(
        e in prop::collection::vec(1.0f64..1e6, 1..5),
        steps in prop::collection::vec(prop::collection::vec(0.0f64..0.3, 1..5), 1..20),
    ) {
        let mut k = vec![0.0; e.len()];
        let mut last = 0.0;
        for step in &steps {
            for (i, ki) in k.iter_mut().enumerate() {
                *ki = (*ki + step.get(i).copied().unwrap_or(0.0) * e[i]).min(e[i]);
            }
            let s = snapshot(&k, &e, &vec![true; e.len()]);
            let d = dne(&s).unwrap();
            prop_assert!(d >= last - 1e-15);
            last = d;
        }
    }

    #[test]
    fn tgnint_coincides_with_tgn_when_premise_holds(
        e in prop::collection::vec(1.0f64..1e5, 2..6),
        d in 0.001f64..1.0,
        driver_count in 1usize..3,
    ) {
        // Every node has k = d * e, so sum k = dne * sum e.
        let k: Vec<f64> = e.iter().map(|x| d * x).collect();
        let drivers: Vec<bool> = (0..e.len()).map(|i| i < driver_count.min(e.len())).collect();
        let s = snapshot(&k, &e, &drivers);
        let (a, b) = (tgnint(&s).unwrap(), tgn(&s).unwrap());
        prop_assert!((a - b).abs() < 1e-12, "tgnint {} tgn {}", a, b);
    }

    #[test]
    fn static_features_are_bounded(seed in any::<u64>()) {
        for trace in corpus(seed, 4, 0.5, 0.5) {
            for p in &trace.pipelines {
                let Ok(st) = static_features(&trace.plan, p) else { continue };
                let schema = FeatureSchema::new(FeatureConfig::default());
                let mut sel_at = 0.0;
                for kind in OperatorKind::ALL {
                    let name = kind.name();
                    let at = st.0[schema.index_of(&format!("SelAt_{name}")).unwrap()];
                    sel_at += at;
                    for prefix in ["SelAt", "SelAbove", "SelBelow"] {
                        let v = st.0[schema.index_of(&format!("{prefix}_{name}")).unwrap()];
                        prop_assert!((0.0..=1.0).contains(&v), "{}_{} = {}", prefix, name, v);
                    }
                }
                prop_assert!((sel_at - 1.0).abs() < 1e-9);
                let dn = st.0[schema.index_of("SelAt_DN").unwrap()];
                prop_assert!((0.0..=1.0).contains(&dn));
            }
        }
    }

    #[test]
    fn checkpoints_are_ordered_and_prefix_past_last_is_ignored(seed in any::<u64>()) {
        let schema = FeatureSchema::new(FeatureConfig::default());
        for trace in corpus(seed, 3, 1.0, 0.5) {
            for p in 0..trace.pipelines.len() {
                let prefix = PipelinePrefix::new(&trace, p, None);
                let Ok(points) = CHECKPOINTS
                    .iter()
                    .map(|&x| prefix.checkpoint(x as f64))
                    .collect::<Result<Vec<_>, _>>() else { continue };
                let reached: Vec<usize> = points.iter().flatten().copied().collect();
                for w in reached.windows(2) {
                    prop_assert!(trace.observations[w[0]].time <= trace.observations[w[1]].time);
                }
                let Some(t20) = points[CHECKPOINTS.len() - 1] else { continue };
                let Ok(at) = features_at(&schema, &trace, p, Some(t20)) else { continue };
                let end = trace.spans[p].end;
                for t in [t20 + 1, (t20 + end) / 2, end] {
                    if t > t20 && t <= end {
                        prop_assert_eq!(&features_at(&schema, &trace, p, Some(t)).unwrap(), &at);
                    }
                }
                prop_assert_eq!(&features_at(&schema, &trace, p, Some(t20)).unwrap(), &at);
            }
        }
    }

    #[test]
    fn boosting_mse_never_increases_without_subsampling(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 20..80),
        seed in any::<u64>(),
    ) {
        let labels: Vec<f64> = rows.iter().map(|r| (r[0] * 0.7).sin() + r[1].abs() * 0.1 + r[2]).collect();
        let data = Dataset::new(&rows).unwrap();
        let params = MartParams {
            iterations: 30,
            tree: TreeParams { max_leaves: 6, min_leaf: 2 },
            subsample: 1.0,
            seed,
            ..MartParams::default()
        };
        let (_, mse) = train_mart_traced(&data, &labels, &params, "s", progest::par::Exec::Sequential).unwrap();
        for w in mse.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn training_is_deterministic(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 15..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<f64> = rows.iter().map(|r| r[0] - 2.0 * r[1]).collect();
        let data = Dataset::new(&rows).unwrap();
        let params = MartParams { iterations: 10, seed, ..MartParams::default() };
        let a = train_mart(&data, &labels, &params, "s", progest::par::Exec::Sequential).unwrap();
        let b = train_mart(&data, &labels, &params, "s", progest::par::Exec::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn oracle_is_a_lower_bound(errors in prop::collection::vec(prop::option::of(0.0f64..1.0), 6)) {
        prop_assume!(errors.iter().any(Option::is_some));
        let (best, _) = oracle_policy(&errors).unwrap();
        let defined: Vec<f64> = errors.iter().flatten().copied().collect();
        let worst = defined.iter().cloned().fold(f64::MIN, f64::max);
        for e in &defined {
            prop_assert!(best <= *e && *e <= worst);
        }
    }

    #[test]
    fn l1_matches_plain_summation(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..100)) {
        let (est, truth): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut total = 0.0;
        for i in 0..est.len() {
            total += (est[i] - truth[i]).abs();
        }
        let mean = lp_error(&est, &truth, 1, Norm::Mean).unwrap();
        prop_assert!((mean - total / est.len() as f64).abs() < 1e-12);
        let sum = lp_error(&est, &truth, 1, Norm::Sum).unwrap();
        prop_assert!((sum - total).abs() < 1e-9);
    }

    #[test]
    fn ratio_fractions_shrink_with_threshold(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 6), 0usize..6), 1..40)
    ) {
        let candidates = EstimatorId::CANDIDATES.to_vec();
        let results: Vec<PipelineResult> = rows
            .iter()
            .enumerate()
            .map(|(i, (errs, pick))| PipelineResult {
                family: "f".into(),
                query_id: format!("q{i}"),
                pipeline: 0,
                candidates: candidates.clone(),
                errors: errs.iter().map(|&e| Some(PipelineError { l1: e, l2: e })).collect(),
                static_choice: candidates[*pick],
                selected: candidates[*pick],
            })
            .collect();
        let mut policies = vec![Policy::Selection, Policy::Oracle];
        policies.extend(candidates.iter().map(|&c| Policy::Fixed(c)));
        let table = ratio_table(&results, &policies, &[1.5, 2.0, 5.0, 10.0]).unwrap();
        for row in &table.rows {
            for w in row.fractions.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(row.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
            if row.policy == Policy::Oracle {
                prop_assert!(row.fractions.iter().all(|&f| f == 0.0));
            }
        }
    }
}

fn snapshot(k: &[f64], e: &[f64], drivers: &[bool]) -> PipelineSnapshot {
    let n = e.len();
    PipelineSnapshot {
        pipeline: 0,
        time: 0.0,
        nodes: k
            .iter()
            .zip(e)
            .zip(drivers)
            .enumerate()
            .map(|(i, ((&k, &e), &driver))| NodeCounters {
                id: i as NodeId,
                kind: if driver { OperatorKind::TableScan } else { OperatorKind::Filter },
                driver,
                root: i + 1 == n,
                width: 8.0,
                k,
                e,
                lb: 0.0,
                ub: f64::INFINITY,
                r: 0.0,
                w: 0.0,
            })
            .collect(),
    }
}

#[test]
fn generator_covers_every_template() {
    let mut cfg = WorkloadConfig::new("cover");
    cfg.query_count = 60;
    let specs = generate_workload(&cfg).unwrap();
    let kinds: BTreeSet<OperatorKind> = specs.iter().flat_map(|s| s.plan.nodes.iter().map(|n| n.kind)).collect();
    assert!(kinds.contains(&OperatorKind::BatchSort));
    assert!(kinds.contains(&OperatorKind::IndexSeek));
    assert_eq!(cfg.operator_mix.len(), Template::ALL.len());
}

#[test]
fn selection_is_invariant_to_uniform_shift_and_schedule_ends_at_last_stage() {
    use progest::eval::ErrorOptions;
    use progest::features::Stage;
    use progest::par::Exec;
    use progest::selection::{build_training_set, select_online, train_selection};

    let traces = corpus(11, 12, 1.0, 0.6);
    let schema = FeatureSchema::new(FeatureConfig::default());
    let candidates = EstimatorId::CANDIDATES.to_vec();
    let examples = build_training_set(&traces, &candidates, &schema, &ErrorOptions::default(), Exec::default()).unwrap();
    let params = MartParams { iterations: 20, ..MartParams::default() };
    let model = train_selection(&examples, &candidates, &schema, &params, Exec::default()).unwrap();
    for shift in [0.25, 3.0, 1e3] {
        let mut shifted = model.clone();
        for m in &mut shifted.models {
            m.base += shift;
        }
        for ex in &examples {
            assert_eq!(model.ranked(&ex.features).unwrap(), shifted.ranked(&ex.features).unwrap());
        }
    }
    for trace in &traces {
        for p in 0..trace.pipelines.len() {
            let Ok(schedule) = select_online(&model, trace, p, false) else { continue };
            let last = schedule.final_choice();
            let obs = match last.stage {
                Stage::Static => None,
                Stage::At(_) => Some(last.observation),
            };
            let v = features_at(&schema, trace, p, obs).unwrap();
            assert_eq!(model.ranked(&v).unwrap(), last.ranking);
        }
    }
}
