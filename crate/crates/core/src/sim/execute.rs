//! Iterator-model execution of a query spec.
//!
//! Pipelines run one after another in execution order. Inside a pipeline the
//! driver nodes produce rows (interleaved in proportion to their sizes) and
//! every other node is *paced* by one or more source nodes: each time a
//! source emits a row, the paced node emits its allotted number of rows.
//! A node's total output is spread over its pacing events uniformly, or by
//! Zipf-distributed weights for nested-loop fan-out. Every GetNext call
//! advances the clock by the node's per-tuple cost.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CounterSnapshot, QuerySpec, SimError, Span, Trace, Truth};
use crate::par::Exec;
use crate::plan::{decompose_pipelines, OperatorKind, Pipeline};

struct Layout {
    kinds: Vec<OperatorKind>,
    children: Vec<Vec<usize>>,
    pipelines: Vec<Pipeline>,
    pipeline_nodes: Vec<Vec<usize>>,
    pipeline_drivers: Vec<Vec<usize>>,
    pipeline_of: Vec<usize>,
    is_driver: Vec<bool>,
    is_root: Vec<bool>,
    pacing: Vec<Vec<usize>>,
    dependents: Vec<Vec<usize>>,
    /// Nested loop join whose fan-out weights pace this node.
    skew_owner: Vec<Option<usize>>,
    /// Outer child of the nearest nested loop join whose inner subtree holds
    /// the node (plan-wide).
    inner_outer: Vec<Option<usize>>,
}

impl Layout {
    fn new(spec: &QuerySpec) -> Result<Self, SimError> {
        let plan = &spec.plan;
        let n = plan.nodes.len();
        let index = plan.index_map();
        let kinds: Vec<_> = plan.nodes.iter().map(|x| x.kind).collect();
        let children = plan.child_positions();
        let pipelines = decompose_pipelines(plan)?;
        let mut pipeline_of = vec![0; n];
        let mut is_driver = vec![false; n];
        let mut is_root = vec![false; n];
        let mut pipeline_nodes = Vec::new();
        let mut pipeline_drivers = Vec::new();
        for p in &pipelines {
            let nodes: Vec<usize> = p.nodes.iter().map(|id| index[id]).collect();
            let drivers: Vec<usize> = p.drivers.iter().map(|id| index[id]).collect();
            for &i in &nodes {
                pipeline_of[i] = p.id;
            }
            for &d in &drivers {
                is_driver[d] = true;
            }
            is_root[index[&p.root]] = true;
            pipeline_nodes.push(nodes);
            pipeline_drivers.push(drivers);
        }

        // Post-order numbering so dependents fire bottom-up.
        let root = index[&plan.root];
        let mut post = vec![0usize; n];
        let mut counter = 0;
        fn number(i: usize, ch: &[Vec<usize>], post: &mut [usize], c: &mut usize) {
            for &x in &ch[i] {
                number(x, ch, post, c);
            }
            post[i] = *c;
            *c += 1;
        }
        number(root, &children, &mut post, &mut counter);

        let mut pacing = vec![Vec::new(); n];
        let mut skew_owner = vec![None; n];
        #[allow(clippy::too_many_arguments)]
        fn visit(
            i: usize,
            ctx: Option<(usize, usize)>,
            kinds: &[OperatorKind],
            children: &[Vec<usize>],
            pipeline_of: &[usize],
            is_driver: &[bool],
            pacing: &mut [Vec<usize>],
            skew_owner: &mut [Option<usize>],
        ) {
            let is_nl = kinds[i] == OperatorKind::NestedLoopJoin;
            let mut outer = Vec::new();
            for (slot, &c) in children[i].iter().enumerate() {
                if pipeline_of[c] != pipeline_of[i] {
                    continue;
                }
                if is_nl && slot > 0 {
                    let src = match children[i].first() {
                        Some(&o) if pipeline_of[o] == pipeline_of[i] => o,
                        _ => i,
                    };
                    visit(c, Some((src, i)), kinds, children, pipeline_of, is_driver, pacing, skew_owner);
                } else {
                    outer.push(c);
                    visit(c, ctx, kinds, children, pipeline_of, is_driver, pacing, skew_owner);
                }
            }
            if is_driver[i] {
                return;
            }
            if !outer.is_empty() {
                if is_nl {
                    skew_owner[i] = Some(i);
                }
                pacing[i] = outer;
            } else if let Some((src, nl)) = ctx {
                pacing[i] = vec![src];
                skew_owner[i] = Some(nl);
            }
        }
        for p in &pipelines {
            visit(
                index[&p.root],
                None,
                &kinds,
                &children,
                &pipeline_of,
                &is_driver,
                &mut pacing,
                &mut skew_owner,
            );
        }
        let mut dependents = vec![Vec::new(); n];
        for (i, srcs) in pacing.iter().enumerate() {
            for &s in srcs {
                dependents[s].push(i);
            }
        }
        for d in &mut dependents {
            d.sort_by_key(|&x| post[x]);
        }

        let mut inner_outer = vec![None; n];
        fn mark(i: usize, ctx: Option<usize>, kinds: &[OperatorKind], ch: &[Vec<usize>], out: &mut [Option<usize>]) {
            out[i] = ctx;
            for (slot, &c) in ch[i].iter().enumerate() {
                if kinds[i] == OperatorKind::NestedLoopJoin && slot > 0 {
                    mark(c, Some(ch[i][0]), kinds, ch, out);
                } else {
                    mark(c, ctx, kinds, ch, out);
                }
            }
        }
        mark(root, None, &kinds, &children, &mut inner_outer);

        Ok(Layout {
            kinds,
            children,
            pipelines,
            pipeline_nodes,
            pipeline_drivers,
            pipeline_of,
            is_driver,
            is_root,
            pacing,
            dependents,
            skew_owner,
            inner_outer,
        })
    }
}

/// Even spread of `total` over `events` slots: slot `j` gets
/// floor((j+1)T/E) - floor(jT/E).
fn uniform_share(total: u64, events: u64, j: u64) -> u64 {
    if events == 0 {
        return 0;
    }
    let t = total as u128;
    let e = events as u128;
    let j = j as u128;
    (((j + 1) * t) / e - (j * t) / e) as u64
}

/// Largest-remainder apportionment of `total` by `weights`.
fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut rema = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (j, &w) in weights.iter().enumerate() {
        let q = total as f64 * w / sum;
        let f = q.floor();
        out.push(f as u64);
        assigned += f as u64;
        rema.push((q - f, j));
    }
    let mut left = total.saturating_sub(assigned);
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, j) in rema.iter().cycle() {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    out
}

struct State<'a> {
    spec: &'a QuerySpec,
    lay: &'a Layout,
    interval: f64,
    rows: Vec<u64>,
    total: Vec<u64>,
    width: Vec<u64>,
    cost: Vec<f64>,
    /// Events (rows of all pacing sources) each paced node will see.
    events: Vec<u64>,
    shares: Vec<Option<Vec<u64>>>,
    spill: Vec<u64>,
    k: Vec<u64>,
    emitted: Vec<u64>,
    consumed: Vec<u64>,
    batch_rows: Vec<u64>,
    batch_inputs: Vec<u64>,
    closed: Vec<bool>,
    started: Vec<bool>,
    r: Vec<u64>,
    w: Vec<u64>,
    clock: f64,
    next_tick: f64,
    observations: Vec<CounterSnapshot>,
}

impl<'a> State<'a> {
    fn new(spec: &'a QuerySpec, lay: &'a Layout, interval: f64) -> Self {
        let n = spec.plan.nodes.len();
        let rows: Vec<u64> = spec.nodes.iter().map(|x| x.true_cardinality).collect();
        let total = (0..n).map(|i| spec.total_getnext(i)).collect();
        let width = spec.plan.nodes.iter().map(|x| x.est_row_width as u64).collect();
        let cost = spec.nodes.iter().map(|x| x.per_tuple_cost).collect();
        let spill = spec.nodes.iter().map(|x| x.spill_calls()).collect();
        let events: Vec<u64> = lay
            .pacing
            .iter()
            .map(|srcs| srcs.iter().map(|&s| rows[s]).sum())
            .collect();

        // Zipf weights per nested loop join, over its outer rows in random order.
        let mut weights: Vec<Option<Vec<f64>>> = vec![None; n];
        if spec.skew_z > 0.0 {
            for i in 0..n {
                if let Some(owner) = lay.skew_owner[i] {
                    if weights[owner].is_none() {
                        let count = events[i] as usize;
                        let mut ranks: Vec<u64> = (1..=count as u64).collect();
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            spec.seed ^ (spec.plan.nodes[owner].id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        );
                        ranks.shuffle(&mut rng);
                        weights[owner] =
                            Some(ranks.iter().map(|&r| (r as f64).powf(-spec.skew_z)).collect());
                    }
                }
            }
        }
        let shares = (0..n)
            .map(|i| {
                let owner = lay.skew_owner[i]?;
                let w = weights[owner].as_ref()?;
                (w.len() as u64 == events[i]).then(|| apportion(rows[i], w))
            })
            .collect();

        State {
            spec,
            lay,
            interval,
            rows,
            total,
            width,
            cost,
            events,
            shares,
            spill,
            k: vec![0; n],
            emitted: vec![0; n],
            consumed: vec![0; n],
            batch_rows: vec![0; n],
            batch_inputs: vec![0; n],
            closed: vec![false; n],
            started: vec![false; lay.pipelines.len()],
            r: vec![0; n],
            w: vec![0; n],
            clock: 0.0,
            next_tick: interval,
            observations: Vec::new(),
        }
    }

    fn getnext(&mut self, i: usize) {
        self.k[i] += 1;
        self.clock += self.cost[i];
        if self.clock >= self.next_tick {
            let snap = self.snapshot();
            self.observations.push(snap);
            self.next_tick = self.interval * ((self.clock / self.interval).floor() + 1.0);
        }
    }

    fn emit(&mut self, i: usize) {
        self.getnext(i);
        let j = self.emitted[i];
        self.emitted[i] += 1;
        if self.lay.is_driver[i] {
            self.r[i] += self.width[i];
        }
        if self.lay.is_root[i] {
            self.w[i] += self.width[i];
        }
        for _ in 0..uniform_share(self.spill[i], self.rows[i], j) {
            self.getnext(i);
            self.r[i] += self.width[i];
            self.w[i] += self.width[i];
        }
        for idx in 0..self.lay.dependents[i].len() {
            let d = self.lay.dependents[i][idx];
            self.on_event(d);
        }
    }

    fn on_event(&mut self, d: usize) {
        let j = self.consumed[d];
        self.consumed[d] += 1;
        let count = match &self.shares[d] {
            Some(s) => s[j as usize],
            None => uniform_share(self.rows[d], self.events[d], j),
        };
        let last = self.consumed[d] == self.events[d];
        if self.lay.kinds[d] == OperatorKind::BatchSort {
            self.batch_rows[d] += count;
            self.batch_inputs[d] += 1;
            let size = self.spec.nodes[d].batch_size.unwrap_or(1);
            if self.batch_inputs[d] >= size || last {
                self.flush(d);
            }
        } else {
            for _ in 0..count {
                self.emit(d);
            }
        }
        if last {
            self.closed[d] = true;
        }
    }

    fn flush(&mut self, d: usize) {
        let n = std::mem::take(&mut self.batch_rows[d]);
        self.batch_inputs[d] = 0;
        for _ in 0..n {
            self.getnext(d);
        }
        for _ in 0..n {
            self.emit(d);
        }
    }

    fn rows_known(&self, i: usize) -> bool {
        self.closed[i] || (self.lay.is_driver[i] && self.started[self.lay.pipeline_of[i]])
    }

    fn per_exec_ub(&self, i: usize) -> u64 {
        let ch = &self.lay.children[i];
        if ch.is_empty() {
            return self.spec.nodes[i].table_rows;
        }
        ch.iter()
            .fold(1u64, |acc, &c| acc.saturating_mul(self.per_exec_ub(c)))
    }

    fn rows_ub(&self, i: usize, memo: &mut [Option<u64>]) -> u64 {
        if let Some(v) = memo[i] {
            return v;
        }
        let v = if self.rows_known(i) {
            self.rows[i]
        } else {
            let ch = &self.lay.children[i];
            if ch.is_empty() {
                let mult = match self.lay.inner_outer[i] {
                    Some(o) => self.rows_ub(o, memo),
                    None => 1,
                };
                self.spec.nodes[i].table_rows.saturating_mul(mult)
            } else if self.lay.kinds[i] == OperatorKind::NestedLoopJoin && ch.len() > 1 {
                let mut acc = self.rows_ub(ch[0], memo);
                for &c in &ch[1..] {
                    acc = acc.saturating_mul(self.per_exec_ub(c));
                }
                acc
            } else {
                let mut acc = 1u64;
                for &c in ch {
                    acc = acc.saturating_mul(self.rows_ub(c, memo));
                }
                acc
            }
        };
        memo[i] = Some(v);
        v
    }

    fn rows_lb(&self, i: usize) -> u64 {
        if self.rows_known(i) {
            self.rows[i]
        } else {
            self.emitted[i]
        }
    }

    fn getnext_from_rows(&self, i: usize, rows: u64) -> u64 {
        let spill = (self.spec.nodes[i].spill_fraction * rows as f64).ceil() as u64;
        let sort = if self.lay.kinds[i] == OperatorKind::BatchSort { rows } else { 0 };
        rows.saturating_add(spill).saturating_add(sort)
    }

    fn bounds(&self) -> (Vec<u64>, Vec<u64>) {
        let n = self.k.len();
        let mut memo = vec![None; n];
        let mut lb = vec![0; n];
        let mut ub = vec![0; n];
        for i in 0..n {
            if self.rows_known(i) {
                lb[i] = self.total[i];
                ub[i] = self.total[i];
                continue;
            }
            let rows_ub = self.rows_ub(i, &mut memo);
            let floor_rows = match self.lay.kinds[i] {
                OperatorKind::Sort | OperatorKind::BatchSort | OperatorKind::Spool => self.lay.children[i]
                    .first()
                    .map(|&c| self.rows_lb(c))
                    .unwrap_or(0),
                OperatorKind::HashAggregate | OperatorKind::StreamAggregate => self.lay.children[i]
                    .first()
                    .map(|&c| self.rows_lb(c).min(1))
                    .unwrap_or(0),
                _ => 0,
            };
            let floor = if self.lay.kinds[i] == OperatorKind::BatchSort {
                floor_rows * 2
            } else {
                floor_rows
            };
            lb[i] = self.k[i].max(floor);
            ub[i] = self.getnext_from_rows(i, rows_ub).max(lb[i]);
        }
        (lb, ub)
    }

    fn snapshot(&self) -> CounterSnapshot {
        let (lb, ub) = self.bounds();
        let e = self
            .spec
            .plan
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| node.est_cardinality.clamp(lb[i], ub[i]))
            .collect();
        CounterSnapshot {
            time: self.clock,
            k: self.k.clone(),
            e,
            lb,
            ub,
            r: self.r.clone(),
            w: self.w.clone(),
        }
    }

    /// Snapshot at the current clock, replacing one already taken at this
    /// exact time.
    fn boundary(&mut self) -> usize {
        let snap = self.snapshot();
        match self.observations.last_mut() {
            Some(last) if last.time == self.clock => *last = snap,
            _ => self.observations.push(snap),
        }
        self.observations.len() - 1
    }

    fn run_pipeline(&mut self, p: usize) -> Span {
        self.started[p] = true;
        let start = self.boundary();
        let drivers = self.lay.pipeline_drivers[p].clone();
        loop {
            // Driver with the smallest consumed fraction goes next.
            let mut best: Option<usize> = None;
            for &d in &drivers {
                if self.emitted[d] >= self.rows[d] {
                    continue;
                }
                best = match best {
                    None => Some(d),
                    Some(b) => {
                        let lhs = self.emitted[d] as u128 * self.rows[b] as u128;
                        let rhs = self.emitted[b] as u128 * self.rows[d] as u128;
                        if lhs < rhs {
                            Some(d)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            let Some(d) = best else { break };
            self.emit(d);
            if self.emitted[d] == self.rows[d] {
                self.closed[d] = true;
            }
        }
        for &i in &self.lay.pipeline_nodes[p] {
            self.closed[i] = true;
        }
        let end = self.boundary();
        Span { start, end }
    }
}

/// Runs a query spec and returns its counter trace.
pub fn execute(spec: &QuerySpec, interval: f64) -> Result<Trace, SimError> {
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(SimError::Config("observation interval must be > 0".into()));
    }
    spec.validate()?;
    let lay = Layout::new(spec)?;
    let (_, static_ub) = static_bounds_with(spec, &lay);
    for i in 0..spec.plan.nodes.len() {
        if spec.total_getnext(i) > static_ub[i] {
            return Err(SimError::InvalidSpec {
                query: spec.query_id.clone(),
                reason: format!("node {} cardinality exceeds its upper bound", spec.plan.nodes[i].id),
            });
        }
    }
    for (i, srcs) in lay.pacing.iter().enumerate() {
        let events: u64 = srcs.iter().map(|&s| spec.nodes[s].true_cardinality).sum();
        if !lay.is_driver[i] && events == 0 && spec.nodes[i].true_cardinality > 0 {
            return Err(SimError::InvalidSpec {
                query: spec.query_id.clone(),
                reason: format!("node {} produces rows without input", spec.plan.nodes[i].id),
            });
        }
    }

    let mut st = State::new(spec, &lay, interval);
    st.boundary();
    let spans: Vec<Span> = (0..lay.pipelines.len()).map(|p| st.run_pipeline(p)).collect();

    if let Some((i, _)) = st.k.iter().zip(&st.total).enumerate().find(|(_, (k, n))| k != n) {
        return Err(SimError::InvalidSpec {
            query: spec.query_id.clone(),
            reason: format!(
                "node {} issued {} GetNext calls, expected {}",
                spec.plan.nodes[i].id, st.k[i], st.total[i]
            ),
        });
    }
    let truth = Truth {
        getnext: st.total.clone(),
        bytes_read: st.r.clone(),
        bytes_written: st.w.clone(),
    };
    Ok(Trace {
        query_id: spec.query_id.clone(),
        family: spec.family.clone(),
        plan: spec.plan.clone(),
        pipelines: lay.pipelines.clone(),
        spans,
        truth,
        observations: st.observations,
    })
}

fn static_bounds_with(spec: &QuerySpec, lay: &Layout) -> (Vec<u64>, Vec<u64>) {
    State::new(spec, lay, 1.0).bounds()
}

/// GetNext bounds before execution starts.
pub fn static_bounds(spec: &QuerySpec) -> Result<(Vec<u64>, Vec<u64>), SimError> {
    let lay = Layout::new(spec)?;
    Ok(static_bounds_with(spec, &lay))
}

/// Executes many specs, in parallel when `exec` allows it.
/// Executes every spec at its own observation interval, or at `interval`
/// when given.
pub fn execute_all(specs: &[QuerySpec], interval: Option<f64>, exec: Exec) -> Vec<Result<Trace, SimError>> {
    exec.map(specs, |s| execute(s, interval.unwrap_or(s.observation_interval)))
}
