//! Regression trees and stochastic gradient boosting (MART) with squared
//! error loss.
//!
//! Trees grow best-first with exact greedy split search: candidate
//! thresholds are midpoints between consecutive distinct feature values.
//! Each feature keeps its sampled rows presorted, and every leaf owns the
//! same contiguous range in all of those lists, so a split is a stable
//! partition of that range.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Exec;

#[derive(Debug, Error, PartialEq)]
pub enum MartError {
    #[error("empty training set")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("non-finite value at row {row}, feature {feature}")]
    NonFinite { row: usize, feature: usize },
    #[error("expected {expected} features, got {got}")]
    WidthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_leaves: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_leaves: 30,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartParams {
    pub iterations: usize,
    pub tree: TreeParams,
    pub shrinkage: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for MartParams {
    fn default() -> Self {
        MartParams {
            iterations: 200,
            tree: TreeParams::default(),
            shrinkage: 0.1,
            subsample: 0.7,
            seed: 0,
        }
    }
}

impl MartParams {
    pub fn validate(&self) -> Result<(), MartError> {
        let bad = |m: &str| Err(MartError::InvalidParams(m.to_string()));
        if self.tree.max_leaves < 1 {
            return bad("max_leaves must be >= 1");
        }
        if self.tree.min_leaf < 1 {
            return bad("min_leaf must be >= 1");
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return bad("shrinkage must be in (0, 1]");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

/// Binary tree stored as a flat node list; node 0 is the root. Rows with
/// `value <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, v: &[f64]) -> f64 {
        self.predict_with(|f| v[f])
    }

    fn predict_with(&self, value: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if value(*feature as usize) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    }
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature as usize),
            TreeNode::Leaf { .. } => None,
        })
    }
}

/// Column-major feature matrix with per-feature presorted row order.
pub struct Dataset {
    rows: usize,
    columns: Vec<Vec<f64>>,
    /// Distinct sorted values per feature; codes index into these.
    distinct: Vec<Vec<f64>>,
    /// `(code, row)` per feature, sorted by code then row.
    sorted: Vec<Vec<(u32, u32)>>,
}

impl Dataset {
    pub fn new<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MartError> {
        Self::with_exec(rows, Exec::default())
    }

    pub fn with_exec<R: AsRef<[f64]>>(rows: &[R], exec: Exec) -> Result<Self, MartError> {
        let n = rows.len();
        if n == 0 {
            return Err(MartError::Empty);
        }
        let width = rows[0].as_ref().len();
        for (r, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != width {
                return Err(MartError::WidthMismatch {
                    expected: width,
                    got: row.len(),
                });
            }
            if let Some(f) = row.iter().position(|v| !v.is_finite()) {
                return Err(MartError::NonFinite { row: r, feature: f });
            }
        }
        let columns: Vec<Vec<f64>> = (0..width)
            .map(|f| rows.iter().map(|r| r.as_ref()[f]).collect())
            .collect();
        let per_feature = exec.map(&columns, |col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            let mut distinct: Vec<f64> = Vec::new();
            let mut sorted = Vec::with_capacity(n);
            for &r in &idx {
                let v = col[r as usize];
                if distinct.last() != Some(&v) {
                    distinct.push(v);
                }
                sorted.push(((distinct.len() - 1) as u32, r));
            }
            (distinct, sorted)
        });
        let (distinct, sorted) = per_feature.into_iter().unzip();
        Ok(Dataset {
            rows: n,
            columns,
            distinct,
            sorted,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn features(&self) -> usize {
        self.columns.len()
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }

    /// Threshold separating code `c` from `c + 1`: the midpoint, or the
    /// lower value when the midpoint rounds up to the upper one.
    fn threshold(&self, feature: usize, code: u32) -> f64 {
        let a = self.distinct[feature][code as usize];
        let b = self.distinct[feature][code as usize + 1];
        let mid = a + (b - a) / 2.0;
        if mid >= b || mid < a {
            a
        } else {
            mid
        }
    }

    /// Restricts a dataset to a subset of its columns.
    pub fn select_features(&self, features: &[usize]) -> Dataset {
        Dataset {
            rows: self.rows,
            columns: features.iter().map(|&f| self.columns[f].clone()).collect(),
            distinct: features.iter().map(|&f| self.distinct[f].clone()).collect(),
            sorted: features.iter().map(|&f| self.sorted[f].clone()).collect(),
        }
    }

    /// Restricts a dataset to a subset of its rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let mut new_index = vec![u32::MAX; self.rows];
        for (i, &r) in rows.iter().enumerate() {
            new_index[r] = i as u32;
        }
        let columns: Vec<Vec<f64>> = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        let mut distinct = Vec::with_capacity(self.columns.len());
        let mut sorted = Vec::with_capacity(self.columns.len());
        for (f, s) in self.sorted.iter().enumerate() {
            let mut kept: Vec<(u32, u32)> = s
                .iter()
                .filter(|(_, r)| new_index[*r as usize] != u32::MAX)
                .map(|&(c, r)| (c, new_index[r as usize]))
                .collect();
            kept.sort_by_key(|&(c, r)| (c, r));
            let mut d: Vec<f64> = Vec::new();
            let mut last = None;
            for e in kept.iter_mut() {
                if last != Some(e.0) {
                    last = Some(e.0);
                    d.push(self.distinct[f][e.0 as usize]);
                }
                e.0 = (d.len() - 1) as u32;
            }
            distinct.push(d);
            sorted.push(kept);
        }
        Dataset {
            rows: rows.len(),
            columns,
            distinct,
            sorted,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    code: u32,
    gain: f64,
    left_count: usize,
}

struct Leaf {
    node: usize,
    lo: usize,
    hi: usize,
    sum: f64,
    active: Vec<usize>,
    split: Option<Split>,
}

/// Best split of one feature over a leaf's range, and whether the feature
/// varies inside the leaf.
fn best_split_for(
    entries: &[(u32, u32)],
    resid: &[f64],
    sum: f64,
    min_leaf: usize,
) -> (Option<(u32, f64, usize)>, bool) {
    let n = entries.len();
    if n == 0 || entries[0].0 == entries[n - 1].0 {
        return (None, false);
    }
    let parent = sum * sum / n as f64;
    let mut best: Option<(u32, f64, usize)> = None;
    let mut left = 0.0;
    let last = n - min_leaf;
    for j in 0..last {
        let (code, row) = entries[j];
        left += resid[row as usize];
        let nl = j + 1;
        if nl < min_leaf || entries[j + 1].0 == code {
            continue;
        }
        let nr = (n - nl) as f64;
        let right = sum - left;
        let gain = left * left / nl as f64 + right * right / nr - parent;
        if best.is_none_or(|(_, g, _)| gain > g) {
            best = Some((code, gain, nl));
        }
    }
    (best, true)
}

struct Grower<'a> {
    data: &'a Dataset,
    resid: &'a [f64],
    params: TreeParams,
    exec: Exec,
    order: Vec<Vec<(u32, u32)>>,
    scratch: Vec<Vec<(u32, u32)>>,
    left_mark: Vec<bool>,
}

impl Grower<'_> {
    fn search(&self, leaf: &mut Leaf) {
        let n = leaf.hi - leaf.lo;
        leaf.split = None;
        if n < 2 * self.params.min_leaf || leaf.active.is_empty() {
            return;
        }
        let (lo, hi, sum) = (leaf.lo, leaf.hi, leaf.sum);
        let results = self.exec.map(&leaf.active, |&f| {
            best_split_for(&self.order[f][lo..hi], self.resid, sum, self.params.min_leaf)
        });
        let sumsq: f64 = self.order[leaf.active[0]][lo..hi]
            .iter()
            .map(|&(_, r)| self.resid[r as usize].powi(2))
            .sum();
        let tolerance = 1e-12 * sumsq.max(f64::MIN_POSITIVE);
        let mut active = Vec::with_capacity(leaf.active.len());
        let mut best: Option<Split> = None;
        for (&f, (split, varies)) in leaf.active.iter().zip(results) {
            if varies {
                active.push(f);
            }
            if let Some((code, gain, left_count)) = split {
                if gain > tolerance && best.is_none_or(|b| gain > b.gain) {
                    best = Some(Split {
                        feature: f,
                        code,
                        gain,
                        left_count,
                    });
                }
            }
        }
        leaf.active = active;
        leaf.split = best;
    }

    fn partition(&mut self, leaf: &Leaf, split: Split) {
        let (lo, hi) = (leaf.lo, leaf.hi);
        for &(_, r) in &self.order[split.feature][lo..lo + split.left_count] {
            self.left_mark[r as usize] = true;
        }
        let marks = &self.left_mark;
        let mut pairs: Vec<(usize, (&mut Vec<(u32, u32)>, &mut Vec<(u32, u32)>))> = Vec::new();
        let mut active = leaf.active.iter().peekable();
        for (f, pair) in self.order.iter_mut().zip(self.scratch.iter_mut()).enumerate() {
            if active.peek() == Some(&&f) {
                active.next();
                pairs.push((f, pair));
            }
        }
        self.exec.for_each_mut(&mut pairs, |_, (_, (order, scratch))| {
            scratch.clear();
            let mut w = lo;
            for j in lo..hi {
                let e = order[j];
                if marks[e.1 as usize] {
                    order[w] = e;
                    w += 1;
                } else {
                    scratch.push(e);
                }
            }
            order[w..hi].copy_from_slice(scratch);
        });
        for &(_, r) in &self.order[split.feature][lo..lo + split.left_count] {
            self.left_mark[r as usize] = false;
        }
    }

    fn grow(mut self, rows: &[u32]) -> RegressionTree {
        let sum: f64 = rows.iter().map(|&r| self.resid[r as usize]).sum();
        let mut nodes = vec![TreeNode::Leaf {
            value: sum / rows.len() as f64,
        }];
        let mut root = Leaf {
            node: 0,
            lo: 0,
            hi: rows.len(),
            sum,
            active: (0..self.data.features()).collect(),
            split: None,
        };
        self.search(&mut root);
        let mut leaves = vec![root];
        while leaves.len() < self.params.max_leaves {
            let mut pick: Option<usize> = None;
            for (i, l) in leaves.iter().enumerate() {
                if let Some(s) = l.split {
                    if pick.is_none_or(|p| s.gain > leaves[p].split.unwrap().gain) {
                        pick = Some(i);
                    }
                }
            }
            let Some(p) = pick else { break };
            let leaf = leaves.remove(p);
            let split = leaf.split.unwrap();
            self.partition(&leaf, split);
            let mid = leaf.lo + split.left_count;
            let left_sum: f64 = self.order[split.feature][leaf.lo..mid]
                .iter()
                .map(|&(_, r)| self.resid[r as usize])
                .sum();
            let right_sum: f64 = self.order[split.feature][mid..leaf.hi]
                .iter()
                .map(|&(_, r)| self.resid[r as usize])
                .sum();
            let (l, r) = (nodes.len(), nodes.len() + 1);
            nodes[leaf.node] = TreeNode::Split {
                feature: split.feature as u32,
                threshold: self.data.threshold(split.feature, split.code),
                left: l as u32,
                right: r as u32,
            };
            nodes.push(TreeNode::Leaf {
                value: left_sum / (mid - leaf.lo) as f64,
            });
            nodes.push(TreeNode::Leaf {
                value: right_sum / (leaf.hi - mid) as f64,
            });
            let children = [(l, leaf.lo, mid, left_sum), (r, mid, leaf.hi, right_sum)].map(
                |(node, lo, hi, sum)| {
                    let mut child = Leaf {
                        node,
                        lo,
                        hi,
                        sum,
                        active: leaf.active.clone(),
                        split: None,
                    };
                    self.search(&mut child);
                    child
                },
            );
            leaves.splice(p..p, children);
        }
        RegressionTree { nodes }
    }
}

fn sorted_rows(data: &Dataset, in_sample: Option<&[bool]>) -> Vec<Vec<(u32, u32)>> {
    data.sorted
        .iter()
        .map(|s| match in_sample {
            None => s.clone(),
            Some(mask) => s.iter().copied().filter(|&(_, r)| mask[r as usize]).collect(),
        })
        .collect()
}

fn fit_rows(data: &Dataset, resid: &[f64], rows: &[u32], all: bool, params: TreeParams, exec: Exec) -> RegressionTree {
    let order = if all {
        sorted_rows(data, None)
    } else {
        let mut mask = vec![false; data.rows()];
        for &r in rows {
            mask[r as usize] = true;
        }
        sorted_rows(data, Some(&mask))
    };
    let grower = Grower {
        data,
        resid,
        params,
        exec,
        scratch: vec![Vec::new(); data.features()],
        order,
        left_mark: vec![false; data.rows()],
    };
    grower.grow(rows)
}

/// Fits one regression tree to `residuals` (one per dataset row).
pub fn fit_tree(data: &Dataset, residuals: &[f64], params: TreeParams, exec: Exec) -> Result<RegressionTree, MartError> {
    if residuals.len() != data.rows() {
        return Err(MartError::WidthMismatch {
            expected: data.rows(),
            got: residuals.len(),
        });
    }
    if params.max_leaves < 1 || params.min_leaf < 1 {
        return Err(MartError::InvalidParams("tree limits must be >= 1".into()));
    }
    let rows: Vec<u32> = (0..data.rows() as u32).collect();
    Ok(fit_rows(data, residuals, &rows, true, params, exec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartModel {
    /// Fingerprint of the feature schema the model was trained on.
    pub schema: String,
    pub feature_count: usize,
    pub params: MartParams,
    pub base: f64,
    pub trees: Vec<RegressionTree>,
}

impl MartModel {
    pub fn predict(&self, v: &[f64]) -> Result<f64, MartError> {
        if v.len() != self.feature_count {
            return Err(MartError::WidthMismatch {
                expected: self.feature_count,
                got: v.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(v)).sum();
        Ok(self.base + self.params.shrinkage * sum)
    }

    fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        let sum: f64 = self
            .trees
            .iter()
            .map(|t| t.predict_with(|f| data.value(row, f)))
            .sum();
        self.base + self.params.shrinkage * sum
    }
}

fn mean_squared(labels: &[f64], pred: &[f64]) -> f64 {
    labels
        .iter()
        .zip(pred)
        .map(|(y, p)| (y - p).powi(2))
        .sum::<f64>()
        / labels.len() as f64
}

/// Trains a boosted model; also returns the training MSE after the base
/// prediction and after every iteration.
pub fn train_mart_traced(
    data: &Dataset,
    labels: &[f64],
    params: &MartParams,
    schema: &str,
    exec: Exec,
) -> Result<(MartModel, Vec<f64>), MartError> {
    train_mart_observed(data, labels, params, schema, exec, |_, _| {})
}

/// Like [`train_mart_traced`], calling `observe(iteration, mse)` after each
/// tree is added.
pub fn train_mart_observed(
    data: &Dataset,
    labels: &[f64],
    params: &MartParams,
    schema: &str,
    exec: Exec,
    mut observe: impl FnMut(usize, f64),
) -> Result<(MartModel, Vec<f64>), MartError> {
    params.validate()?;
    let n = data.rows();
    if n == 0 || labels.is_empty() {
        return Err(MartError::Empty);
    }
    if labels.len() != n {
        return Err(MartError::WidthMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(r) = labels.iter().position(|y| !y.is_finite()) {
        return Err(MartError::NonFinite { row: r, feature: 0 });
    }
    let base = labels.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mut history = vec![mean_squared(labels, &pred)];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let take = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let all: Vec<u32> = (0..n as u32).collect();
    let mut resid = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        for i in 0..n {
            resid[i] = labels[i] - pred[i];
        }
        let tree = if take == n {
            fit_rows(data, &resid, &all, true, params.tree, exec)
        } else {
            let mut rows: Vec<u32> = sample(&mut rng, n, take).into_iter().map(|r| r as u32).collect();
            rows.sort_unstable();
            fit_rows(data, &resid, &rows, false, params.tree, exec)
        };
        for (i, p) in pred.iter_mut().enumerate() {
            *p += params.shrinkage * tree.predict_with(|f| data.value(i, f));
        }
        let mse = mean_squared(labels, &pred);
        history.push(mse);
        trees.push(tree);
        observe(it + 1, mse);
    }
    let model = MartModel {
        schema: schema.to_string(),
        feature_count: data.features(),
        params: params.clone(),
        base,
        trees,
    };
    debug_assert!(n == 0 || (model.predict_row(data, 0) - pred[0]).abs() < 1e-6);
    Ok((model, history))
}

pub fn train_mart(
    data: &Dataset,
    labels: &[f64],
    params: &MartParams,
    schema: &str,
    exec: Exec,
) -> Result<MartModel, MartError> {
    train_mart_traced(data, labels, params, schema, exec).map(|(m, _)| m)
}
