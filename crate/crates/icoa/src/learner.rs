//! Per-agent base learners.
//!
//! Both learners fit an arbitrary real target on the agent's attribute
//! columns: a greedy sum-of-squared-error regression tree and ordinary least
//! squares on a total-degree-bounded monomial basis. Fitting and prediction
//! are pure and deterministic; fitted models are immutable and Send + Sync.

use crate::error::{IcoaError, Result};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

/// Numerical-conditioning cap on the polynomial total degree.
pub const MAX_POLY_DEGREE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Tree,
    Polynomial,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default = "default_tree_max_depth")]
    pub tree_max_depth: usize,
    #[serde(default = "default_tree_min_leaf")]
    pub tree_min_leaf: usize,
    #[serde(default = "default_poly_degree")]
    pub poly_degree: usize,
}

fn default_tree_max_depth() -> usize {
    10
}
fn default_tree_min_leaf() -> usize {
    5
}
fn default_poly_degree() -> usize {
    4
}

impl LearnerSpec {
    pub fn tree(max_depth: usize, min_leaf: usize) -> Self {
        LearnerSpec {
            kind: LearnerKind::Tree,
            tree_max_depth: max_depth,
            tree_min_leaf: min_leaf,
            poly_degree: default_poly_degree(),
        }
    }

    pub fn polynomial(degree: usize) -> Self {
        LearnerSpec {
            kind: LearnerKind::Polynomial,
            tree_max_depth: default_tree_max_depth(),
            tree_min_leaf: default_tree_min_leaf(),
            poly_degree: degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tree_max_depth < 1 {
            return Err(IcoaError::InvalidSpec("tree_max_depth must be >= 1".into()));
        }
        if self.tree_min_leaf < 1 {
            return Err(IcoaError::InvalidSpec("tree_min_leaf must be >= 1".into()));
        }
        if self.poly_degree > MAX_POLY_DEGREE {
            return Err(IcoaError::InvalidSpec(format!(
                "poly_degree {} exceeds the conditioning cap {}",
                self.poly_degree, MAX_POLY_DEGREE
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        attr: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    nodes: Vec<TreeNode>,
    arity: usize,
}

#[derive(Debug, Clone)]
pub struct PolyModel {
    /// Per-basis-function exponent vectors, degree-major then lexicographic.
    exponents: Vec<Vec<u32>>,
    coefficients: Vec<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum FittedModel {
    Tree(TreeModel),
    Polynomial(PolyModel),
}

impl FittedModel {
    pub fn arity(&self) -> usize {
        match self {
            FittedModel::Tree(t) => t.arity,
            FittedModel::Polynomial(p) => p.shift.len(),
        }
    }
}

/// Fits `spec`'s learner to `target` on the given attribute columns (each of
/// length N).
pub fn fit(spec: &LearnerSpec, columns: &[Vec<f64>], target: &[f64]) -> Result<FittedModel> {
    spec.validate()?;
    if columns.is_empty() {
        return Err(IcoaError::InvalidSpec("no attribute columns".into()));
    }
    let n = target.len();
    if n == 0 {
        return Err(IcoaError::InvalidSpec("empty target".into()));
    }
    for (j, c) in columns.iter().enumerate() {
        if c.len() != n {
            return Err(IcoaError::ShapeMismatch {
                expected: format!("column of length {n}"),
                got: format!("column {j} of length {}", c.len()),
            });
        }
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(IcoaError::NonFinite("fit target".into()));
    }
    match spec.kind {
        LearnerKind::Tree => Ok(FittedModel::Tree(fit_tree(spec, columns, target))),
        LearnerKind::Polynomial => Ok(FittedModel::Polynomial(fit_poly(spec, columns, target)?)),
    }
}

/// Predicts on attribute columns of length K.
pub fn predict(model: &FittedModel, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
    if columns.len() != model.arity() {
        return Err(IcoaError::ShapeMismatch {
            expected: format!("{} attribute columns", model.arity()),
            got: format!("{}", columns.len()),
        });
    }
    let k = columns.first().map_or(0, |c| c.len());
    let mut out = Vec::with_capacity(k);
    let mut point = vec![0.0; columns.len()];
    for i in 0..k {
        for (j, c) in columns.iter().enumerate() {
            point[j] = c[i];
        }
        out.push(match model {
            FittedModel::Tree(t) => predict_tree_point(t, &point),
            FittedModel::Polynomial(p) => predict_poly_point(p, &point),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Regression tree

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    target: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    attr: usize,
    threshold: f64,
    children_sse: f64,
}

fn fit_tree(spec: &LearnerSpec, columns: &[Vec<f64>], target: &[f64]) -> TreeModel {
    let mut b = TreeBuilder {
        columns,
        target,
        max_depth: spec.tree_max_depth,
        min_leaf: spec.tree_min_leaf,
        nodes: Vec::new(),
    };
    let idx: Vec<usize> = (0..target.len()).collect();
    b.build(idx, 0);
    TreeModel {
        nodes: b.nodes,
        arity: columns.len(),
    }
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (sum, sumsq) = idx.iter().fold((0.0, 0.0), |(s, q), &i| {
            (s + self.target[i], q + self.target[i] * self.target[i])
        });
        let n = idx.len() as f64;
        let mean = sum / n;
        let node_sse = (sumsq - sum * sum / n).max(0.0);

        let splittable = depth < self.max_depth
            && idx.len() >= 2 * self.min_leaf
            && !constant_targets(self.target, &idx);
        let best = if splittable {
            self.best_split(&idx, node_sse)
        } else {
            None
        };

        match best {
            None => {
                self.nodes.push(TreeNode::Leaf { value: mean });
                self.nodes.len() - 1
            }
            Some(s) => {
                let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
                    .into_iter()
                    .partition(|&i| self.columns[s.attr][i] < s.threshold);
                let slot = self.nodes.len();
                // placeholder, patched once the children are built
                self.nodes.push(TreeNode::Leaf { value: mean });
                let left = self.build(left_idx, depth + 1);
                let right = self.build(right_idx, depth + 1);
                self.nodes[slot] = TreeNode::Split {
                    attr: s.attr,
                    threshold: s.threshold,
                    left,
                    right,
                };
                slot
            }
        }
    }

    /// Scans all (attribute, midpoint-threshold) candidates in ascending
    /// attribute order, then ascending threshold; a strictly smaller combined
    /// child SSE wins, so ties keep the earliest candidate.
    fn best_split(&self, idx: &[usize], node_sse: f64) -> Option<BestSplit> {
        let mut best: Option<BestSplit> = None;
        for attr in 0..self.columns.len() {
            let col = &self.columns[attr];
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| {
                col[a]
                    .partial_cmp(&col[b])
                    .expect("finite covariates")
                    .then(a.cmp(&b))
            });
            let total_sum: f64 = order.iter().map(|&i| self.target[i]).sum();
            let total_sumsq: f64 = order.iter().map(|&i| self.target[i] * self.target[i]).sum();
            let n = order.len();
            let mut left_sum = 0.0;
            let mut left_sumsq = 0.0;
            for pos in 0..n - 1 {
                let i = order[pos];
                left_sum += self.target[i];
                left_sumsq += self.target[i] * self.target[i];
                let here = col[i];
                let next = col[order[pos + 1]];
                if next <= here {
                    continue; // no boundary between equal values
                }
                let n_left = pos + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let right_sum = total_sum - left_sum;
                let right_sumsq = total_sumsq - left_sumsq;
                let sse_l = (left_sumsq - left_sum * left_sum / n_left as f64).max(0.0);
                let sse_r = (right_sumsq - right_sum * right_sum / n_right as f64).max(0.0);
                let children = sse_l + sse_r;
                if children < node_sse && best.as_ref().is_none_or(|b| children < b.children_sse) {
                    best = Some(BestSplit {
                        attr,
                        threshold: 0.5 * (here + next),
                        children_sse: children,
                    });
                }
            }
        }
        best
    }
}

fn constant_targets(target: &[f64], idx: &[usize]) -> bool {
    let first = target[idx[0]];
    idx.iter().all(|&i| target[i] == first)
}

fn predict_tree_point(t: &TreeModel, point: &[f64]) -> f64 {
    let mut at = 0;
    loop {
        match &t.nodes[at] {
            TreeNode::Leaf { value } => return *value,
            TreeNode::Split {
                attr,
                threshold,
                left,
                right,
            } => {
                at = if point[*attr] < *threshold {
                    *left
                } else {
                    *right
                };
            }
        }
    }
}

impl TreeModel {
    /// Routes every training row and returns its leaf index; used to verify
    /// that leaf values equal the mean of the targets routed to them.
    pub fn leaf_assignments(&self, columns: &[Vec<f64>]) -> Vec<usize> {
        let k = columns.first().map_or(0, |c| c.len());
        let mut out = Vec::with_capacity(k);
        let mut point = vec![0.0; columns.len()];
        for i in 0..k {
            for (j, c) in columns.iter().enumerate() {
                point[j] = c[i];
            }
            let mut at = 0;
            loop {
                match &self.nodes[at] {
                    TreeNode::Leaf { .. } => break,
                    TreeNode::Split {
                        attr,
                        threshold,
                        left,
                        right,
                    } => {
                        at = if point[*attr] < *threshold {
                            *left
                        } else {
                            *right
                        };
                    }
                }
            }
            out.push(at);
        }
        out
    }

    pub fn leaf_value(&self, node: usize) -> Option<f64> {
        match self.nodes.get(node) {
            Some(TreeNode::Leaf { value }) => Some(*value),
            _ => None,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

// ---------------------------------------------------------------------------
// Polynomial least squares

/// All exponent vectors over `k` variables with total degree <= `degree`,
/// ordered degree-major then lexicographically.
fn monomial_exponents(k: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut current = vec![0u32; k];
        enumerate_compositions(total, 0, &mut current, &mut out);
    }
    out
}

fn enumerate_compositions(
    remaining: u32,
    pos: usize,
    current: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for take in 0..=remaining {
        current[pos] = take;
        enumerate_compositions(remaining - take, pos + 1, current, out);
    }
    current[pos] = 0;
}

fn fit_poly(spec: &LearnerSpec, columns: &[Vec<f64>], target: &[f64]) -> Result<PolyModel> {
    let k = columns.len();
    let n = target.len();
    let exponents = monomial_exponents(k, spec.poly_degree);

    // Standardize inputs for conditioning; affects coefficients only.
    let mut shift = Vec::with_capacity(k);
    let mut scale = Vec::with_capacity(k);
    for c in columns {
        let mean = c.iter().sum::<f64>() / n as f64;
        let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        shift.push(mean);
        scale.push(if sd > 0.0 { sd } else { 1.0 });
    }

    let mut design = DMatrix::zeros(n, exponents.len());
    for i in 0..n {
        for (b, exps) in exponents.iter().enumerate() {
            let mut v = 1.0;
            for (j, &e) in exps.iter().enumerate() {
                let z = (columns[j][i] - shift[j]) / scale[j];
                v *= z.powi(e as i32);
            }
            design[(i, b)] = v;
        }
    }
    let rhs = DVector::from_column_slice(target);
    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let coefficients = svd
        .solve(&rhs, max_sv * 1e-12)
        .map_err(|e| IcoaError::InvalidSpec(format!("least squares failed: {e}")))?;
    Ok(PolyModel {
        exponents,
        coefficients: coefficients.iter().cloned().collect(),
        shift,
        scale,
    })
}

fn predict_poly_point(p: &PolyModel, point: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (b, exps) in p.exponents.iter().enumerate() {
        let mut v = 1.0;
        for (j, &e) in exps.iter().enumerate() {
            let z = (point[j] - p.shift[j]) / p.scale[j];
            v *= z.powi(e as i32);
        }
        acc += p.coefficients[b] * v;
    }
    acc
}

impl PolyModel {
    pub fn n_basis(&self) -> usize {
        self.exponents.len()
    }
}
