//! Per-variable conditional probability distributions: probabilistic decision
//! trees and L1-regularized logistic regressions, learned from data, plus
//! their closed-form conversion to weighted conjunctive features and the
//! dependency networks they make up.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{
    canonicalize_feature, Assignment, Canonical, ConditionalModel, ConjunctiveFeature,
    Distribution, MarkovNetwork, Schema, VariableTest, WeightedFeature,
};

/// Node of a probabilistic decision tree. Interior nodes test one variable
/// against one value; leaves hold a distribution over the target.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf(Distribution),
    Split {
        test: VariableTest,
        on_true: Box<TreeNode>,
        on_false: Box<TreeNode>,
    },
}

/// A decision-tree CPD for one target variable. No interior node tests the
/// target, no (variable, value) test repeats on a root-to-leaf path, and
/// every leaf distribution is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeCpd {
    target: usize,
    root: TreeNode,
}

impl TreeCpd {
    pub fn new(target: usize, root: TreeNode, schema: &Schema) -> Result<Self> {
        if target >= schema.len() {
            return Err(Error::SchemaViolation(format!(
                "target {target} out of range"
            )));
        }
        let mut path = Vec::new();
        validate_node(&root, target, schema, &mut path)?;
        Ok(TreeCpd { target, root })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    /// Distribution at the leaf reached by following tests against `a`.
    pub fn predict(&self, a: &Assignment) -> Distribution {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf(d) => return d.clone(),
                TreeNode::Split {
                    test,
                    on_true,
                    on_false,
                } => {
                    node = if a.value(test.var) == test.val {
                        on_true
                    } else {
                        on_false
                    };
                }
            }
        }
    }

    /// One weighted conjunctive feature per (leaf, target value), with weight
    /// `ln P(value | leaf)`. Path conjunctions use equality tests only: a
    /// false branch contributes the complementary test for binary variables
    /// and is expanded per remaining value for wider ones, so leaf regions
    /// never overlap and the induced conditionals reproduce
    /// [`TreeCpd::predict`] exactly.
    pub fn to_features(&self, schema: &Schema) -> Vec<WeightedFeature> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect_features(schema, &self.root, &mut path, &mut out);
        out
    }

    fn collect_features(
        &self,
        schema: &Schema,
        node: &TreeNode,
        path: &mut Vec<VariableTest>,
        out: &mut Vec<WeightedFeature>,
    ) {
        match node {
            TreeNode::Leaf(dist) => {
                for (val, &p) in dist.probs().iter().enumerate() {
                    let mut tests = path.clone();
                    tests.push(VariableTest::new(self.target, val));
                    match canonicalize_feature(schema, &tests).expect("tree tests validated") {
                        Canonical::Feature(f) => out.push(WeightedFeature::new(p.ln(), f)),
                        // Contradictory path values: the leaf region is
                        // unreachable for this expansion and emits nothing.
                        Canonical::AlwaysFalse => {}
                        Canonical::AlwaysTrue => unreachable!("target test is always present"),
                    }
                }
            }
            TreeNode::Split {
                test,
                on_true,
                on_false,
            } => {
                path.push(*test);
                self.collect_features(schema, on_true, path, out);
                path.pop();
                let arity = schema.arity(test.var);
                if arity == 2 {
                    path.push(VariableTest::new(test.var, 1 - test.val));
                    self.collect_features(schema, on_false, path, out);
                    path.pop();
                } else {
                    // Tabular expansion of the split variable: one copy of the
                    // false subtree per remaining value.
                    for val in (0..arity).filter(|&v| v != test.val) {
                        path.push(VariableTest::new(test.var, val));
                        self.collect_features(schema, on_false, path, out);
                        path.pop();
                    }
                }
            }
        }
    }
}

fn validate_node(
    node: &TreeNode,
    target: usize,
    schema: &Schema,
    path: &mut Vec<VariableTest>,
) -> Result<()> {
    match node {
        TreeNode::Leaf(dist) => {
            if dist.len() != schema.arity(target) {
                return Err(Error::InvalidModel(format!(
                    "leaf has {} entries for target arity {}",
                    dist.len(),
                    schema.arity(target)
                )));
            }
            if dist.probs().iter().any(|&p| p <= 0.0) {
                return Err(Error::NonPositive(
                    "tree leaf has a zero probability".into(),
                ));
            }
            Ok(())
        }
        TreeNode::Split {
            test,
            on_true,
            on_false,
        } => {
            if test.var == target {
                return Err(Error::InvalidModel(format!(
                    "tree for {target} tests its own target"
                )));
            }
            if test.var >= schema.len() || test.val >= schema.arity(test.var) {
                return Err(Error::SchemaViolation(format!(
                    "bad test {}={}",
                    test.var, test.val
                )));
            }
            if path.contains(test) {
                return Err(Error::InvalidModel(format!(
                    "test {}={} repeats on a root-to-leaf path",
                    test.var, test.val
                )));
            }
            path.push(*test);
            validate_node(on_true, target, schema, path)?;
            validate_node(on_false, target, schema, path)?;
            path.pop();
            Ok(())
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A logistic-regression CPD for a binary target over binary inputs:
/// `P(target = 1 | a) = sigmoid(bias + Σ_j w_j [a_j = 1])`. Weights are
/// sparse; exact zeros are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LrCpd {
    target: usize,
    bias: f64,
    weights: BTreeMap<usize, f64>,
}

impl LrCpd {
    pub fn new(
        target: usize,
        bias: f64,
        weights: BTreeMap<usize, f64>,
        schema: &Schema,
    ) -> Result<Self> {
        if target >= schema.len() {
            return Err(Error::SchemaViolation(format!(
                "target {target} out of range"
            )));
        }
        if schema.arity(target) != 2 {
            return Err(Error::UnsupportedSchema(format!(
                "logistic CPD requires a binary target, arity is {}",
                schema.arity(target)
            )));
        }
        if !bias.is_finite() {
            return Err(Error::InvalidModel(format!("non-finite bias {bias}")));
        }
        for (&var, &w) in &weights {
            if var >= schema.len() {
                return Err(Error::SchemaViolation(format!("input {var} out of range")));
            }
            if var == target {
                return Err(Error::InvalidModel(format!(
                    "self-weight on target {target}"
                )));
            }
            if schema.arity(var) != 2 {
                return Err(Error::UnsupportedSchema(format!(
                    "logistic CPD requires binary inputs, variable {var} has arity {}",
                    schema.arity(var)
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "non-finite weight {w} on input {var}"
                )));
            }
        }
        let weights = weights.into_iter().filter(|&(_, w)| w != 0.0).collect();
        Ok(LrCpd {
            target,
            bias,
            weights,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn weights(&self) -> &BTreeMap<usize, f64> {
        &self.weights
    }

    pub fn predict(&self, a: &Assignment) -> Distribution {
        let z = self.bias
            + self
                .weights
                .iter()
                .filter(|&(&var, _)| a.value(var) == 1)
                .map(|(_, &w)| w)
                .sum::<f64>();
        let p1 = sigmoid(z);
        Distribution::new(vec![1.0 - p1, p1]).expect("sigmoid output is a probability")
    }

    /// The feature `[target=1]` with the bias weight, plus `[X_j=1, target=1]`
    /// for every nonzero input weight. Exactly reproduces the logistic
    /// conditional once normalized over the target.
    pub fn to_features(&self, _schema: &Schema) -> Vec<WeightedFeature> {
        let mut out = vec![WeightedFeature::new(
            self.bias,
            ConjunctiveFeature::from_sorted_tests(vec![VariableTest::new(self.target, 1)]),
        )];
        for (&var, &w) in &self.weights {
            let mut tests = vec![VariableTest::new(var, 1), VariableTest::new(self.target, 1)];
            tests.sort_unstable();
            out.push(WeightedFeature::new(
                w,
                ConjunctiveFeature::from_sorted_tests(tests),
            ));
        }
        out
    }
}

/// One CPD of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Cpd {
    Tree(TreeCpd),
    Lr(LrCpd),
}

impl Cpd {
    pub fn target(&self) -> usize {
        match self {
            Cpd::Tree(t) => t.target(),
            Cpd::Lr(l) => l.target(),
        }
    }

    pub fn predict(&self, a: &Assignment) -> Distribution {
        match self {
            Cpd::Tree(t) => t.predict(a),
            Cpd::Lr(l) => l.predict(a),
        }
    }

    pub fn to_features(&self, schema: &Schema) -> Vec<WeightedFeature> {
        match self {
            Cpd::Tree(t) => t.to_features(schema),
            Cpd::Lr(l) => l.to_features(schema),
        }
    }
}

/// One strictly positive CPD per variable; `cpds[i]` targets variable `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyNetwork {
    schema: Schema,
    cpds: Vec<Cpd>,
}

impl DependencyNetwork {
    pub fn new(schema: Schema, cpds: Vec<Cpd>) -> Result<Self> {
        if cpds.len() != schema.len() {
            return Err(Error::InvalidModel(format!(
                "{} CPDs for {} variables",
                cpds.len(),
                schema.len()
            )));
        }
        for (i, cpd) in cpds.iter().enumerate() {
            if cpd.target() != i {
                return Err(Error::InvalidModel(format!(
                    "CPD in slot {i} targets variable {}",
                    cpd.target()
                )));
            }
        }
        Ok(DependencyNetwork { schema, cpds })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn cpds(&self) -> &[Cpd] {
        &self.cpds
    }

    pub fn predict(&self, var: usize, a: &Assignment) -> Distribution {
        self.cpds[var].predict(a)
    }
}

impl ConditionalModel for DependencyNetwork {
    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn full_conditional(&self, var: usize, a: &Assignment) -> Distribution {
        self.cpds[var].predict(a)
    }
}

fn add_one_distribution(counts: &[usize]) -> Distribution {
    let total: usize = counts.iter().sum();
    let denom = (total + counts.len()) as f64;
    Distribution::normalized(counts.iter().map(|&c| (c + 1) as f64 / denom).collect())
        .expect("add-one counts are positive")
}

/// Conditional log-likelihood of the target over `rows`, with the leaf
/// distribution estimated by add-one smoothing from the same counts.
fn smoothed_leaf_ll(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let denom = (total + counts.len()) as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 * ((c + 1) as f64 / denom).ln())
        .sum()
}

/// Greedy top-down decision-tree learning for `P(target | rest)`.
///
/// Each candidate split `(var, val)` is scored by the change in smoothed
/// conditional log-likelihood plus the structure penalty
/// `(arity_target - 1) * ln(kappa)` for the extra leaf; the best strictly
/// positive candidate is applied and learning recurses. Candidates that
/// leave either child empty are skipped; ties go to the lowest (var, val).
pub fn learn_tree_cpd(data: &Dataset, target: usize, kappa: f64) -> Result<TreeCpd> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schema = data.schema();
    if target >= schema.len() {
        return Err(Error::SchemaViolation(format!(
            "target {target} out of range"
        )));
    }
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::InvalidModel(format!("kappa {kappa} outside (0, 1]")));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let root = grow_tree(data, target, kappa.ln(), rows);
    TreeCpd::new(target, root, schema)
}

fn grow_tree(data: &Dataset, target: usize, ln_kappa: f64, rows: Vec<usize>) -> TreeNode {
    let schema = data.schema();
    let arity_t = schema.arity(target);
    let mut counts = vec![0usize; arity_t];
    for &r in &rows {
        counts[data.rows()[r].value(target)] += 1;
    }
    let base_ll = smoothed_leaf_ll(&counts);
    let penalty = (arity_t - 1) as f64 * ln_kappa;

    let mut best: Option<(VariableTest, f64)> = None;
    for var in (0..schema.len()).filter(|&v| v != target) {
        let mut joint = vec![vec![0usize; arity_t]; schema.arity(var)];
        for &r in &rows {
            let row = &data.rows()[r];
            joint[row.value(var)][row.value(target)] += 1;
        }
        for (val, true_counts) in joint.iter().enumerate() {
            let n_true: usize = true_counts.iter().sum();
            if n_true == 0 || n_true == rows.len() {
                continue; // a split must give both children support
            }
            let false_counts: Vec<usize> = counts
                .iter()
                .zip(true_counts)
                .map(|(&c, &t)| c - t)
                .collect();
            let gain =
                smoothed_leaf_ll(true_counts) + smoothed_leaf_ll(&false_counts) - base_ll + penalty;
            if best.as_ref().is_none_or(|&(_, g)| gain > g) {
                best = Some((VariableTest::new(var, val), gain));
            }
        }
    }

    match best {
        Some((test, gain)) if gain > 0.0 => {
            let (true_rows, false_rows): (Vec<usize>, Vec<usize>) = rows
                .into_iter()
                .partition(|&r| data.rows()[r].value(test.var) == test.val);
            TreeNode::Split {
                test,
                on_true: Box::new(grow_tree(data, target, ln_kappa, true_rows)),
                on_false: Box::new(grow_tree(data, target, ln_kappa, false_rows)),
            }
        }
        _ => TreeNode::Leaf(add_one_distribution(&counts)),
    }
}

/// Tolerance on the subgradient optimality conditions at the returned point.
const LR_KKT_TOL: f64 = 1e-5;
const LR_MAX_SWEEPS: usize = 1000;

/// L1-regularized logistic regression for a binary target over binary inputs,
/// minimizing `NLL(bias, w) + lambda * Σ|w_j|` with the bias unpenalized.
///
/// Solved by cyclic proximal coordinate descent: each coordinate takes a
/// soft-thresholded step against the curvature bound `(#active rows)/4`,
/// which majorizes the logistic loss, so the objective never increases.
/// Stops when the largest subgradient violation falls below 1e-5 or after
/// 1000 sweeps. Coordinates whose gradient magnitude at zero stays below
/// `lambda` remain exactly zero.
pub fn learn_lr_cpd(data: &Dataset, target: usize, lambda: f64) -> Result<LrCpd> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schema = data.schema();
    if target >= schema.len() {
        return Err(Error::SchemaViolation(format!(
            "target {target} out of range"
        )));
    }
    if let Some(var) = (0..schema.len()).find(|&v| schema.arity(v) != 2) {
        return Err(Error::UnsupportedSchema(format!(
            "logistic CPDs need a fully binary schema; variable {var} has arity {}",
            schema.arity(var)
        )));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidModel(format!(
            "lambda {lambda} must be finite and >= 0"
        )));
    }

    let n = schema.len();
    let m = data.len();
    let y: Vec<f64> = data.rows().iter().map(|r| r.value(target) as f64).collect();
    // Rows where each input is 1; the data is binary so these index lists
    // carry all the information a coordinate step needs.
    let mut cols: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (i, row) in data.rows().iter().enumerate() {
        for (var, col) in cols.iter_mut().enumerate() {
            if var != target && row.value(var) == 1 {
                col.push(i as u32);
            }
        }
    }

    let mut bias = 0.0;
    let mut w = vec![0.0f64; n];
    let mut z = vec![0.0f64; m]; // linear predictor per row
    let h_bias = m as f64 / 4.0;

    let soft = |t: f64, l: f64| -> f64 {
        if t > l {
            t - l
        } else if t < -l {
            t + l
        } else {
            0.0
        }
    };

    for _ in 0..LR_MAX_SWEEPS {
        let g_bias: f64 = z.iter().zip(&y).map(|(&zi, &yi)| sigmoid(zi) - yi).sum();
        let step = -g_bias / h_bias;
        if step != 0.0 {
            bias += step;
            for zi in &mut z {
                *zi += step;
            }
        }
        for var in (0..n).filter(|&v| v != target) {
            let col = &cols[var];
            if col.is_empty() {
                continue;
            }
            let h = col.len() as f64 / 4.0;
            let g: f64 = col
                .iter()
                .map(|&i| sigmoid(z[i as usize]) - y[i as usize])
                .sum();
            let w_new = soft(h * w[var] - g, lambda) / h;
            let delta = w_new - w[var];
            if delta != 0.0 {
                w[var] = w_new;
                for &i in col {
                    z[i as usize] += delta;
                }
            }
        }

        // Subgradient optimality check at the current point.
        let mut viol: f64 = z
            .iter()
            .zip(&y)
            .map(|(&zi, &yi)| sigmoid(zi) - yi)
            .sum::<f64>()
            .abs();
        for var in (0..n).filter(|&v| v != target) {
            let g: f64 = cols[var]
                .iter()
                .map(|&i| sigmoid(z[i as usize]) - y[i as usize])
                .sum();
            let v = if w[var] > 0.0 {
                (g + lambda).abs()
            } else if w[var] < 0.0 {
                (g - lambda).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            viol = viol.max(v);
        }
        if viol < LR_KKT_TOL {
            break;
        }
    }

    let weights: BTreeMap<usize, f64> = (0..n)
        .filter(|&v| v != target && w[v] != 0.0)
        .map(|v| (v, w[v]))
        .collect();
    LrCpd::new(target, bias, weights, schema)
}

/// `Σ_rows Σ_i ln P_i(x_i | x_{-i})` under the DN's own CPDs; the score used
/// for hyperparameter selection on held-out data.
pub fn dn_validation_score(dn: &DependencyNetwork, data: &Dataset) -> f64 {
    crate::model::conditional_log_likelihood(dn, data.rows())
}

/// How a tuning grid is swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepRule {
    /// Walk the grid in order, stop at the first drop in validation score,
    /// keep the best seen (the tree-prior protocol).
    AscendEarlyStop,
    /// Evaluate the whole grid; best score wins, ties go to the larger value
    /// (the stronger regularizer on an ascending penalty grid).
    BestOfGrid,
}

pub struct TunedDn {
    pub value: f64,
    pub tune_score: f64,
    pub dn: DependencyNetwork,
}

/// Runs `learn` at each grid value and selects by validation score on `tune`.
pub fn tune_hyperparameter<F>(
    learn: F,
    grid: &[f64],
    rule: SweepRule,
    tune: &Dataset,
) -> Result<TunedDn>
where
    F: Fn(f64) -> Result<DependencyNetwork>,
{
    if grid.is_empty() {
        return Err(Error::InvalidModel("empty hyperparameter grid".into()));
    }
    let mut best: Option<TunedDn> = None;
    for &value in grid {
        let dn = learn(value)?;
        let tune_score = dn_validation_score(&dn, tune);
        match (&best, rule) {
            (Some(b), SweepRule::AscendEarlyStop) if tune_score < b.tune_score => break,
            (Some(b), SweepRule::BestOfGrid)
                if !(tune_score > b.tune_score
                    || (tune_score == b.tune_score && value > b.value)) => {}
            _ => {
                best = Some(TunedDn {
                    value,
                    tune_score,
                    dn,
                })
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Learns one tree CPD per variable; targets are independent and run in
/// parallel over the shared dataset.
pub fn learn_dn_tree(data: &Dataset, kappa: f64) -> Result<DependencyNetwork> {
    let n = data.schema().len();
    let cpds: Result<Vec<Cpd>> = (0..n)
        .into_par_iter()
        .map(|t| learn_tree_cpd(data, t, kappa).map(Cpd::Tree))
        .collect();
    DependencyNetwork::new(data.schema().clone(), cpds?)
}

/// Learns one logistic-regression CPD per variable, in parallel.
pub fn learn_dn_lr(data: &Dataset, lambda: f64) -> Result<DependencyNetwork> {
    let n = data.schema().len();
    let cpds: Result<Vec<Cpd>> = (0..n)
        .into_par_iter()
        .map(|t| learn_lr_cpd(data, t, lambda).map(Cpd::Lr))
        .collect();
    DependencyNetwork::new(data.schema().clone(), cpds?)
}

/// Largest tabular CPD (leaf count) `dn_from_mn_exact` will build.
const MAX_TABULAR_LEAVES: u64 = 1 << 12;

/// The exact dependency network of a Markov network: for each variable, a
/// complete tabular tree over its Markov blanket whose leaves hold the MN's
/// exact full conditionals. The resulting DN is consistent by construction.
pub fn dn_from_mn_exact(m: &MarkovNetwork) -> Result<DependencyNetwork> {
    let schema = m.schema();
    let mut cpds = Vec::with_capacity(schema.len());
    for target in 0..schema.len() {
        let mb: Vec<usize> = m.markov_blanket(target).into_iter().collect();
        let leaves: u64 = mb.iter().map(|&v| schema.arity(v) as u64).product();
        if leaves > MAX_TABULAR_LEAVES {
            return Err(Error::StateSpaceTooLarge {
                states: leaves as u128,
                limit: MAX_TABULAR_LEAVES,
            });
        }
        let mut ctx = Assignment::zeros(schema);
        let root = tabular_subtree(m, target, &mb, &mut ctx);
        cpds.push(Cpd::Tree(TreeCpd::new(target, root, schema)?));
    }
    DependencyNetwork::new(schema.clone(), cpds)
}

fn tabular_subtree(
    m: &MarkovNetwork,
    target: usize,
    mb: &[usize],
    ctx: &mut Assignment,
) -> TreeNode {
    match mb.split_first() {
        None => TreeNode::Leaf(m.conditional_distribution(target, ctx)),
        Some((&var, rest)) => value_chain(m, target, var, 0, rest, ctx),
    }
}

/// Splits on `var = val`; the false branch continues to the next value so the
/// chain enumerates the variable's values with equality tests only.
fn value_chain(
    m: &MarkovNetwork,
    target: usize,
    var: usize,
    val: usize,
    rest: &[usize],
    ctx: &mut Assignment,
) -> TreeNode {
    let arity = m.schema().arity(var);
    ctx.set(var, val);
    if val == arity - 1 {
        return tabular_subtree(m, target, rest, ctx);
    }
    let on_true = Box::new(tabular_subtree(m, target, rest, ctx));
    let on_false = Box::new(value_chain(m, target, var, val + 1, rest, ctx));
    TreeNode::Split {
        test: VariableTest::new(var, val),
        on_true,
        on_false,
    }
}
