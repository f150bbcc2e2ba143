//! Core representations: discrete variable schemas, complete assignments,
//! weighted conjunctive features, and log-linear Markov networks, together
//! with the exact small-scale evaluation primitives (joint enumeration,
//! full conditionals) that the rest of the crate uses as oracles.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hard cap on the number of states [`MarkovNetwork::enumerate_joint`] will touch.
pub const ENUMERATION_LIMIT: u64 = 1 << 22;

/// Merged features with |weight| below this are dropped; they shift the joint
/// by less than 1e-9 in log space at the model sizes this crate targets.
pub const MERGE_DROP_EPS: f64 = 1e-12;

/// Arities of the domain's variables. Every variable is discrete with at
/// least two values; values are 0-indexed (for binary variables 0 = false,
/// 1 = true).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    arities: Vec<usize>,
}

impl Schema {
    pub fn new(arities: Vec<usize>) -> Result<Self> {
        if arities.is_empty() {
            return Err(Error::SchemaViolation(
                "schema must have at least one variable".into(),
            ));
        }
        if let Some(a) = arities.iter().find(|&&a| a < 2) {
            return Err(Error::SchemaViolation(format!("arity {a} < 2")));
        }
        Ok(Schema { arities })
    }

    pub fn binary(n: usize) -> Result<Self> {
        Schema::new(vec![2; n])
    }

    pub fn len(&self) -> usize {
        self.arities.len()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn arity(&self, var: usize) -> usize {
        self.arities[var]
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    /// Total number of complete assignments, or `None` on overflow.
    pub fn state_count(&self) -> Option<u64> {
        self.arities
            .iter()
            .try_fold(1u64, |acc, &a| acc.checked_mul(a as u64))
    }

    /// Lexicographic index of an assignment, variable 0 most significant.
    pub fn assignment_index(&self, a: &Assignment) -> usize {
        debug_assert_eq!(a.len(), self.len());
        let mut idx = 0usize;
        for (v, &arity) in a.values().iter().zip(&self.arities) {
            idx = idx * arity + v;
        }
        idx
    }

    /// Inverse of [`Schema::assignment_index`].
    pub fn assignment_from_index(&self, mut idx: usize) -> Assignment {
        let mut values = vec![0usize; self.len()];
        for i in (0..self.len()).rev() {
            let a = self.arities[i];
            values[i] = idx % a;
            idx /= a;
        }
        Assignment { values }
    }

    fn check_test(&self, t: &VariableTest) -> Result<()> {
        if t.var >= self.len() {
            return Err(Error::SchemaViolation(format!(
                "variable index {} out of range for {} variables",
                t.var,
                self.len()
            )));
        }
        if t.val >= self.arity(t.var) {
            return Err(Error::SchemaViolation(format!(
                "value {} out of range for variable {} with arity {}",
                t.val,
                t.var,
                self.arity(t.var)
            )));
        }
        Ok(())
    }
}

/// A complete value vector over the domain's variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    values: Vec<usize>,
}

impl Assignment {
    pub fn new(values: Vec<usize>, schema: &Schema) -> Result<Self> {
        if values.len() != schema.len() {
            return Err(Error::SchemaViolation(format!(
                "assignment has {} values, schema has {} variables",
                values.len(),
                schema.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if v >= schema.arity(i) {
                return Err(Error::SchemaViolation(format!(
                    "value {v} out of range for variable {i} with arity {}",
                    schema.arity(i)
                )));
            }
        }
        Ok(Assignment { values })
    }

    pub fn zeros(schema: &Schema) -> Self {
        Assignment {
            values: vec![0; schema.len()],
        }
    }

    pub fn value(&self, var: usize) -> usize {
        self.values[var]
    }

    pub fn set(&mut self, var: usize, val: usize) {
        self.values[var] = val;
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<usize>> for Assignment {
    fn from(values: Vec<usize>) -> Self {
        Assignment { values }
    }
}

/// A single equality test `X_var = val`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableTest {
    pub var: usize,
    pub val: usize,
}

impl VariableTest {
    pub fn new(var: usize, val: usize) -> Self {
        VariableTest { var, val }
    }
}

/// A conjunction of variable tests in canonical form: sorted by variable
/// index, at most one test per variable, never empty. Build through
/// [`canonicalize_feature`] unless the tests are canonical by construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConjunctiveFeature {
    tests: Vec<VariableTest>,
}

/// Outcome of canonicalizing a raw test list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Canonical {
    Feature(ConjunctiveFeature),
    /// Empty conjunction; satisfied by every assignment.
    AlwaysTrue,
    /// Two different values required for one variable; never satisfied.
    AlwaysFalse,
}

/// Sorts tests by variable, merges duplicate identical tests, and classifies
/// degenerate results: an empty list is `AlwaysTrue`, two different-valued
/// tests on one variable make the conjunction `AlwaysFalse`.
pub fn canonicalize_feature(schema: &Schema, tests: &[VariableTest]) -> Result<Canonical> {
    for t in tests {
        schema.check_test(t)?;
    }
    let mut sorted: Vec<VariableTest> = tests.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for pair in sorted.windows(2) {
        if pair[0].var == pair[1].var {
            return Ok(Canonical::AlwaysFalse);
        }
    }
    if sorted.is_empty() {
        return Ok(Canonical::AlwaysTrue);
    }
    Ok(Canonical::Feature(ConjunctiveFeature { tests: sorted }))
}

impl ConjunctiveFeature {
    /// Builds from tests already in canonical form (sorted, unique variables,
    /// non-empty). Used on subsets of canonical features, which stay canonical.
    pub(crate) fn from_sorted_tests(tests: Vec<VariableTest>) -> Self {
        debug_assert!(!tests.is_empty());
        debug_assert!(tests.windows(2).all(|p| p[0].var < p[1].var));
        ConjunctiveFeature { tests }
    }

    pub fn tests(&self) -> &[VariableTest] {
        &self.tests
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        false // canonical features are non-empty
    }

    /// The value this feature tests `var` against, if any.
    pub fn test_on(&self, var: usize) -> Option<usize> {
        self.tests
            .binary_search_by_key(&var, |t| t.var)
            .ok()
            .map(|i| self.tests[i].val)
    }

    /// 1 iff every test is satisfied by `a` (returned as bool).
    pub fn evaluate(&self, a: &Assignment) -> bool {
        self.tests.iter().all(|t| a.value(t.var) == t.val)
    }

    /// Evaluates with the value of `var` overridden by `val`.
    pub fn evaluate_with(&self, a: &Assignment, var: usize, val: usize) -> bool {
        self.tests.iter().all(|t| {
            let actual = if t.var == var { val } else { a.value(t.var) };
            actual == t.val
        })
    }
}

/// A conjunctive feature with a real log-space weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFeature {
    pub weight: f64,
    pub feature: ConjunctiveFeature,
}

impl WeightedFeature {
    pub fn new(weight: f64, feature: ConjunctiveFeature) -> Self {
        WeightedFeature { weight, feature }
    }
}

/// A probability vector over an explicit finite outcome space.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidModel(
                "distribution has a negative or non-finite entry".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(Distribution { probs })
    }

    /// Normalizes non-negative weights. Errors if all weights are zero.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::InvalidModel(format!(
                "cannot normalize weights summing to {sum}"
            )));
        }
        Ok(Distribution {
            probs: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    pub fn uniform(k: usize) -> Self {
        Distribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Inverse-CDF sample.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// A log-linear Markov network: `P(x) ∝ exp(Σ_k w_k f_k(x))`. The partition
/// function is implicit; it is only ever materialized by
/// [`MarkovNetwork::enumerate_joint`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovNetwork {
    schema: Schema,
    features: Vec<WeightedFeature>,
}

impl MarkovNetwork {
    /// Validates that all tests fit the schema, all weights are finite, and
    /// every feature is canonical.
    pub fn new(schema: Schema, features: Vec<WeightedFeature>) -> Result<Self> {
        for wf in &features {
            if !wf.weight.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "non-finite feature weight {}",
                    wf.weight
                )));
            }
            for t in wf.feature.tests() {
                schema.check_test(t)?;
            }
            if !wf.feature.tests().windows(2).all(|p| p[0].var < p[1].var) {
                return Err(Error::InvalidModel(
                    "feature tests not in canonical order".into(),
                ));
            }
        }
        Ok(MarkovNetwork { schema, features })
    }

    pub fn empty(schema: Schema) -> Self {
        MarkovNetwork {
            schema,
            features: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn features(&self) -> &[WeightedFeature] {
        &self.features
    }

    /// `Σ_k w_k f_k(a)`; the log probability of `a` up to `-log Z`.
    pub fn unnormalized_log_score(&self, a: &Assignment) -> f64 {
        self.features
            .iter()
            .filter(|wf| wf.feature.evaluate(a))
            .map(|wf| wf.weight)
            .sum()
    }

    /// Exact normalized joint over all assignments in lexicographic order
    /// (variable 0 most significant). Guarded by [`ENUMERATION_LIMIT`].
    pub fn enumerate_joint(&self) -> Result<Distribution> {
        let states = self
            .schema
            .state_count()
            .filter(|&s| s <= ENUMERATION_LIMIT)
            .ok_or_else(|| Error::StateSpaceTooLarge {
                states: self
                    .schema
                    .arities()
                    .iter()
                    .fold(1u128, |acc, &a| acc.saturating_mul(a as u128)),
                limit: ENUMERATION_LIMIT,
            })? as usize;

        let mut scores = Vec::with_capacity(states);
        let mut a = Assignment {
            values: vec![0; self.schema.len()],
        };
        loop {
            scores.push(self.unnormalized_log_score(&a));
            if !next_assignment(&mut a, &self.schema) {
                break;
            }
        }
        debug_assert_eq!(scores.len(), states);
        // Max-shift before exponentiation to avoid overflow for large |w|.
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        Distribution::normalized(weights)
    }

    /// `P(X_var = v | a_{-var})` for each value `v`, computed from the
    /// features whose scope includes `var` (Markov-blanket locality). The
    /// value of `var` in `a` is ignored.
    pub fn conditional_distribution(&self, var: usize, a: &Assignment) -> Distribution {
        let arity = self.schema.arity(var);
        let mut scores = vec![0.0; arity];
        for wf in &self.features {
            let Some(val) = wf.feature.test_on(var) else {
                continue;
            };
            if wf.feature.evaluate_with(a, var, val) {
                scores[val] += wf.weight;
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        Distribution::normalized(weights).expect("conditional weights contain a 1.0 entry")
    }

    /// Variables co-scoped with `var` in some feature, excluding `var`.
    pub fn markov_blanket(&self, var: usize) -> BTreeSet<usize> {
        assert!(var < self.schema.len(), "variable index out of range");
        let mut mb = BTreeSet::new();
        for wf in &self.features {
            if wf.feature.test_on(var).is_some() {
                for t in wf.feature.tests() {
                    if t.var != var {
                        mb.insert(t.var);
                    }
                }
            }
        }
        mb
    }

    /// Collapses features with identical canonical form by summing their
    /// weights; results with |weight| < [`MERGE_DROP_EPS`] are dropped. The
    /// represented distribution is unchanged. Contributions to each feature
    /// are summed in a fixed total order, so the result does not depend on
    /// the input feature order.
    pub fn merge_features(&self) -> MarkovNetwork {
        let mut groups: std::collections::BTreeMap<&ConjunctiveFeature, Vec<f64>> =
            std::collections::BTreeMap::new();
        for wf in &self.features {
            groups.entry(&wf.feature).or_default().push(wf.weight);
        }
        let mut features = Vec::with_capacity(groups.len());
        for (feature, mut weights) in groups {
            weights.sort_unstable_by(f64::total_cmp);
            let weight: f64 = weights.iter().sum();
            if weight.abs() >= MERGE_DROP_EPS {
                features.push(WeightedFeature::new(weight, feature.clone()));
            }
        }
        MarkovNetwork {
            schema: self.schema.clone(),
            features,
        }
    }

    /// Draws `count` independent assignments from the exact joint; intended
    /// for small models (same guard as [`MarkovNetwork::enumerate_joint`]).
    pub fn sample_exact(&self, count: usize, seed: u64) -> Result<Vec<Assignment>> {
        let joint = self.enumerate_joint()?;
        let mut cdf = Vec::with_capacity(joint.len());
        let mut acc = 0.0;
        for &p in joint.probs() {
            acc += p;
            cdf.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..count)
            .map(|_| {
                let u: f64 = rng.gen();
                let idx = cdf.partition_point(|&c| c <= u).min(joint.len() - 1);
                self.schema.assignment_from_index(idx)
            })
            .collect();
        Ok(rows)
    }
}

/// Advances `a` to the next assignment in lexicographic order; false at the end.
fn next_assignment(a: &mut Assignment, schema: &Schema) -> bool {
    for i in (0..schema.len()).rev() {
        if a.values[i] + 1 < schema.arity(i) {
            a.values[i] += 1;
            return true;
        }
        a.values[i] = 0;
    }
    false
}

/// Anything that can answer `P(X_i = v | x_{-i})` for every variable: Markov
/// networks via feature sums, dependency networks via their CPDs. Gibbs
/// sampling and the evaluation metrics are defined against this interface.
pub trait ConditionalModel {
    fn schema(&self) -> &Schema;

    /// Full conditional of `var` given the rest of `a` (its own value ignored).
    fn full_conditional(&self, var: usize, a: &Assignment) -> Distribution;
}

impl ConditionalModel for MarkovNetwork {
    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn full_conditional(&self, var: usize, a: &Assignment) -> Distribution {
        self.conditional_distribution(var, a)
    }
}

/// `Σ_rows Σ_i ln P(x_i | x_{-i})` under `m`.
pub fn conditional_log_likelihood<M: ConditionalModel>(m: &M, rows: &[Assignment]) -> f64 {
    let n = m.schema().len();
    rows.iter()
        .map(|row| {
            (0..n)
                .map(|i| m.full_conditional(i, row).get(row.value(i)).ln())
                .sum::<f64>()
        })
        .sum()
}
