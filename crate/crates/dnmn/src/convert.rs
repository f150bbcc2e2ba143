//! Closed-form conversion of a dependency network into a log-linear Markov
//! network.
//!
//! The basic conversion anchors a telescoping product of per-variable
//! conditional ratios at a base instance `x'` under a variable ordering `o`:
//! each CPD becomes weighted conjunctive features, and every feature is
//! simplified twice, once for the numerator `P(x_i | ...)` and once with
//! negated weight for the denominator `P(x'_i | ...)`. Tests on variables
//! that come before the target in `o` are fixed to `x'`: a disagreeing test
//! drops the feature, an agreeing one is removed.
//!
//! For inconsistent DNs the result depends on `x'` and `o`, so two averaging
//! mechanisms are provided and compose freely:
//!
//! - base-instance expectation: instead of checking a removed test against
//!   one `x'`, multiply the feature's weight by the marginal probability of
//!   the tested value, which averages (geometric mean) over all base
//!   instances weighted by a product-of-marginals distribution;
//! - ordering averaging: pool conversions under the rotations of one or two
//!   base orderings (linear growth, one subfeature per group of rotations),
//!   or under all orderings of each feature's tests (exponential, bounded by
//!   a configured maximum feature length).

use std::collections::BTreeMap;

use crate::cpd::DependencyNetwork;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{
    Assignment, ConjunctiveFeature, Distribution, MarkovNetwork, Schema, WeightedFeature,
};

/// Longest feature (test count) expanded by the all-orderings mode.
pub const DEFAULT_MAX_FEATURE_LEN: usize = 12;

/// A permutation of the variables together with its inverse; `position(v)`
/// is the index of variable `v` in the ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableOrder {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl VariableOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (pos, &var) in order.iter().enumerate() {
            if var >= n || inverse[var] != usize::MAX {
                return Err(Error::InvalidModel(format!(
                    "{order:?} is not a permutation"
                )));
            }
            inverse[var] = pos;
        }
        Ok(VariableOrder { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        VariableOrder {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn reversed(&self) -> Self {
        let order: Vec<usize> = self.order.iter().rev().copied().collect();
        VariableOrder::new(order).expect("reversal preserves permutations")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Index of `var` in the ordering (the inverse permutation).
    pub fn position(&self, var: usize) -> usize {
        self.inverse[var]
    }
}

/// Strictly positive per-variable marginal distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    dists: Vec<Distribution>,
}

impl Marginals {
    pub fn new(schema: &Schema, dists: Vec<Distribution>) -> Result<Self> {
        if dists.len() != schema.len() {
            return Err(Error::InvalidModel(format!(
                "{} marginals for {} variables",
                dists.len(),
                schema.len()
            )));
        }
        for (var, d) in dists.iter().enumerate() {
            if d.len() != schema.arity(var) {
                return Err(Error::InvalidModel(format!(
                    "marginal for variable {var} has {} entries, arity is {}",
                    d.len(),
                    schema.arity(var)
                )));
            }
            if d.probs().iter().any(|&p| p <= 0.0) {
                return Err(Error::NonPositive(format!(
                    "marginal for variable {var} has a zero"
                )));
            }
        }
        Ok(Marginals { dists })
    }

    pub fn uniform(schema: &Schema) -> Self {
        Marginals {
            dists: (0..schema.len())
                .map(|v| Distribution::uniform(schema.arity(v)))
                .collect(),
        }
    }

    pub fn prob(&self, var: usize, val: usize) -> f64 {
        self.dists[var].get(val)
    }

    pub fn dists(&self) -> &[Distribution] {
        &self.dists
    }
}

/// Add-one-smoothed empirical marginals: `q_j(v) = (count + 1) / (m + arity_j)`.
pub fn estimate_marginals(data: &Dataset) -> Result<Marginals> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schema = data.schema();
    let mut dists = Vec::with_capacity(schema.len());
    for var in 0..schema.len() {
        let mut counts = vec![0usize; schema.arity(var)];
        for row in data.rows() {
            counts[row.value(var)] += 1;
        }
        let denom = (data.len() + schema.arity(var)) as f64;
        let probs: Vec<f64> = counts.iter().map(|&c| (c + 1) as f64 / denom).collect();
        dists.push(Distribution::normalized(probs).expect("add-one counts are positive"));
    }
    Marginals::new(schema, dists)
}

/// How the base instance is treated during simplification.
#[derive(Debug, Clone)]
pub enum BaseMode {
    /// Check removed tests against one fixed base instance.
    Single(Assignment),
    /// Weight removed tests by their marginal probability, averaging over all
    /// base instances under a product-of-marginals distribution.
    Expectation(Marginals),
}

/// Which orderings the conversion averages over.
#[derive(Debug, Clone)]
pub enum OrderMode {
    Single(VariableOrder),
    /// The given ordering and its reverse, weighted half each.
    OppositePair(VariableOrder),
    /// All n cyclic rotations of the given ordering.
    Rotations(VariableOrder),
    /// All 2n rotations of the given ordering and its reverse.
    RotationsPair(VariableOrder),
    /// All orderings of each feature's own tests; exponential in feature
    /// length, guarded by `max_feature_len`.
    AllOrderings,
}

#[derive(Debug, Clone)]
pub struct ConversionConfig {
    pub base: BaseMode,
    pub order: OrderMode,
    pub max_feature_len: usize,
}

impl ConversionConfig {
    pub fn new(base: BaseMode, order: OrderMode) -> Self {
        ConversionConfig {
            base,
            order,
            max_feature_len: DEFAULT_MAX_FEATURE_LEN,
        }
    }
}

/// Result of simplifying one feature against a single base instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Simplified {
    Feature(ConjunctiveFeature),
    /// All tests removed; a constant absorbed by the partition function.
    AlwaysTrue,
    /// A removed test disagreed with the base instance; the feature is zero.
    Dropped,
}

/// Simplifies a feature of the CPD for variable `target` under base instance
/// `xprime` and ordering `order`. A test on variable `j` stays free when `j`
/// comes after the target in the ordering, or when `j` is the target itself
/// and this is the numerator; any other test is checked against `xprime` and
/// either removed (agreeing) or the whole feature is dropped (disagreeing).
pub fn simplify_feature(
    target: usize,
    f: &ConjunctiveFeature,
    xprime: &Assignment,
    order: &VariableOrder,
    numerator: bool,
) -> Simplified {
    let tpos = order.position(target);
    let mut kept = Vec::with_capacity(f.len());
    for t in f.tests() {
        if tpos < order.position(t.var) || (t.var == target && numerator) {
            kept.push(*t);
        } else if xprime.value(t.var) != t.val {
            return Simplified::Dropped;
        }
    }
    if kept.is_empty() {
        Simplified::AlwaysTrue
    } else {
        Simplified::Feature(ConjunctiveFeature::from_sorted_tests(kept))
    }
}

/// Result of simplifying one feature in base-expectation mode: the surviving
/// feature (`None` when every test was removed) and the product of marginal
/// probabilities of the removed tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedSimplification {
    pub feature: Option<ConjunctiveFeature>,
    pub multiplier: f64,
}

/// Like [`simplify_feature`], but each test that would be checked against a
/// base instance is removed unconditionally and contributes its value's
/// marginal probability to the multiplier. Nothing is ever dropped; with
/// uniform marginals over binary variables the multiplier is `2^-k` for `k`
/// checked tests.
pub fn simplify_feature_expected(
    target: usize,
    f: &ConjunctiveFeature,
    marginals: &Marginals,
    order: &VariableOrder,
    numerator: bool,
) -> ExpectedSimplification {
    let tpos = order.position(target);
    let mut kept = Vec::with_capacity(f.len());
    let mut multiplier = 1.0;
    for t in f.tests() {
        if tpos < order.position(t.var) || (t.var == target && numerator) {
            kept.push(*t);
        } else {
            multiplier *= marginals.prob(t.var, t.val);
        }
    }
    let feature = if kept.is_empty() {
        None
    } else {
        Some(ConjunctiveFeature::from_sorted_tests(kept))
    };
    ExpectedSimplification {
        feature,
        multiplier,
    }
}

/// Basic single-instance, single-ordering conversion. For a consistent DN the
/// result represents the DN's joint exactly, for every `xprime` and `order`.
pub fn convert_basic(
    dn: &DependencyNetwork,
    xprime: &Assignment,
    order: &VariableOrder,
) -> Result<MarkovNetwork> {
    let schema = dn.schema();
    validate_assignment(xprime, schema)?;
    validate_order(order, schema)?;
    let mut pool = Vec::new();
    for (i, cpd) in dn.cpds().iter().enumerate() {
        for wf in cpd.to_features(schema) {
            require_target_test(&wf.feature, i)?;
            match simplify_feature(i, &wf.feature, xprime, order, true) {
                Simplified::Feature(f) => pool.push(WeightedFeature::new(wf.weight, f)),
                Simplified::AlwaysTrue | Simplified::Dropped => {}
            }
            match simplify_feature(i, &wf.feature, xprime, order, false) {
                Simplified::Feature(f) => pool.push(WeightedFeature::new(-wf.weight, f)),
                Simplified::AlwaysTrue | Simplified::Dropped => {}
            }
        }
    }
    Ok(MarkovNetwork::new(schema.clone(), pool)?.merge_features())
}

/// Expands a feature of the CPD for `target` into the subfeatures produced by
/// the n rotations of `base`, grouped, with the fraction of rotations that
/// produce each one. A rotation keeps exactly the non-target tests whose
/// variable it places after the target. Features without a target test pass
/// through with fraction 1.
pub fn rotation_subfeatures(
    target: usize,
    f: &ConjunctiveFeature,
    base: &VariableOrder,
) -> Vec<(ConjunctiveFeature, f64)> {
    let Some(tidx) = target_test_index(f, target) else {
        return vec![(f.clone(), 1.0)];
    };
    let n = base.len();
    rotation_masks(f, tidx, base)
        .into_iter()
        .map(|(mask, count)| (subfeature(f, mask), count as f64 / n as f64))
        .collect()
}

/// Expands a feature into one subfeature per retained subset of its
/// non-target tests (the target test is always retained). A subfeature
/// keeping `l` of the `k` tests gets the fraction of the k! orderings of the
/// tested variables that produce it: `(l-1)! (k-l)! / k!`.
pub fn all_orderings_subfeatures(
    target: usize,
    f: &ConjunctiveFeature,
    max_feature_len: usize,
) -> Result<Vec<(ConjunctiveFeature, f64)>> {
    let k = f.len();
    if k > max_feature_len {
        return Err(Error::FeatureTooLong {
            len: k,
            bound: max_feature_len,
        });
    }
    let Some(tidx) = target_test_index(f, target) else {
        return Ok(vec![(f.clone(), 1.0)]);
    };
    let non_target: Vec<usize> = (0..k).filter(|&j| j != tidx).collect();
    let fact: Vec<f64> = {
        let mut fact = vec![1.0; k + 1];
        for i in 1..=k {
            fact[i] = fact[i - 1] * i as f64;
        }
        fact
    };
    let mut out = Vec::with_capacity(1 << non_target.len());
    for subset in 0u64..(1u64 << non_target.len()) {
        let mut mask = 1u64 << tidx;
        for (bit, &j) in non_target.iter().enumerate() {
            if subset >> bit & 1 == 1 {
                mask |= 1 << j;
            }
        }
        let l = (subset.count_ones() + 1) as usize;
        let fraction = fact[l - 1] * fact[k - l] / fact[k];
        out.push((subfeature(f, mask), fraction));
    }
    Ok(out)
}

/// Full conversion under a configuration of base-instance and ordering
/// averaging. All modes pool weighted subfeatures and end with a merge, so
/// the output is deterministic and independent of CPD iteration order.
pub fn convert(dn: &DependencyNetwork, cfg: &ConversionConfig) -> Result<MarkovNetwork> {
    let schema = dn.schema();
    match &cfg.base {
        BaseMode::Single(xp) => validate_assignment(xp, schema)?,
        BaseMode::Expectation(q) => {
            Marginals::new(schema, q.dists().to_vec())?;
        }
    }
    if let Some(order) = cfg_order(&cfg.order) {
        validate_order(order, schema)?;
    }

    // The single/single case is exactly the basic algorithm.
    if let (BaseMode::Single(xp), OrderMode::Single(order)) = (&cfg.base, &cfg.order) {
        return convert_basic(dn, xp, order);
    }

    let mut pool = Vec::new();
    for (i, cpd) in dn.cpds().iter().enumerate() {
        for wf in cpd.to_features(schema) {
            require_target_test(&wf.feature, i)?;
            if wf.feature.len() > 64 {
                return Err(Error::FeatureTooLong {
                    len: wf.feature.len(),
                    bound: 64,
                });
            }
            let tidx = target_test_index(&wf.feature, i).expect("target test checked above");
            for (mask, fraction) in
                retention_contexts(&wf.feature, tidx, &cfg.order, cfg.max_feature_len)?
            {
                emit(
                    &mut pool,
                    &wf.feature,
                    tidx,
                    i,
                    wf.weight,
                    mask,
                    fraction,
                    &cfg.base,
                );
            }
        }
    }
    Ok(MarkovNetwork::new(schema.clone(), pool)?.merge_features())
}

fn cfg_order(order: &OrderMode) -> Option<&VariableOrder> {
    match order {
        OrderMode::Single(o)
        | OrderMode::OppositePair(o)
        | OrderMode::Rotations(o)
        | OrderMode::RotationsPair(o) => Some(o),
        OrderMode::AllOrderings => None,
    }
}

fn validate_assignment(a: &Assignment, schema: &Schema) -> Result<()> {
    Assignment::new(a.values().to_vec(), schema).map(|_| ())
}

fn validate_order(order: &VariableOrder, schema: &Schema) -> Result<()> {
    if order.len() != schema.len() {
        return Err(Error::InvalidModel(format!(
            "ordering over {} variables for a {}-variable schema",
            order.len(),
            schema.len()
        )));
    }
    Ok(())
}

fn require_target_test(f: &ConjunctiveFeature, target: usize) -> Result<()> {
    if f.test_on(target).is_none() {
        return Err(Error::InvalidModel(format!(
            "CPD for variable {target} has a feature without a test on its target"
        )));
    }
    Ok(())
}

fn target_test_index(f: &ConjunctiveFeature, target: usize) -> Option<usize> {
    f.tests().iter().position(|t| t.var == target)
}

/// Tests of `f` selected by `mask` (bit j = test j); preserves canonical order.
fn subfeature(f: &ConjunctiveFeature, mask: u64) -> ConjunctiveFeature {
    let tests = f
        .tests()
        .iter()
        .enumerate()
        .filter(|&(j, _)| mask >> j & 1 == 1)
        .map(|(_, t)| *t)
        .collect();
    ConjunctiveFeature::from_sorted_tests(tests)
}

/// Retained-test mask for one ordering: the target test plus every non-target
/// test whose variable the ordering places after the target.
fn single_mask(f: &ConjunctiveFeature, tidx: usize, order: &VariableOrder) -> u64 {
    let tpos = order.position(f.tests()[tidx].var);
    let mut mask = 1u64 << tidx;
    for (j, t) in f.tests().iter().enumerate() {
        if j != tidx && tpos < order.position(t.var) {
            mask |= 1 << j;
        }
    }
    mask
}

/// Counts, over the n rotations of `base`, how many produce each retained-test
/// mask. Grouping is exact: rotations agree on the mask iff they agree on
/// which tested variables fall after the target.
fn rotation_masks(f: &ConjunctiveFeature, tidx: usize, base: &VariableOrder) -> BTreeMap<u64, u32> {
    let n = base.len();
    let tvar = f.tests()[tidx].var;
    let mut counts = BTreeMap::new();
    for start in 0..n {
        let pos = |v: usize| (base.position(v) + n - start) % n;
        let tpos = pos(tvar);
        let mut mask = 1u64 << tidx;
        for (j, t) in f.tests().iter().enumerate() {
            if j != tidx && tpos < pos(t.var) {
                mask |= 1 << j;
            }
        }
        *counts.entry(mask).or_insert(0u32) += 1;
    }
    counts
}

/// Retained-test masks with their averaging fractions for one feature under
/// an ordering mode. Fractions always sum to 1.
fn retention_contexts(
    f: &ConjunctiveFeature,
    tidx: usize,
    order: &OrderMode,
    max_feature_len: usize,
) -> Result<Vec<(u64, f64)>> {
    match order {
        OrderMode::Single(o) => Ok(vec![(single_mask(f, tidx, o), 1.0)]),
        OrderMode::OppositePair(o) => {
            let mut grouped: BTreeMap<u64, f64> = BTreeMap::new();
            *grouped.entry(single_mask(f, tidx, o)).or_insert(0.0) += 0.5;
            *grouped
                .entry(single_mask(f, tidx, &o.reversed()))
                .or_insert(0.0) += 0.5;
            Ok(grouped.into_iter().collect())
        }
        OrderMode::Rotations(o) => {
            let n = o.len() as f64;
            Ok(rotation_masks(f, tidx, o)
                .into_iter()
                .map(|(mask, c)| (mask, c as f64 / n))
                .collect())
        }
        OrderMode::RotationsPair(o) => {
            let mut grouped: BTreeMap<u64, u32> = rotation_masks(f, tidx, o);
            for (mask, c) in rotation_masks(f, tidx, &o.reversed()) {
                *grouped.entry(mask).or_insert(0) += c;
            }
            let total = 2.0 * o.len() as f64;
            Ok(grouped
                .into_iter()
                .map(|(mask, c)| (mask, c as f64 / total))
                .collect())
        }
        OrderMode::AllOrderings => {
            let k = f.len();
            if k > max_feature_len {
                return Err(Error::FeatureTooLong {
                    len: k,
                    bound: max_feature_len,
                });
            }
            let non_target: Vec<usize> = (0..k).filter(|&j| j != tidx).collect();
            let mut fact = vec![1.0f64; k + 1];
            for i in 1..=k {
                fact[i] = fact[i - 1] * i as f64;
            }
            let mut out = Vec::with_capacity(1 << non_target.len());
            for subset in 0u64..(1u64 << non_target.len()) {
                let mut mask = 1u64 << tidx;
                for (bit, &j) in non_target.iter().enumerate() {
                    if subset >> bit & 1 == 1 {
                        mask |= 1 << j;
                    }
                }
                let l = (subset.count_ones() + 1) as usize;
                out.push((mask, fact[l - 1] * fact[k - l] / fact[k]));
            }
            Ok(out)
        }
    }
}

/// Emits the numerator and denominator contributions of one feature for one
/// retained-test mask.
#[allow(clippy::too_many_arguments)]
fn emit(
    pool: &mut Vec<WeightedFeature>,
    f: &ConjunctiveFeature,
    tidx: usize,
    target: usize,
    weight: f64,
    mask: u64,
    fraction: f64,
    base: &BaseMode,
) {
    let target_val = f.tests()[tidx].val;
    match base {
        BaseMode::Single(xp) => {
            // Removed non-target tests must agree with x' or both the
            // numerator and the denominator vanish.
            for (j, t) in f.tests().iter().enumerate() {
                if j != tidx && mask >> j & 1 == 0 && xp.value(t.var) != t.val {
                    return;
                }
            }
            pool.push(WeightedFeature::new(weight * fraction, subfeature(f, mask)));
            if xp.value(target) == target_val {
                let dmask = mask & !(1u64 << tidx);
                if dmask != 0 {
                    pool.push(WeightedFeature::new(
                        -weight * fraction,
                        subfeature(f, dmask),
                    ));
                }
            }
        }
        BaseMode::Expectation(q) => {
            let mut mult = 1.0;
            for (j, t) in f.tests().iter().enumerate() {
                if j != tidx && mask >> j & 1 == 0 {
                    mult *= q.prob(t.var, t.val);
                }
            }
            pool.push(WeightedFeature::new(
                weight * fraction * mult,
                subfeature(f, mask),
            ));
            let dmask = mask & !(1u64 << tidx);
            if dmask != 0 {
                pool.push(WeightedFeature::new(
                    -weight * fraction * mult * q.prob(target, target_val),
                    subfeature(f, dmask),
                ));
            }
        }
    }
}
