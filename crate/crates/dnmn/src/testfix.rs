//! Shared fixtures for unit tests: the two-variable example DNs and seeded
//! random models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpd::{Cpd, DependencyNetwork, TreeCpd, TreeNode};
use crate::model::{
    canonicalize_feature, Canonical, Distribution, MarkovNetwork, Schema, VariableTest,
    WeightedFeature,
};

pub fn leaf(probs: Vec<f64>) -> TreeNode {
    TreeNode::Leaf(Distribution::new(probs).unwrap())
}

pub fn split(var: usize, val: usize, on_true: TreeNode, on_false: TreeNode) -> TreeNode {
    TreeNode::Split {
        test: VariableTest::new(var, val),
        on_true: Box::new(on_true),
        on_false: Box::new(on_false),
    }
}

/// Consistent two-variable DN: P(X0=1|X1=1)=4/5, P(X0=1|X1=0)=2/5,
/// P(X1=1|X0=1)=2/3, P(X1=1|X0=0)=1/4. Its joint, in lexicographic order
/// [FF, FT, TF, TT], is [0.3, 0.1, 0.2, 0.4].
pub fn consistent_two_var_dn() -> DependencyNetwork {
    let schema = Schema::binary(2).unwrap();
    let cpd0 = TreeCpd::new(
        0,
        split(1, 1, leaf(vec![0.2, 0.8]), leaf(vec![0.6, 0.4])),
        &schema,
    )
    .unwrap();
    let cpd1 = TreeCpd::new(
        1,
        split(
            0,
            1,
            leaf(vec![1.0 / 3.0, 2.0 / 3.0]),
            leaf(vec![0.75, 0.25]),
        ),
        &schema,
    )
    .unwrap();
    DependencyNetwork::new(schema, vec![Cpd::Tree(cpd0), Cpd::Tree(cpd1)]).unwrap()
}

/// Inconsistent two-variable DN: the first CPD pulls the variables toward
/// equality, the second toward disagreement; the Gibbs stationary
/// distribution is uniform by symmetry.
pub fn inconsistent_two_var_dn() -> DependencyNetwork {
    let schema = Schema::binary(2).unwrap();
    let cpd0 = TreeCpd::new(
        0,
        split(1, 1, leaf(vec![0.2, 0.8]), leaf(vec![0.8, 0.2])),
        &schema,
    )
    .unwrap();
    let cpd1 = TreeCpd::new(
        1,
        split(0, 1, leaf(vec![0.8, 0.2]), leaf(vec![0.2, 0.8])),
        &schema,
    )
    .unwrap();
    DependencyNetwork::new(schema, vec![Cpd::Tree(cpd0), Cpd::Tree(cpd1)]).unwrap()
}

/// Random binary MN with `n_features` canonical features of 1..=3 tests and
/// weights in [-2, 2].
pub fn seeded_random_mn(seed: u64, n: usize, n_features: usize) -> MarkovNetwork {
    let schema = Schema::binary(n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    while features.len() < n_features {
        let len = rng.gen_range(1..=n.min(3));
        let tests: Vec<VariableTest> = (0..len)
            .map(|_| VariableTest::new(rng.gen_range(0..n), rng.gen_range(0..2)))
            .collect();
        if let Canonical::Feature(f) = canonicalize_feature(&schema, &tests).unwrap() {
            features.push(WeightedFeature::new(rng.gen_range(-2.0..2.0), f));
        }
    }
    MarkovNetwork::new(schema, features).unwrap()
}
