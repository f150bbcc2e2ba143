//! Helpers shared by the integration and acceptance suites.
#![allow(dead_code)] // each test binary uses a different subset

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dnmn::convert::{Marginals, VariableOrder};
use dnmn::cpd::{Cpd, DependencyNetwork, TreeCpd, TreeNode};
use dnmn::io::Dataset;
use dnmn::model::{
    canonicalize_feature, Assignment, Canonical, Distribution, MarkovNetwork, Schema, VariableTest,
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

/// Consistent two-variable DN with joint [FF, FT, TF, TT] = [0.3, 0.1, 0.2, 0.4].
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

/// Inconsistent two-variable DN whose Gibbs stationary distribution is
/// uniform by symmetry.
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

/// Random binary Markov network: `n_features` canonical features with 1..=3
/// tests and weights in [-2, 2].
pub fn random_mn(seed: u64, n: usize, n_features: usize) -> MarkovNetwork {
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

pub fn dataset_from_mn(m: &MarkovNetwork, rows: usize, seed: u64) -> Dataset {
    Dataset::new(m.schema().clone(), m.sample_exact(rows, seed).unwrap()).unwrap()
}

pub fn random_assignment(schema: &Schema, rng: &mut ChaCha8Rng) -> Assignment {
    let values: Vec<usize> = (0..schema.len())
        .map(|v| rng.gen_range(0..schema.arity(v)))
        .collect();
    Assignment::new(values, schema).unwrap()
}

pub fn random_order(n: usize, rng: &mut ChaCha8Rng) -> VariableOrder {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    VariableOrder::new(perm).unwrap()
}

/// Strictly positive random marginals with each probability in [0.2, 0.8].
pub fn random_marginals(schema: &Schema, rng: &mut ChaCha8Rng) -> Marginals {
    let dists = (0..schema.len())
        .map(|v| {
            let raw: Vec<f64> = (0..schema.arity(v))
                .map(|_| rng.gen_range(0.2..0.8))
                .collect();
            Distribution::normalized(raw).unwrap()
        })
        .collect();
    Marginals::new(schema, dists).unwrap()
}

pub fn tv_distance(a: &Distribution, b: &Distribution) -> f64 {
    0.5 * a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
}
