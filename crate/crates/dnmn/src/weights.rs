//! Pseudo-likelihood weight learning for a fixed conjunctive-feature set,
//! with a zero-mean Gaussian prior on each weight. This is the baseline the
//! closed-form conversion is compared against: take the features, forget the
//! CPD parameters, and re-fit all weights to maximize PLL on training data.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{
    conditional_log_likelihood, ConjunctiveFeature, MarkovNetwork, WeightedFeature,
};

/// Gradient infinity-norm below which the optimizer reports convergence.
pub const GRADIENT_TOL: f64 = 1e-5;

/// `Σ_rows Σ_i ln P(x_i | x_{-i})` under the Markov network.
pub fn pll(m: &MarkovNetwork, data: &Dataset) -> f64 {
    conditional_log_likelihood(m, data.rows())
}

/// The penalized pseudo-log-likelihood objective for a fixed feature set:
/// `PLL(w) - Σ_k w_k² / (2σ²)`. One evaluation makes a single pass over the
/// data; per instance, the work is proportional to the summed feature scopes
/// rather than scopes times values.
pub struct PllObjective<'a> {
    features: &'a [ConjunctiveFeature],
    data: &'a Dataset,
    sigma: f64,
}

impl<'a> PllObjective<'a> {
    /// `features` must be canonical, schema-valid, and duplicate-free.
    pub fn new(features: &'a [ConjunctiveFeature], data: &'a Dataset, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidModel(format!(
                "sigma {sigma} must be finite and > 0"
            )));
        }
        let schema = data.schema();
        MarkovNetwork::new(
            schema.clone(),
            features
                .iter()
                .map(|f| WeightedFeature::new(0.0, f.clone()))
                .collect(),
        )?;
        let mut sorted: Vec<&ConjunctiveFeature> = features.iter().collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::InvalidModel(
                "duplicate features in objective".into(),
            ));
        }
        Ok(PllObjective {
            features,
            data,
            sigma,
        })
    }

    pub fn num_weights(&self) -> usize {
        self.features.len()
    }

    /// Objective value, and the gradient when requested.
    ///
    /// Accumulation over instances runs in parallel over fixed-size row
    /// chunks reduced in chunk order, so results are bit-identical across
    /// thread counts.
    pub fn evaluate(&self, w: &[f64], want_gradient: bool) -> (f64, Option<Vec<f64>>) {
        assert_eq!(
            w.len(),
            self.features.len(),
            "weight vector length mismatch"
        );
        const CHUNK: usize = 512;

        use rayon::prelude::*;
        let chunks: Vec<(f64, Vec<f64>)> = self
            .data
            .rows()
            .par_chunks(CHUNK)
            .map(|rows| self.evaluate_rows(rows, w, want_gradient))
            .collect();

        let mut value = 0.0;
        let mut grad = if want_gradient {
            vec![0.0; w.len()]
        } else {
            Vec::new()
        };
        for (v, g) in chunks {
            value += v;
            for (gk, ck) in grad.iter_mut().zip(&g) {
                *gk += ck;
            }
        }

        let inv_var = 1.0 / (self.sigma * self.sigma);
        for (k, &wk) in w.iter().enumerate() {
            value -= wk * wk * 0.5 * inv_var;
            if want_gradient {
                grad[k] -= wk * inv_var;
            }
        }
        (value, want_gradient.then_some(grad))
    }

    /// Per row, each feature is classified by its unsatisfied-test count `u`:
    /// with `u = 0` it contributes its weight to the conditional score of
    /// every tested (variable, value); with `u = 1` only to the single
    /// unsatisfied test's slot; with `u >= 2` no single-variable flip can
    /// satisfy it. The same classification drives the gradient terms
    /// `f_k(x) - E_v f_k(x with X_i = v)`.
    fn evaluate_rows(
        &self,
        data_rows: &[crate::model::Assignment],
        w: &[f64],
        want_gradient: bool,
    ) -> (f64, Vec<f64>) {
        let schema = self.data.schema();
        let n = schema.len();

        let mut value = 0.0;
        let mut grad = if want_gradient {
            vec![0.0; w.len()]
        } else {
            Vec::new()
        };

        let mut scores: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; schema.arity(i)]).collect();
        let mut probs: Vec<Vec<f64>> = scores.clone();
        // (unsatisfied count capped at 2, index of the unsatisfied test)
        let mut status: Vec<(u8, u32)> = vec![(0, 0); self.features.len()];

        for row in data_rows {
            for s in scores.iter_mut() {
                s.iter_mut().for_each(|x| *x = 0.0);
            }
            for (k, f) in self.features.iter().enumerate() {
                let mut unsat = 0u8;
                let mut unsat_idx = 0u32;
                for (ti, t) in f.tests().iter().enumerate() {
                    if row.value(t.var) != t.val {
                        unsat += 1;
                        unsat_idx = ti as u32;
                        if unsat == 2 {
                            break;
                        }
                    }
                }
                status[k] = (unsat, unsat_idx);
                match unsat {
                    0 => {
                        for t in f.tests() {
                            scores[t.var][t.val] += w[k];
                        }
                    }
                    1 => {
                        let t = f.tests()[unsat_idx as usize];
                        scores[t.var][t.val] += w[k];
                    }
                    _ => {}
                }
            }

            for i in 0..n {
                let s = &scores[i];
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (v, p) in probs[i].iter_mut().enumerate() {
                    *p = (s[v] - max).exp();
                    z += *p;
                }
                for p in probs[i].iter_mut() {
                    *p /= z;
                }
                value += s[row.value(i)] - max - z.ln();
            }

            if want_gradient {
                for (k, f) in self.features.iter().enumerate() {
                    match status[k] {
                        (0, _) => {
                            for t in f.tests() {
                                grad[k] += 1.0 - probs[t.var][t.val];
                            }
                        }
                        (1, ti) => {
                            let t = f.tests()[ti as usize];
                            grad[k] -= probs[t.var][t.val];
                        }
                        _ => {}
                    }
                }
            }
        }
        (value, grad)
    }
}

/// Gradient of the penalized PLL objective at `w`.
pub fn pll_gradient(objective: &PllObjective, w: &[f64]) -> Vec<f64> {
    objective.evaluate(w, true).1.expect("gradient requested")
}

/// Diagnostics from a weight-learning run.
#[derive(Debug, Clone)]
pub struct FitInfo {
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start and after every accepted iterate.
    pub objective_trace: Vec<f64>,
}

/// L-BFGS (memory 10) with Armijo backtracking, maximizing the objective;
/// accepted iterates never decrease it.
fn lbfgs_maximize<F>(eval: F, mut w: Vec<f64>, max_iter: usize) -> (Vec<f64>, FitInfo)
where
    F: Fn(&[f64], bool) -> (f64, Option<Vec<f64>>),
{
    const MEMORY: usize = 10;
    const ARMIJO_C1: f64 = 1e-4;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let inf_norm = |a: &[f64]| a.iter().fold(0.0f64, |m, &x| m.max(x.abs()));

    // Work in minimization form: phi = -objective.
    let (value, grad) = eval(&w, true);
    let mut phi = -value;
    let mut g: Vec<f64> = grad.unwrap().iter().map(|x| -x).collect();
    let mut info = FitInfo {
        iterations: 0,
        converged: false,
        objective_trace: vec![value],
    };
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for iter in 1..=max_iter {
        if inf_norm(&g) < GRADIENT_TOL {
            info.converged = true;
            break;
        }

        // Two-loop recursion for the quasi-Newton direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = memory.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        let mut d: Vec<f64> = q.iter().map(|x| x * gamma).collect();
        for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        for di in d.iter_mut() {
            *di = -*di;
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction (stale curvature); fall back to steepest.
            memory.clear();
            d = g.iter().map(|x| -x).collect();
            slope = dot(&g, &d);
        }

        let mut alpha = if iter == 1 {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        while alpha >= 1e-20 {
            let w_new: Vec<f64> = w.iter().zip(&d).map(|(wi, di)| wi + alpha * di).collect();
            let (val_new, _) = eval(&w_new, false);
            if -val_new <= phi + ARMIJO_C1 * alpha * slope {
                accepted = Some((w_new, val_new));
                break;
            }
            alpha *= 0.5;
        }
        let Some((w_new, val_new)) = accepted else {
            break; // line search failed; current point is as good as it gets
        };

        let (_, grad_new) = eval(&w_new, true);
        let g_new: Vec<f64> = grad_new.unwrap().iter().map(|x| -x).collect();
        let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&y, &y).sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            memory.push_back((s, y, 1.0 / sy));
            if memory.len() > MEMORY {
                memory.pop_front();
            }
        }

        w = w_new;
        phi = -val_new;
        g = g_new;
        info.iterations = iter;
        info.objective_trace.push(val_new);
    }
    if inf_norm(&g) < GRADIENT_TOL {
        info.converged = true;
    }
    (w, info)
}

/// Maximizes penalized PLL for the fixed feature set from the all-zeros
/// start; stops when the gradient infinity-norm falls below 1e-5 or after
/// `max_iter` iterations.
pub fn learn_weights(
    features: &[ConjunctiveFeature],
    data: &Dataset,
    sigma: f64,
    max_iter: usize,
) -> Result<MarkovNetwork> {
    learn_weights_from(features, data, sigma, max_iter, None).map(|(m, _)| m)
}

/// As [`learn_weights`], with an optional warm start (e.g. the weights of a
/// converted model) and fit diagnostics.
pub fn learn_weights_from(
    features: &[ConjunctiveFeature],
    data: &Dataset,
    sigma: f64,
    max_iter: usize,
    init: Option<&[f64]>,
) -> Result<(MarkovNetwork, FitInfo)> {
    let objective = PllObjective::new(features, data, sigma)?;
    let w0 = match init {
        Some(w) => {
            if w.len() != features.len() {
                return Err(Error::InvalidModel(format!(
                    "{} initial weights for {} features",
                    w.len(),
                    features.len()
                )));
            }
            w.to_vec()
        }
        None => vec![0.0; features.len()],
    };
    let (w, info) = lbfgs_maximize(|w, g| objective.evaluate(w, g), w0, max_iter);
    let weighted = features
        .iter()
        .zip(&w)
        .map(|(f, &weight)| WeightedFeature::new(weight, f.clone()))
        .collect();
    Ok((MarkovNetwork::new(data.schema().clone(), weighted)?, info))
}

/// Keeps the first copy of each canonical feature, discarding duplicate
/// weights.
pub fn dedupe_features(features: &[WeightedFeature]) -> Vec<WeightedFeature> {
    let mut seen = std::collections::BTreeSet::new();
    features
        .iter()
        .filter(|wf| seen.insert(wf.feature.clone()))
        .cloned()
        .collect()
}

/// Learns at every sigma in the grid and keeps the model with the best PLL on
/// the tune set; ties go to the smaller sigma.
pub fn tune_sigma(
    features: &[ConjunctiveFeature],
    train: &Dataset,
    tune: &Dataset,
    grid: &[f64],
    max_iter: usize,
) -> Result<(f64, MarkovNetwork)> {
    if grid.is_empty() {
        return Err(Error::InvalidModel("empty sigma grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut best: Option<(f64, f64, MarkovNetwork)> = None;
    for &sigma in &sorted {
        let m = learn_weights(features, train, sigma, max_iter)?;
        let score = pll(&m, tune);
        if best.as_ref().is_none_or(|&(_, s, _)| score > s) {
            best = Some((sigma, score, m));
        }
    }
    let (sigma, _, m) = best.expect("grid is non-empty");
    Ok((sigma, m))
}
