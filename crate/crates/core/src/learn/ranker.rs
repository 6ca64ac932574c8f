use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::capi::CapiExample;
use crate::error::{Error, Result};
use crate::policy::PolicyWeights;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerHyper {
    /// L2 strength.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RankerHyper {
    fn default() -> Self {
        RankerHyper {
            lambda: 1e-4,
            epochs: 40,
            seed: 0,
        }
    }
}

/// Multi-class hinge ranker (Weston-Watkins form): every allowed `a ≠ a*`
/// should score at least 1 below `a*`, each violation weighted by the
/// example's cost for `a`. Pegasos step sizes; the returned weights are the
/// average of the iterates over the second half of training.
pub fn train_ranker(
    examples: &[CapiExample],
    type_count: usize,
    label_count: usize,
    hyper: &RankerHyper,
) -> Result<PolicyWeights> {
    if examples.is_empty() {
        return Err(Error::data("ranker needs at least one training example"));
    }
    if !(hyper.lambda > 0.0) {
        return Err(Error::config("ranker lambda must be positive"));
    }
    let width = PolicyWeights::feature_len(type_count, label_count);
    for ex in examples {
        if !ex.allowed.contains(&ex.label) {
            return Err(Error::data(format!("label {} is not among the allowed actions", ex.label)));
        }
        if ex.features.values().len() != width || ex.costs.len() != ex.allowed.len() {
            return Err(Error::data("example shape does not match the policy layout"));
        }
        if ex.allowed.iter().any(|a| a.index(type_count) > type_count) {
            return Err(Error::data("example action outside the policy's action space"));
        }
    }

    let rows = type_count + 1;
    let mut w = vec![0.0; rows * width];
    let mut avg = vec![0.0; rows * width];
    let mut averaged = 0usize;
    let total_steps = hyper.epochs.max(1) * examples.len();
    let average_from = total_steps / 2;
    let mut rng = seed::rng(hyper.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut t = 0usize;
    let dot = |w: &[f64], row: usize, x: &[f64]| -> f64 {
        w[row * width..(row + 1) * width].iter().zip(x).map(|(a, b)| a * b).sum()
    };

    for _ in 0..hyper.epochs.max(1) {
        order.shuffle(&mut rng);
        for &k in &order {
            t += 1;
            let ex = &examples[k];
            let x = ex.features.values();
            let eta = 1.0 / (hyper.lambda * t as f64);
            let star = ex.label.index(type_count);
            let s_star = dot(&w, star, x);
            let violations: Vec<(usize, f64)> = ex
                .allowed
                .iter()
                .zip(&ex.costs)
                .filter(|&(&a, &c)| a != ex.label && c > 0.0)
                .map(|(&a, &c)| (a.index(type_count), c))
                .filter(|&(row, _)| s_star - dot(&w, row, x) < 1.0)
                .collect();
            let shrink = 1.0 - eta * hyper.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            for (row, c) in violations {
                for (f, xv) in x.iter().enumerate() {
                    w[star * width + f] += eta * c * xv;
                    w[row * width + f] -= eta * c * xv;
                }
            }
            if t > average_from {
                averaged += 1;
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += v;
                }
            }
        }
    }
    let scale = 1.0 / averaged.max(1) as f64;
    let rows_out = avg
        .chunks(width)
        .map(|r| r.iter().map(|v| v * scale).collect())
        .collect();
    PolicyWeights::from_rows(type_count, label_count, rows_out)
}
