use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::budget_engine::{Budget, Setting};
use crate::classifier_bank::SubsetMask;
use crate::error::{Error, Result};
use crate::seed;
use crate::svgraph::Video;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QHyper {
    pub episodes: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub seed: u64,
}

impl Default for QHyper {
    fn default() -> Self {
        QHyper {
            episodes: 5000,
            alpha: 0.01,
            gamma: 1.0,
            epsilon_start: 0.5,
            epsilon_end: 0.05,
            seed: 0,
        }
    }
}

/// Linear Q-function over `[subset bits | remaining / B | 1]`, one weight
/// row per global action (add type `t`, or stop as the last row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub type_count: usize,
    pub weights: Vec<Vec<f64>>,
}

impl QTable {
    fn new(type_count: usize) -> Self {
        QTable {
            type_count,
            weights: vec![vec![0.0; type_count + 2]; type_count + 1],
        }
    }

    fn features(&self, mask: SubsetMask, remaining: u64, budget: u64) -> Vec<f64> {
        let mut phi: Vec<f64> = (0..self.type_count).map(|t| f64::from(u8::from(mask.contains(t)))).collect();
        phi.push(if budget == 0 { 0.0 } else { remaining as f64 / budget as f64 });
        phi.push(1.0);
        phi
    }

    pub fn value(&self, mask: SubsetMask, remaining: u64, budget: u64, action: usize) -> f64 {
        self.weights[action]
            .iter()
            .zip(self.features(mask, remaining, budget))
            .map(|(w, x)| w * x)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
    }

    fn stop(&self) -> usize {
        self.type_count
    }

    /// Greedy subset from the empty set at budget `budget` on a video with
    /// `nodes` nodes.
    pub fn greedy_subset(&self, types: SubsetMask, costs: &[u64], nodes: u64, budget: u64) -> SubsetMask {
        let mut mask = SubsetMask::EMPTY;
        let mut remaining = budget;
        loop {
            let actions = global_actions(types, mask, costs, nodes, remaining, self.stop());
            let best = argmax(&actions, |a| self.value(mask, remaining, budget, a));
            if best == self.stop() {
                return mask;
            }
            mask = mask.with(best);
            remaining -= nodes * costs[best];
        }
    }
}

/// Affordable global additions, then stop.
fn global_actions(types: SubsetMask, mask: SubsetMask, costs: &[u64], nodes: u64, remaining: u64, stop: usize) -> Vec<usize> {
    let mut out: Vec<usize> = types
        .types()
        .filter(|&t| !mask.contains(t) && nodes * costs[t] <= remaining)
        .collect();
    out.push(stop);
    out
}

fn argmax(actions: &[usize], score: impl Fn(usize) -> f64) -> usize {
    let mut best = (actions[0], score(actions[0]));
    for &a in &actions[1..] {
        let s = score(a);
        if s > best.1 {
            best = (a, s);
        }
    }
    best.0
}

#[derive(Clone, Debug)]
pub struct QOutcome {
    pub table: QTable,
    /// Greedy subset at the budget of the first video.
    pub subset: SubsetMask,
}

/// Q-learning over global descriptor subsets. The terminal reward is the CRF
/// accuracy with the chosen subset on every node of a randomly drawn video.
pub fn qlearn_baseline3(setting: &Setting, videos: &[Video], budget: Budget, hyper: &QHyper) -> Result<QOutcome> {
    if videos.is_empty() {
        return Err(Error::data("Q-learning needs at least one training video"));
    }
    if hyper.episodes < 1 {
        return Err(Error::config("Q-learning needs at least one episode"));
    }
    let type_count = setting.classifiers.type_count();
    let costs: Vec<u64> = videos[0].descriptors.specs().iter().map(|s| s.cost).collect();
    let mut table = QTable::new(type_count);
    let stop = table.stop();
    let mut rng = seed::rng(hyper.seed);
    let mut rewards: HashMap<(usize, u8), f64> = HashMap::new();
    let mut reward = |k: usize, mask: SubsetMask| -> Result<f64> {
        if let Some(&r) = rewards.get(&(k, mask.bits())) {
            return Ok(r);
        }
        let env = setting.env(&videos[k]);
        let labeling = env.label_with_mask(mask)?;
        let r = env
            .accuracy(&labeling)
            .ok_or_else(|| Error::data("Q-learning needs labeled videos"))?;
        rewards.insert((k, mask.bits()), r);
        Ok(r)
    };

    for episode in 0..hyper.episodes {
        let progress = if hyper.episodes > 1 {
            episode as f64 / (hyper.episodes - 1) as f64
        } else {
            1.0
        };
        let epsilon = hyper.epsilon_start + (hyper.epsilon_end - hyper.epsilon_start) * progress;
        let k = rng.random_range(0..videos.len());
        let video = &videos[k];
        let nodes = video.graph.len() as u64;
        let b = budget.resolve(video);
        let (mut mask, mut remaining) = (SubsetMask::EMPTY, b);
        loop {
            let actions = global_actions(setting.types, mask, &costs, nodes, remaining, stop);
            let action = if rng.random::<f64>() < epsilon {
                actions[rng.random_range(0..actions.len())]
            } else {
                argmax(&actions, |a| table.value(mask, remaining, b, a))
            };
            let phi = table.features(mask, remaining, b);
            let q = table.value(mask, remaining, b, action);
            let (target, next) = if action == stop {
                (reward(k, mask)?, None)
            } else {
                let next_mask = mask.with(action);
                let next_remaining = remaining - nodes * costs[action];
                let next_actions = global_actions(setting.types, next_mask, &costs, nodes, next_remaining, stop);
                let best_next = next_actions
                    .iter()
                    .map(|&a| table.value(next_mask, next_remaining, b, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                (hyper.gamma * best_next, Some((next_mask, next_remaining)))
            };
            let step = hyper.alpha * (target - q);
            for (w, x) in table.weights[action].iter_mut().zip(&phi) {
                *w += step * x;
            }
            match next {
                Some((m, r)) => {
                    mask = m;
                    remaining = r;
                }
                None => break,
            }
        }
    }
    if !table.is_finite() {
        return Err(Error::data("Q-learning diverged"));
    }
    let first = &videos[0];
    let subset = table.greedy_subset(setting.types, &costs, first.graph.len() as u64, budget.resolve(first));
    Ok(QOutcome { table, subset })
}
