use std::collections::HashMap;

use crate::budget_engine::{Environment, Episode};
use crate::classifier_bank::SubsetMask;
use crate::error::{Error, Result};
use crate::policy::{Action, Policy};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// Allowed actions in tie-break order.
    pub actions: Vec<Action>,
    /// Mean final accuracy per action, aligned with `actions`.
    pub means: Vec<f64>,
    pub chosen: Action,
}

impl RolloutResult {
    pub fn mean(&self, action: Action) -> Option<f64> {
        self.actions.iter().position(|&a| a == action).map(|k| self.means[k])
    }

    pub fn best(&self) -> f64 {
        self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Final accuracy per end-of-run mask vector of one video. The labeling is a
/// function of the masks alone, so branches that end alike share it.
pub type RewardCache = HashMap<Vec<SubsetMask>, f64>;

/// Score every allowed action at `snapshot` by branching, continuing with
/// `policy` to the end of the budget and averaging the final accuracy over
/// `simulations` runs. Simulation `k` uses the same selection seed for every
/// action.
pub fn rollout_score(
    env: &Environment,
    snapshot: &Episode,
    policy: &dyn Policy,
    simulations: usize,
    seed_value: u64,
) -> Result<RolloutResult> {
    rollout_score_cached(env, snapshot, policy, simulations, seed_value, &mut RewardCache::new())
}

/// [`rollout_score`] reusing terminal rewards from `cache`, which must only
/// hold entries for `env`.
pub fn rollout_score_cached(
    env: &Environment,
    snapshot: &Episode,
    policy: &dyn Policy,
    simulations: usize,
    seed_value: u64,
    cache: &mut RewardCache,
) -> Result<RolloutResult> {
    if simulations < 1 {
        return Err(Error::config("rollout needs at least one simulation"));
    }
    if snapshot.state().current().is_none() {
        return Err(Error::contract("rollout snapshot has no selected node"));
    }
    let actions = snapshot.allowed(env);
    let mut means = Vec::with_capacity(actions.len());
    for &action in &actions {
        let mut total = 0.0;
        for k in 0..simulations {
            let mut branch = snapshot.clone();
            branch.reseed(seed::derive(seed_value, k as u64));
            branch.apply(env, action)?;
            branch.run(env, policy)?;
            total += match cache.get(branch.state().masks()) {
                Some(&r) => r,
                None => {
                    let r = branch.final_accuracy(env)?;
                    cache.insert(branch.state().masks().to_vec(), r);
                    r
                }
            };
        }
        means.push(total / simulations as f64);
    }
    let mut chosen = 0;
    for k in 1..means.len() {
        if means[k] > means[chosen] {
            chosen = k;
        }
    }
    Ok(RolloutResult {
        chosen: actions[chosen],
        actions,
        means,
    })
}
