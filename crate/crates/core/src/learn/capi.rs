use std::time::Instant;

use serde::Serialize;

use super::ranker::{train_ranker, RankerHyper};
use super::rollout::{rollout_score_cached, RewardCache};
use crate::budget_engine::{run_budgeted_inference, Budget, Episode, RunTrace, SelectStrategy, Setting};
use crate::error::{Error, Result};
use crate::policy::{Action, Policy, PolicyFeatures, PolicyWeights};
use crate::seed;
use crate::svgraph::Video;

/// One labeled decision state.
#[derive(Clone, Debug, PartialEq)]
pub struct CapiExample {
    pub features: PolicyFeatures,
    pub label: Action,
    pub allowed: Vec<Action>,
    /// Regret of each allowed action relative to the best one; aligned with
    /// `allowed`, zero for `label`.
    pub costs: Vec<f64>,
}

impl CapiExample {
    /// Every wrong action costs 1.
    pub fn unit(features: PolicyFeatures, label: Action, allowed: Vec<Action>) -> Self {
        let costs = allowed.iter().map(|&a| if a == label { 0.0 } else { 1.0 }).collect();
        CapiExample {
            features,
            label,
            allowed,
            costs,
        }
    }

    pub fn is_forced(&self) -> bool {
        self.allowed.len() == 1
    }

    pub fn is_informative(&self) -> bool {
        self.costs.iter().any(|&c| c > 0.0)
    }
}

pub type CapiTrainingSet = Vec<CapiExample>;

#[derive(Clone, Debug, PartialEq)]
pub struct CapiConfig {
    pub budget: Budget,
    /// Rollout simulations per action; `None` picks 5 for random selection
    /// and 1 for neighbour-confidence selection.
    pub simulations: Option<usize>,
    /// Cap on rollout-labeled states per iteration.
    pub max_states: usize,
    pub ranker: RankerHyper,
    /// Seed of the evaluation runs (shared by every iteration).
    pub seed: u64,
    /// A state is relabeled only when the best rollout mean beats the current
    /// policy's action by more than this; otherwise the policy's own action
    /// stays the label.
    pub margin: f64,
}

impl Default for CapiConfig {
    fn default() -> Self {
        CapiConfig {
            budget: Budget::Fraction(0.2),
            simulations: None,
            max_states: 5000,
            ranker: RankerHyper::default(),
            seed: 0,
            margin: 0.01,
        }
    }
}

impl CapiConfig {
    pub fn simulations_for(&self, strategy: SelectStrategy) -> usize {
        self.simulations.unwrap_or(match strategy {
            SelectStrategy::Random => 5,
            SelectStrategy::NeighborConfidence => 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CapiStats {
    pub old_accuracy: f64,
    pub new_accuracy: f64,
    /// Decision states met while running the old policy (forced ones included).
    pub states_collected: usize,
    /// States scored by rollout after subsampling.
    pub rollout_states: usize,
    /// Rollout states where the actions did not all tie.
    pub informative_states: usize,
    pub subsampled: bool,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug)]
pub struct CapiIteration {
    pub policy: PolicyWeights,
    pub stats: CapiStats,
    pub training_set: CapiTrainingSet,
}

/// Run `policy` on every video; per-video seeds derive from `seed_value`.
pub fn evaluate_policy(
    setting: &Setting,
    videos: &[Video],
    policy: &dyn Policy,
    budget: Budget,
    seed_value: u64,
) -> Result<Vec<RunTrace>> {
    videos
        .iter()
        .enumerate()
        .map(|(k, video)| {
            let env = setting.env(video);
            run_budgeted_inference(&env, policy, budget.resolve(video), seed::derive(seed_value, k as u64))
                .map(|(_, trace)| trace)
        })
        .collect()
}

pub fn mean_accuracy(traces: &[RunTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::data("no runs to average"));
    }
    let mut total = 0.0;
    for t in traces {
        total += t.accuracy.ok_or_else(|| Error::data("run has no ground truth"))?;
    }
    Ok(total / traces.len() as f64)
}

/// One approximate policy-improvement step: collect the states `policy`
/// visits, label each by rollout, fit a new ranker.
pub fn capi_iterate(
    policy: &PolicyWeights,
    setting: &Setting,
    videos: &[Video],
    config: &CapiConfig,
    seed_value: u64,
) -> Result<CapiIteration> {
    if videos.is_empty() {
        return Err(Error::data("policy iteration needs at least one training video"));
    }
    let started = Instant::now();
    let type_count = policy.type_count();
    let label_count = policy.label_count();
    let simulations = config.simulations_for(setting.strategy);

    let mut forced = Vec::new();
    let mut snapshots: Vec<(usize, Episode, Action)> = Vec::new();
    let mut old_total = 0.0;
    for (k, video) in videos.iter().enumerate() {
        let env = setting.env(video);
        let mut episode = Episode::start(&env, config.budget.resolve(video), seed::derive(config.seed, k as u64))?;
        while episode.advance(&env)? {
            let allowed = episode.allowed(&env);
            let action = if allowed.len() == 1 {
                forced.push(CapiExample::unit(episode.features(&env), Action::Finished, allowed));
                Action::Finished
            } else {
                let action = policy.choose(&episode.features(&env), &allowed);
                snapshots.push((k, episode.clone(), action));
                action
            };
            episode.apply(&env, action)?;
        }
        old_total += episode.final_accuracy(&env)?;
    }
    let old_accuracy = old_total / videos.len() as f64;
    let states_collected = forced.len() + snapshots.len();

    let subsampled = snapshots.len() > config.max_states;
    if subsampled {
        let mut rng = seed::derived_rng(seed_value, u64::MAX);
        let mut keep = rand::seq::index::sample(&mut rng, snapshots.len(), config.max_states).into_vec();
        keep.sort_unstable();
        let mut all: Vec<Option<(usize, Episode, Action)>> = snapshots.into_iter().map(Some).collect();
        snapshots = keep.into_iter().map(|i| all[i].take().expect("sampled indices are distinct")).collect();
    }

    let mut training_set = Vec::with_capacity(snapshots.len() + forced.len());
    let mut caches = vec![RewardCache::new(); videos.len()];
    for (idx, (k, snapshot, own)) in snapshots.iter().enumerate() {
        let env = setting.env(&videos[*k]);
        let seed_k = seed::derive(seed_value, idx as u64);
        let result = rollout_score_cached(&env, snapshot, policy, simulations, seed_k, &mut caches[*k])?;
        let own_mean = result
            .mean(*own)
            .ok_or_else(|| Error::data("policy action missing from the rollout"))?;
        let label = if result.best() - own_mean > config.margin {
            result.chosen
        } else {
            *own
        };
        let reference = if label == *own { own_mean } else { result.best() };
        training_set.push(CapiExample {
            features: snapshot.features(&env),
            label,
            costs: result.means.iter().map(|m| (reference - m).max(0.0)).collect(),
            allowed: result.actions,
        });
    }
    let informative_states = training_set.iter().filter(|e| e.is_informative()).count();
    let rollout_states = training_set.len();
    training_set.extend(forced);

    let new_policy = if informative_states == 0 {
        policy.clone()
    } else {
        let informative: Vec<CapiExample> = normalize_costs(training_set.iter().filter(|e| e.is_informative()));
        train_ranker(
            &informative,
            type_count,
            label_count,
            &RankerHyper {
                seed: seed::derive(seed_value, u64::MAX - 1),
                ..config.ranker
            },
        )?
    };
    let new_accuracy = mean_accuracy(&evaluate_policy(setting, videos, &new_policy, config.budget, config.seed)?)?;

    Ok(CapiIteration {
        policy: new_policy,
        stats: CapiStats {
            old_accuracy,
            new_accuracy,
            states_collected,
            rollout_states,
            informative_states,
            subsampled,
            elapsed_secs: started.elapsed().as_secs_f64(),
        },
        training_set,
    })
}

/// Rescale regrets so the mean positive regret is 1.
fn normalize_costs<'a>(examples: impl Iterator<Item = &'a CapiExample>) -> Vec<CapiExample> {
    let examples: Vec<CapiExample> = examples.cloned().collect();
    let positive: Vec<f64> = examples.iter().flat_map(|e| e.costs.iter().copied()).filter(|&c| c > 0.0).collect();
    if positive.is_empty() {
        return examples;
    }
    let scale = positive.len() as f64 / positive.iter().sum::<f64>();
    examples
        .into_iter()
        .map(|mut e| {
            e.costs.iter_mut().for_each(|c| *c *= scale);
            e
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub policy_train_acc: f64,
    pub rollout_states: usize,
    pub elapsed: f64,
}

#[derive(Clone, Debug)]
pub struct CapiOutcome {
    /// Best policy on the training videos.
    pub policy: PolicyWeights,
    pub best_accuracy: f64,
    pub initial_accuracy: f64,
    /// Row 0 is the initial policy.
    pub log: Vec<IterationLog>,
    pub iterations: Vec<CapiStats>,
    /// Policy after each iteration, starting with the initial one.
    pub history: Vec<PolicyWeights>,
}

/// Iterate policy improvement from `initial`, keeping the best policy seen.
/// Each step improves on the best policy so far. Stops after `max_iters`
/// steps or `patience` steps without a training accuracy gain above 1e-4.
pub fn capi_train(
    initial: &PolicyWeights,
    setting: &Setting,
    videos: &[Video],
    config: &CapiConfig,
    max_iters: usize,
    patience: usize,
) -> Result<CapiOutcome> {
    if max_iters < 1 {
        return Err(Error::config("policy iteration needs max_iters >= 1"));
    }
    let started = Instant::now();
    let initial_accuracy = mean_accuracy(&evaluate_policy(setting, videos, initial, config.budget, config.seed)?)?;
    let mut log = vec![IterationLog {
        iteration: 0,
        policy_train_acc: initial_accuracy,
        rollout_states: 0,
        elapsed: started.elapsed().as_secs_f64(),
    }];
    let mut best = (initial.clone(), initial_accuracy);
    let mut stale = 0usize;
    let mut iterations = Vec::new();
    let mut history = vec![initial.clone()];
    for t in 1..=max_iters {
        let step = capi_iterate(&best.0, setting, videos, config, seed::derive(config.seed, t as u64))?;
        log.push(IterationLog {
            iteration: t,
            policy_train_acc: step.stats.new_accuracy,
            rollout_states: step.stats.rollout_states,
            elapsed: started.elapsed().as_secs_f64(),
        });
        if step.stats.new_accuracy > best.1 + 1e-4 {
            best = (step.policy.clone(), step.stats.new_accuracy);
            stale = 0;
        } else {
            stale += 1;
        }
        iterations.push(step.stats);
        history.push(step.policy);
        if stale >= patience.max(1) {
            break;
        }
    }
    Ok(CapiOutcome {
        policy: best.0,
        best_accuracy: best.1,
        initial_accuracy,
        log,
        iterations,
        history,
    })
}
