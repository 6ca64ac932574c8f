use rand::seq::SliceRandom;

use crate::budget_engine::{Environment, RunTrace, TraceStep};
use crate::classifier_bank::SubsetMask;
use crate::error::Result;
use crate::policy::Action;
use crate::seed;
use crate::svgraph::NodeId;

struct Ledger {
    masks: Vec<SubsetMask>,
    remaining: u64,
    budget: u64,
    steps: Vec<TraceStep>,
}

impl Ledger {
    fn new(nodes: usize, budget: u64) -> Self {
        Ledger {
            masks: vec![SubsetMask::EMPTY; nodes],
            remaining: budget,
            budget,
            steps: Vec::new(),
        }
    }

    fn charge(&mut self, node: NodeId, t: usize, cost: u64) -> bool {
        if cost > self.remaining {
            return false;
        }
        self.remaining -= cost;
        self.masks[node] = self.masks[node].with(t);
        self.steps.push(TraceStep {
            step: self.steps.len(),
            node,
            action: Action::Descriptor(t),
            cost,
            remaining: self.remaining,
        });
        true
    }

    fn finish(self, env: &Environment) -> Result<RunTrace> {
        let computed = self
            .masks
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                if m.is_empty() {
                    Ok(None)
                } else {
                    env.classifiers.predict_node(m, &env.video.descriptors, i).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let labeling = env.label(&self.masks, &computed)?;
        Ok(RunTrace {
            accuracy: env.accuracy(&labeling),
            labeling,
            steps: self.steps,
            budget: self.budget,
        })
    }
}

/// Random order of descriptor types, each run on every node in id order,
/// until the first node that can no longer be paid for.
pub fn baseline1(env: &Environment, budget: u64, seed_value: u64) -> Result<RunTrace> {
    let n = env.video.graph.len();
    let mut types: Vec<usize> = env.types.types().collect();
    types.shuffle(&mut seed::rng(seed_value));
    let mut ledger = Ledger::new(n, budget);
    'outer: for t in types {
        let cost = env.video.descriptors.cost(t);
        for node in 0..n {
            if !ledger.charge(node, t, cost) {
                break 'outer;
            }
        }
    }
    ledger.finish(env)
}

/// All descriptor types on a random node subset of the largest affordable size.
pub fn baseline2(env: &Environment, budget: u64, seed_value: u64) -> Result<RunTrace> {
    let n = env.video.graph.len();
    let per_node: u64 = env.types.types().map(|t| env.video.descriptors.cost(t)).sum();
    let k = if per_node == 0 {
        n
    } else {
        ((budget / per_node) as usize).min(n)
    };
    let mut nodes = rand::seq::index::sample(&mut seed::rng(seed_value), n, k).into_vec();
    nodes.sort_unstable();
    let mut ledger = Ledger::new(n, budget);
    for node in nodes {
        for t in env.types.types() {
            let paid = ledger.charge(node, t, env.video.descriptors.cost(t));
            debug_assert!(paid);
        }
    }
    ledger.finish(env)
}

/// A fixed subset on every node, as far as the budget reaches.
pub fn run_global_subset(env: &Environment, subset: SubsetMask, budget: u64) -> Result<RunTrace> {
    let n = env.video.graph.len();
    let mut ledger = Ledger::new(n, budget);
    'outer: for t in subset.types() {
        let cost = env.video.descriptors.cost(t);
        for node in 0..n {
            if !ledger.charge(node, t, cost) {
                break 'outer;
            }
        }
    }
    ledger.finish(env)
}
