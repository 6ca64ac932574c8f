//! Learning: rewards, rollouts, policy iteration, the action ranker and the
//! three baselines.

mod baselines;
mod capi;
mod qlearn;
mod ranker;
mod rollout;

pub use baselines::{baseline1, baseline2, run_global_subset};
pub use capi::{
    capi_iterate, capi_train, evaluate_policy, mean_accuracy, CapiConfig, CapiExample, CapiIteration,
    CapiOutcome, CapiStats, CapiTrainingSet, IterationLog,
};
pub use qlearn::{qlearn_baseline3, QHyper, QOutcome, QTable};
pub use ranker::{train_ranker, RankerHyper};
pub use rollout::{rollout_score, rollout_score_cached, RewardCache, RolloutResult};

use crate::error::{Error, Result};
use crate::svgraph::Label;

/// Fraction of nodes labeled correctly, optionally weighted by voxel count.
pub fn hamming_accuracy(labeling: &[Label], truth: &[Label], voxel_counts: &[u32], weighted: bool) -> Result<f64> {
    if labeling.len() != truth.len() || (weighted && voxel_counts.len() != truth.len()) {
        return Err(Error::data(format!(
            "labeling has {} entries, truth {}, voxel counts {}",
            labeling.len(),
            truth.len(),
            voxel_counts.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::data("cannot score an empty labeling"));
    }
    if weighted {
        let (mut hit, mut total) = (0u64, 0u64);
        for ((a, b), &w) in labeling.iter().zip(truth).zip(voxel_counts) {
            total += u64::from(w);
            if a == b {
                hit += u64::from(w);
            }
        }
        Ok(hit as f64 / total as f64)
    } else {
        let hit = labeling.iter().zip(truth).filter(|(a, b)| a == b).count();
        Ok(hit as f64 / truth.len() as f64)
    }
}
