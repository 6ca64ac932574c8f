//! Policy features and the linear action-ranking rule.
//!
//! The feature vector has three blocks: which descriptors the current node
//! already has (length `D`), a distance-weighted average of the label
//! distributions of finished neighbours (length `L`), and a count of finished
//! neighbours in 8 direction bins (`{up, down, left, right} × {before, after}`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::budget_engine::InferenceState;
use crate::error::{Error, Result};
use crate::seed;
use crate::svgraph::SupervoxelGraph;

pub const DIRECTION_BINS: usize = 8;

/// Inverse-distance weight with the coincident-centroid cap.
pub(crate) fn inverse_distance_weight(distance: f64) -> f64 {
    if distance > 1e-6 {
        1.0 / distance
    } else {
        1e6
    }
}

/// Run descriptor `t` on the current node, or stop working on it.
///
/// The derived ordering (descriptors by id, then `Finished`) is the
/// tie-break order used everywhere actions are ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Descriptor(usize),
    Finished,
}

impl Action {
    /// Row index into policy weights: descriptors first, `Finished` last.
    pub fn index(self, type_count: usize) -> usize {
        match self {
            Action::Descriptor(t) => t,
            Action::Finished => type_count,
        }
    }

    pub fn from_index(index: usize, type_count: usize) -> Self {
        if index >= type_count {
            Action::Finished
        } else {
            Action::Descriptor(index)
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Descriptor(t) => write!(f, "{t}"),
            Action::Finished => f.write_str("FINISHED"),
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "FINISHED" {
            return Ok(Action::Finished);
        }
        s.parse::<usize>()
            .map(Action::Descriptor)
            .map_err(|_| Error::data(format!("unknown action {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyFeatures {
    type_count: usize,
    label_count: usize,
    values: Vec<f64>,
}

impl PolicyFeatures {
    pub fn zeros(type_count: usize, label_count: usize) -> Self {
        PolicyFeatures {
            type_count,
            label_count,
            values: vec![0.0; type_count + label_count + DIRECTION_BINS],
        }
    }

    pub fn from_values(type_count: usize, label_count: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != type_count + label_count + DIRECTION_BINS {
            return Err(Error::data(format!(
                "feature vector has length {}, expected {}",
                values.len(),
                type_count + label_count + DIRECTION_BINS
            )));
        }
        Ok(PolicyFeatures {
            type_count,
            label_count,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn computed(&self) -> &[f64] {
        &self.values[..self.type_count]
    }

    pub fn neighbor_labels(&self) -> &[f64] {
        &self.values[self.type_count..self.type_count + self.label_count]
    }

    pub fn layout(&self) -> &[f64] {
        &self.values[self.type_count + self.label_count..]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PolicyFeatures {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

/// Direction bin of an offset: dominant axis in the (x, y) plane crossed with
/// the sign of the time offset (`Δt <= 0` is "before"). Exact |Δx| = |Δy|
/// ties go to `Right`.
pub fn direction_bin(dx: f64, dy: f64, dt: f64) -> usize {
    let dir = if dy.abs() > dx.abs() {
        if dy > 0.0 {
            Direction::Up
        } else {
            Direction::Down
        }
    } else if dx.abs() > dy.abs() && dx < 0.0 {
        Direction::Left
    } else {
        Direction::Right
    };
    let dir_index = match dir {
        Direction::Up => 0,
        Direction::Down => 1,
        Direction::Left => 2,
        Direction::Right => 3,
    };
    dir_index * 2 + usize::from(dt > 0.0)
}

/// φ(s) for the state's current node. O(degree).
pub fn features(state: &InferenceState, graph: &SupervoxelGraph, type_count: usize) -> PolicyFeatures {
    let label_count = graph.label_count();
    let mut out = PolicyFeatures::zeros(type_count, label_count);
    let Some(node) = state.current() else {
        return out;
    };
    let mask = state.mask(node);
    for t in mask.types().filter(|&t| t < type_count) {
        out.values[t] = 1.0;
    }
    let here = graph.node(node).centroid;
    let mut weight_total = 0.0;
    let mut mix = vec![0.0; label_count];
    for &j in graph.adj(node) {
        if !state.is_finished(j) {
            continue;
        }
        let there = graph.node(j).centroid;
        let bin = direction_bin(there[0] - here[0], there[1] - here[1], there[2] - here[2]);
        out.values[type_count + label_count + bin] += 1.0;
        if let Some(dist) = state.distribution(j) {
            let w = inverse_distance_weight(graph.centroid_distance(node, j));
            weight_total += w;
            for (m, p) in mix.iter_mut().zip(dist) {
                *m += w * p;
            }
        }
    }
    if weight_total > 0.0 {
        for (y, m) in mix.into_iter().enumerate() {
            out.values[type_count + y] = m / weight_total;
        }
    }
    out
}

/// Anything that maps features and an allowed action set to an action.
///
/// `allowed` is non-empty, sorted in tie-break order and always contains
/// `Finished`.
pub trait Policy: Sync {
    fn choose(&self, features: &PolicyFeatures, allowed: &[Action]) -> Action;
}

/// Linear ranking policy: one weight vector per action.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyWeights {
    type_count: usize,
    label_count: usize,
    rows: Vec<Vec<f64>>,
}

impl PolicyWeights {
    pub fn feature_len(type_count: usize, label_count: usize) -> usize {
        type_count + label_count + DIRECTION_BINS
    }

    pub fn zeros(type_count: usize, label_count: usize) -> Self {
        let width = Self::feature_len(type_count, label_count);
        PolicyWeights {
            type_count,
            label_count,
            rows: vec![vec![0.0; width]; type_count + 1],
        }
    }

    /// Standard-normal weights; the initial policy for policy iteration.
    pub fn random(type_count: usize, label_count: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value);
        let mut w = Self::zeros(type_count, label_count);
        for row in &mut w.rows {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        w
    }

    pub fn from_rows(type_count: usize, label_count: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = Self::feature_len(type_count, label_count);
        if rows.len() != type_count + 1 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::data(format!(
                "policy needs {} rows of length {width}",
                type_count + 1
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("policy weights must be finite"));
        }
        Ok(PolicyWeights {
            type_count,
            label_count,
            rows,
        })
    }

    pub fn type_count(&self) -> usize {
        self.type_count
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn row(&self, action: Action) -> &[f64] {
        &self.rows[action.index(self.type_count)]
    }

    pub fn row_mut(&mut self, action: Action) -> &mut [f64] {
        let k = action.index(self.type_count);
        &mut self.rows[k]
    }

    pub fn scale(&mut self, factor: f64) {
        self.rows.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn score(&self, action: Action, features: &PolicyFeatures) -> f64 {
        self.row(action)
            .iter()
            .zip(features.values())
            .map(|(w, x)| w * x)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PolicyFile {
            d: self.type_count,
            l: self.label_count,
            actions: (0..=self.type_count)
                .map(|k| {
                    let a = Action::from_index(k, self.type_count);
                    (a.to_string(), self.rows[k].clone())
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: PolicyFile = serde_json::from_str(text)?;
        let rows = (0..=file.d)
            .map(|k| {
                let key = Action::from_index(k, file.d).to_string();
                file.actions
                    .remove(&key)
                    .ok_or_else(|| Error::data(format!("policy is missing action {key}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = file.actions.keys().next() {
            return Err(Error::data(format!("policy has unknown action {extra}")));
        }
        Self::from_rows(file.d, file.l, rows)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "L")]
    l: usize,
    actions: BTreeMap<String, Vec<f64>>,
}

/// `argmax_a w_a · φ` over `allowed`; ties go to descriptors before
/// `Finished`, then to the lowest type id.
pub fn act(weights: &PolicyWeights, features: &PolicyFeatures, allowed: &[Action]) -> Result<Action> {
    let mut sorted = allowed.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(Action, f64)> = None;
    for a in sorted {
        if a.index(weights.type_count) > weights.type_count {
            return Err(Error::data(format!("action {a} is outside the policy's action space")));
        }
        let s = weights.score(a, features);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((a, s));
        }
    }
    best.map(|(a, _)| a)
        .ok_or_else(|| Error::contract("act needs a non-empty allowed set"))
}

impl Policy for PolicyWeights {
    fn choose(&self, features: &PolicyFeatures, allowed: &[Action]) -> Action {
        act(self, features, allowed).unwrap_or(Action::Finished)
    }
}

/// Runs the cheapest descriptor not yet computed; finishes a node only when
/// nothing else is allowed.
#[derive(Clone, Debug)]
pub struct ExhaustivePolicy {
    order: Vec<usize>,
}

impl ExhaustivePolicy {
    pub fn new(costs: &[u64]) -> Self {
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by_key(|&t| (costs[t], t));
        ExhaustivePolicy { order }
    }
}

impl Policy for ExhaustivePolicy {
    fn choose(&self, _features: &PolicyFeatures, allowed: &[Action]) -> Action {
        self.order
            .iter()
            .map(|&t| Action::Descriptor(t))
            .find(|a| allowed.contains(a))
            .unwrap_or(Action::Finished)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_actions(d: usize) -> Vec<Action> {
        (0..=d).map(|k| Action::from_index(k, d)).collect()
    }

    #[test]
    fn action_order_is_tie_break_order() {
        assert!(Action::Descriptor(0) < Action::Descriptor(3));
        assert!(Action::Descriptor(7) < Action::Finished);
        assert_eq!("FINISHED".parse::<Action>().unwrap(), Action::Finished);
        assert_eq!("2".parse::<Action>().unwrap(), Action::Descriptor(2));
        assert!("x".parse::<Action>().is_err());
    }

    #[test]
    fn zero_weights_pick_type_zero() {
        let w = PolicyWeights::zeros(5, 4);
        let phi = PolicyFeatures::zeros(5, 4);
        assert_eq!(act(&w, &phi, &all_actions(5)).unwrap(), Action::Descriptor(0));
        assert_eq!(act(&w, &phi, &[Action::Finished]).unwrap(), Action::Finished);
        assert!(act(&w, &phi, &[]).is_err());
    }

    #[test]
    fn strictly_largest_finished_wins() {
        let mut w = PolicyWeights::zeros(3, 2);
        w.row_mut(Action::Finished)[0] = 1.0;
        let mut values = vec![0.0; 13];
        values[0] = 1.0;
        let phi = PolicyFeatures::from_values(3, 2, values).unwrap();
        assert_eq!(act(&w, &phi, &all_actions(3)).unwrap(), Action::Finished);
    }

    #[test]
    fn excluded_action_is_never_returned() {
        let mut w = PolicyWeights::zeros(3, 2);
        w.row_mut(Action::Descriptor(1))[3] = 10.0;
        let mut values = vec![0.0; 13];
        values[3] = 1.0;
        let phi = PolicyFeatures::from_values(3, 2, values).unwrap();
        let allowed = [Action::Descriptor(0), Action::Descriptor(2), Action::Finished];
        assert_eq!(act(&w, &phi, &allowed).unwrap(), Action::Descriptor(0));
        assert_eq!(act(&w, &phi, &all_actions(3)).unwrap(), Action::Descriptor(1));
    }

    #[test]
    fn direction_bins() {
        // up + before: neighbour above and earlier
        assert_eq!(direction_bin(0.0, 1.0, -1.0), 0);
        assert_eq!(direction_bin(0.1, -1.0, 0.0), 2);
        assert_eq!(direction_bin(-1.0, 0.2, 1.0), 5);
        assert_eq!(direction_bin(1.0, 0.0, 0.0), 6);
        assert_eq!(direction_bin(0.0, 0.0, 1.0), 7);
        assert_eq!(direction_bin(0.5, -0.5, 0.0), 6);
    }

    #[test]
    fn exhaustive_prefers_cheapest() {
        let p = ExhaustivePolicy::new(&[5, 1, 3]);
        let phi = PolicyFeatures::zeros(3, 2);
        assert_eq!(p.choose(&phi, &all_actions(3)), Action::Descriptor(1));
        assert_eq!(p.choose(&phi, &[Action::Descriptor(0), Action::Finished]), Action::Descriptor(0));
        assert_eq!(p.choose(&phi, &[Action::Finished]), Action::Finished);
    }

    #[test]
    fn json_round_trip() {
        let w = PolicyWeights::random(4, 3, 9);
        assert_eq!(PolicyWeights::from_json(&w.to_json().unwrap()).unwrap(), w);
        assert!(PolicyWeights::from_json("{\"D\":1,\"L\":2,\"actions\":{}}").is_err());
    }
}
