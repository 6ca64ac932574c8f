//! Budgeted inference: a clocked loop that lets a policy decide which
//! descriptors to run on which node, then labels the video with the CRF.

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier_bank::{ClassifierBank, SubsetMask};
use crate::crf::{CrfInstance, CrfModel, DescriptorContext};
use crate::error::{Error, Result};
use crate::learn::hamming_accuracy;
use crate::policy::{self, inverse_distance_weight, Action, Policy, PolicyFeatures};
use crate::seed;
use crate::svgraph::{Label, NodeId, SupervoxelGraph, Video};

/// Share of nodes placed in the initial candidate set.
pub const INITIAL_CANDIDATE_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectStrategy {
    Random,
    NeighborConfidence,
}

impl FromStr for SelectStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "rnd" => Ok(SelectStrategy::Random),
            "neighbor-confidence" | "neighborconfidence" | "nhb" => Ok(SelectStrategy::NeighborConfidence),
            _ => Err(Error::config(format!("unknown select strategy {s:?}"))),
        }
    }
}

/// A budget either in absolute cost units or as a fraction of the cost of
/// running every descriptor type on every node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Units(u64),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, video: &Video) -> u64 {
        match self {
            Budget::Units(u) => u,
            Budget::Fraction(f) => {
                let full = video.full_cost(0..video.descriptors.type_count());
                (f * full as f64 + 1e-9).floor() as u64
            }
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Units(u) => write!(f, "{u}"),
            Budget::Fraction(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// `"480"` is units, `"0.2"` and `"20%"` are fractions.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("invalid budget {s:?}"));
        if s.starts_with('-') {
            return Err(Error::config(format!("budget must be non-negative, got {s}")));
        }
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct.trim().parse().map_err(|_| bad())?;
            return Budget::fraction(v / 100.0);
        }
        if s.contains(['.', 'e', 'E']) {
            let v: f64 = s.parse().map_err(|_| bad())?;
            return Budget::fraction(v);
        }
        s.parse().map(Budget::Units).map_err(|_| bad())
    }
}

impl Budget {
    fn fraction(v: f64) -> Result<Self> {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::config(format!("budget fraction must be non-negative, got {v}")));
        }
        Ok(Budget::Fraction(v))
    }
}

/// Everything a run needs besides the policy and the budget.
#[derive(Clone, Copy)]
pub struct Environment<'a> {
    pub video: &'a Video,
    pub classifiers: &'a ClassifierBank,
    pub crf: &'a CrfModel,
    pub strategy: SelectStrategy,
    /// Descriptor types the policy may run.
    pub types: SubsetMask,
    /// Seed for the final α-expansion label order.
    pub inference_seed: u64,
    /// Voxel-weighted accuracy instead of per-node accuracy.
    pub weighted: bool,
}

/// An [`Environment`] minus the video: what stays fixed across a corpus.
#[derive(Clone, Copy)]
pub struct Setting<'a> {
    pub classifiers: &'a ClassifierBank,
    pub crf: &'a CrfModel,
    pub strategy: SelectStrategy,
    pub types: SubsetMask,
    pub inference_seed: u64,
    pub weighted: bool,
}

impl<'a> Setting<'a> {
    pub fn env(&self, video: &'a Video) -> Environment<'a> {
        Environment {
            video,
            classifiers: self.classifiers,
            crf: self.crf,
            strategy: self.strategy,
            types: self.types,
            inference_seed: self.inference_seed,
            weighted: self.weighted,
        }
    }
}

impl Environment<'_> {
    fn graph(&self) -> &SupervoxelGraph {
        &self.video.graph
    }

    fn validate(&self) -> Result<()> {
        let d = self.video.descriptors.type_count();
        if self.classifiers.type_count() != d {
            return Err(Error::data(format!(
                "classifier bank expects {} descriptor types, video has {d}",
                self.classifiers.type_count()
            )));
        }
        if self.classifiers.label_count() != self.graph().label_count() || self.crf.labels != self.graph().label_count() {
            return Err(Error::data("label counts of graph, classifiers and CRF disagree"));
        }
        if !self.types.is_subset_of(SubsetMask::full(d)) || !self.crf.types.is_subset_of(SubsetMask::full(d)) {
            return Err(Error::config("descriptor types exceed those present in the video"));
        }
        Ok(())
    }

    /// Accuracy of `labeling` against the video's truth, if it has one.
    pub fn accuracy(&self, labeling: &[Label]) -> Option<f64> {
        let truth = self.graph().truth().ok()?;
        hamming_accuracy(labeling, &truth, &self.graph().voxel_counts(), self.weighted).ok()
    }

    /// CRF labeling given each node's computed mask and classifier output.
    pub fn label(&self, masks: &[SubsetMask], computed: &[Option<Vec<f64>>]) -> Result<Vec<Label>> {
        let dists = interpolate_unaries(self.graph(), computed)?;
        let ctx = DescriptorContext {
            bank: &self.video.descriptors,
            masks,
            classifiers: self.classifiers,
        };
        let potentials = CrfInstance::new(self.crf, self.graph(), &dists, &ctx)?.into_potentials(self.crf);
        Ok(potentials.expand(&potentials.unary_argmax(), self.inference_seed).labeling)
    }

    /// Label with the given mask on every node (no budget).
    pub fn label_with_mask(&self, mask: SubsetMask) -> Result<Vec<Label>> {
        let n = self.graph().len();
        let computed = (0..n)
            .map(|i| {
                if mask.is_empty() {
                    Ok(None)
                } else {
                    self.classifiers.predict_node(mask, &self.video.descriptors, i).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.label(&vec![mask; n], &computed)
    }

    /// Unbounded CRF: every allowed type on every node.
    pub fn unbounded_labeling(&self) -> Result<Vec<Label>> {
        self.label_with_mask(self.types)
    }
}

/// The inference state `(i, b, C, F, D)`.
#[derive(Clone, Debug)]
pub struct InferenceState {
    current: Option<NodeId>,
    remaining: u64,
    candidates: BTreeSet<NodeId>,
    finished: Vec<bool>,
    masks: Vec<SubsetMask>,
    labels: usize,
    /// Row-major classifier outputs; a row is meaningful only when the mask is non-empty.
    outputs: Vec<f64>,
    /// Max probability per node (1/L before any descriptor).
    confidence: Vec<f64>,
}

impl InferenceState {
    pub fn current(&self) -> Option<NodeId> {
        self.current
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    pub fn candidates(&self) -> &BTreeSet<NodeId> {
        &self.candidates
    }

    pub fn is_finished(&self, node: NodeId) -> bool {
        self.finished[node]
    }

    pub fn finished_count(&self) -> usize {
        self.finished.iter().filter(|&&f| f).count()
    }

    pub fn mask(&self, node: NodeId) -> SubsetMask {
        self.masks[node]
    }

    pub fn masks(&self) -> &[SubsetMask] {
        &self.masks
    }

    /// Classifier output for the node's current mask, if it has run anything.
    pub fn distribution(&self, node: NodeId) -> Option<&[f64]> {
        if self.masks[node].is_empty() {
            None
        } else {
            Some(&self.outputs[node * self.labels..(node + 1) * self.labels])
        }
    }

    pub fn computed(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.masks.len())
            .map(|i| self.distribution(i).map(<[f64]>::to_vec))
            .collect()
    }

    fn confidence(&self, node: NodeId) -> f64 {
        self.confidence[node]
    }
}

/// `1 − mean max-probability` over finished neighbours.
pub fn neighbor_priority(state: &InferenceState, graph: &SupervoxelGraph, node: NodeId) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for &j in graph.adj(node) {
        if state.is_finished(j) {
            sum += state.confidence(j);
            count += 1;
        }
    }
    if count == 0 {
        1.0 - 1.0 / state.labels as f64
    } else {
        1.0 - sum / count as f64
    }
}

/// Next node to work on. Highest priority wins; ties go to the lowest id.
pub fn select_next(
    state: &InferenceState,
    graph: &SupervoxelGraph,
    strategy: SelectStrategy,
    rng: &mut seed::Rng,
) -> Result<NodeId> {
    if state.candidates.is_empty() {
        return Err(Error::contract("select_next needs a non-empty candidate set"));
    }
    match strategy {
        SelectStrategy::Random => {
            let k = rng.random_range(0..state.candidates.len());
            Ok(*state.candidates.iter().nth(k).expect("index within candidate set"))
        }
        SelectStrategy::NeighborConfidence => {
            let mut best = (f64::NEG_INFINITY, 0);
            for &c in &state.candidates {
                let p = neighbor_priority(state, graph, c);
                if p > best.0 {
                    best = (p, c);
                }
            }
            Ok(best.1)
        }
    }
}

/// Fill nodes without classifier output from their neighbours using
/// inverse-centroid-distance weights, pass after pass until nothing changes;
/// whatever stays uncovered gets the uniform distribution.
pub fn interpolate_unaries(graph: &SupervoxelGraph, computed: &[Option<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if computed.len() != graph.len() {
        return Err(Error::data(format!(
            "got {} distributions for {} nodes",
            computed.len(),
            graph.len()
        )));
    }
    let l = graph.label_count();
    if computed.iter().flatten().any(|d| d.len() != l) {
        return Err(Error::data(format!("every distribution must have length L={l}")));
    }
    let mut filled: Vec<Option<Vec<f64>>> = computed.to_vec();
    loop {
        let mut updates = Vec::new();
        for i in 0..graph.len() {
            if filled[i].is_some() {
                continue;
            }
            let mut total = 0.0;
            let mut mix = vec![0.0; l];
            for &j in graph.adj(i) {
                if let Some(d) = &filled[j] {
                    let w = inverse_distance_weight(graph.centroid_distance(i, j));
                    total += w;
                    for (m, p) in mix.iter_mut().zip(d) {
                        *m += w * p;
                    }
                }
            }
            if total > 0.0 {
                mix.iter_mut().for_each(|m| *m /= total);
                updates.push((i, mix));
            }
        }
        if updates.is_empty() {
            break;
        }
        for (i, d) in updates {
            filled[i] = Some(d);
        }
    }
    Ok(filled
        .into_iter()
        .map(|d| d.unwrap_or_else(|| vec![1.0 / l as f64; l]))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub step: usize,
    pub node: NodeId,
    pub action: Action,
    pub cost: u64,
    pub remaining: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub steps: Vec<TraceStep>,
    pub labeling: Vec<Label>,
    pub accuracy: Option<f64>,
    pub budget: u64,
}

impl RunTrace {
    pub fn spent(&self) -> u64 {
        self.steps.iter().map(|s| s.cost).sum()
    }
}

/// One run of the inference loop, resumable and cheap to clone so rollouts
/// can branch from any decision point.
#[derive(Clone)]
pub struct Episode {
    state: InferenceState,
    budget: u64,
    rng: seed::Rng,
    steps: Vec<TraceStep>,
}

impl Episode {
    /// Fresh state: a seeded random `max(1, ⌈5%·|V|⌉)` candidate set.
    pub fn start(env: &Environment, budget: u64, seed_value: u64) -> Result<Self> {
        env.validate()?;
        let n = env.graph().len();
        let mut rng = seed::rng(seed_value);
        let size = ((INITIAL_CANDIDATE_FRACTION * n as f64).ceil() as usize).clamp(1, n.max(1));
        let candidates = if n == 0 {
            BTreeSet::new()
        } else {
            rand::seq::index::sample(&mut rng, n, size).into_iter().collect()
        };
        let labels = env.graph().label_count();
        Ok(Episode {
            state: InferenceState {
                current: None,
                remaining: budget,
                candidates,
                finished: vec![false; n],
                masks: vec![SubsetMask::EMPTY; n],
                labels,
                outputs: vec![0.0; n * labels],
                confidence: vec![1.0 / labels as f64; n],
            },
            budget,
            rng,
            steps: Vec::new(),
        })
    }

    pub fn state(&self) -> &InferenceState {
        &self.state
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn spent(&self) -> u64 {
        self.budget - self.state.remaining
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    /// Replace the selection RNG; rollout branches use this for fresh draws.
    pub fn reseed(&mut self, seed_value: u64) {
        self.rng = seed::rng(seed_value);
    }

    fn affordable<'e>(&self, env: &Environment<'e>, node: NodeId) -> impl Iterator<Item = usize> + use<'e> {
        let mask = self.state.masks[node];
        let costs = env.video.descriptors.specs();
        let remaining = self.state.remaining;
        env.types
            .types()
            .filter(move |&t| !mask.contains(t) && costs[t].cost <= remaining)
    }

    fn has_work(&self, env: &Environment) -> bool {
        self.state
            .candidates
            .iter()
            .any(|&c| self.affordable(env, c).next().is_some())
    }

    /// Pick the next node to decide on. Returns `false` once the run is over:
    /// no candidates left or none of them has an affordable descriptor.
    pub fn advance(&mut self, env: &Environment) -> Result<bool> {
        if self.state.current.is_some() {
            return Ok(true);
        }
        if !self.has_work(env) {
            return Ok(false);
        }
        let node = select_next(&self.state, env.graph(), env.strategy, &mut self.rng)?;
        self.state.current = Some(node);
        Ok(true)
    }

    /// Affordable un-run descriptors of the current node, then `Finished`.
    pub fn allowed(&self, env: &Environment) -> Vec<Action> {
        let mut out: Vec<Action> = match self.state.current {
            Some(node) => self.affordable(env, node).map(Action::Descriptor).collect(),
            None => Vec::new(),
        };
        out.push(Action::Finished);
        out
    }

    pub fn features(&self, env: &Environment) -> PolicyFeatures {
        policy::features(&self.state, env.graph(), env.video.descriptors.type_count())
    }

    pub fn apply(&mut self, env: &Environment, action: Action) -> Result<()> {
        let node = self
            .state
            .current
            .ok_or_else(|| Error::contract("apply needs a selected node; call advance first"))?;
        let cost = match action {
            Action::Finished => {
                self.state.candidates.remove(&node);
                self.state.finished[node] = true;
                for &j in env.graph().adj(node) {
                    if !self.state.finished[j] {
                        self.state.candidates.insert(j);
                    }
                }
                0
            }
            Action::Descriptor(t) => {
                if !self.affordable(env, node).any(|a| a == t) {
                    return Err(Error::contract(format!("descriptor {t} is not allowed at node {node}")));
                }
                let cost = env.video.descriptors.cost(t);
                self.state.remaining -= cost;
                let mask = self.state.masks[node].with(t);
                self.state.masks[node] = mask;
                let dist = env.classifiers.predict_node(mask, &env.video.descriptors, node)?;
                let l = self.state.labels;
                self.state.outputs[node * l..(node + 1) * l].copy_from_slice(&dist);
                self.state.confidence[node] = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                cost
            }
        };
        self.steps.push(TraceStep {
            step: self.steps.len(),
            node,
            action,
            cost,
            remaining: self.state.remaining,
        });
        self.state.current = None;
        Ok(())
    }

    /// Let `policy` act until the run is over. A lone `Finished` is forced
    /// without consulting the policy.
    pub fn run(&mut self, env: &Environment, policy: &dyn Policy) -> Result<()> {
        while self.advance(env)? {
            let allowed = self.allowed(env);
            let action = if allowed.len() == 1 {
                Action::Finished
            } else {
                let a = policy.choose(&self.features(env), &allowed);
                if !allowed.contains(&a) {
                    return Err(Error::contract(format!("policy chose disallowed action {a}")));
                }
                a
            };
            self.apply(env, action)?;
        }
        Ok(())
    }

    /// Interpolate, run α-expansion and score.
    pub fn finish(&self, env: &Environment) -> Result<RunTrace> {
        let labeling = env.label(&self.state.masks, &self.state.computed())?;
        Ok(RunTrace {
            accuracy: env.accuracy(&labeling),
            steps: self.steps.clone(),
            labeling,
            budget: self.budget,
        })
    }

    /// Accuracy of the final labeling without keeping the trace.
    pub fn final_accuracy(&self, env: &Environment) -> Result<f64> {
        let labeling = env.label(&self.state.masks, &self.state.computed())?;
        env.accuracy(&labeling)
            .ok_or_else(|| Error::data("video has no ground truth"))
    }
}

pub fn run_budgeted_inference(
    env: &Environment,
    policy: &dyn Policy,
    budget: u64,
    seed_value: u64,
) -> Result<(Vec<Label>, RunTrace)> {
    let mut episode = Episode::start(env, budget, seed_value)?;
    episode.run(env, policy)?;
    let trace = episode.finish(env)?;
    Ok((trace.labeling.clone(), trace))
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    step: usize,
    node: NodeId,
    action: String,
    cost: u64,
    remaining: u64,
}

pub fn write_trace_csv<W: io::Write>(steps: &[TraceStep], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for s in steps {
        writer.serialize(TraceRecord {
            step: s.step,
            node: s.node,
            action: s.action.to_string(),
            cost: s.cost,
            remaining: s.remaining,
        })?;
    }
    if steps.is_empty() {
        writer.write_record(["step", "node", "action", "cost", "remaining"])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: io::Read>(input: R) -> Result<Vec<TraceStep>> {
    let mut reader = csv::Reader::from_reader(input);
    reader
        .deserialize::<TraceRecord>()
        .map(|r| {
            let r = r?;
            Ok(TraceStep {
                step: r.step,
                node: r.node,
                action: r.action.parse()?,
                cost: r.cost,
                remaining: r.remaining,
            })
        })
        .collect()
}
