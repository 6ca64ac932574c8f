//! Pairwise CRF over a supervoxel graph.
//!
//! The score of a labeling is
//! `Σ_i w_u · ψ_u(i, y_i) + Σ_(i,j) w_p · ψ_p(i, j, y_i, y_j)` where `ψ_u` is
//! one-hot at `y_i` holding the classifier probability `H(i)[y_i]`, and
//! `ψ_p` is one-hot at `y_i·L + y_j` holding a Gaussian similarity between
//! the two nodes' descriptors. Descriptor types a node has not computed are
//! replaced by the class mean for the label being scored.

mod maxflow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier_bank::{ClassifierBank, SubsetMask};
use crate::error::{Error, Result};
use crate::seed;
use crate::svgraph::{DescriptorBank, Label, NodeId, SupervoxelGraph, Video};

use maxflow::FlowGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfModel {
    #[serde(rename = "L")]
    pub labels: usize,
    pub w_u: Vec<f64>,
    pub w_p: Vec<f64>,
    pub sigma: f64,
    /// Descriptor types the pairwise similarity is computed over.
    pub types: SubsetMask,
}

impl CrfModel {
    pub fn zeros(labels: usize, sigma: f64, types: SubsetMask) -> Self {
        CrfModel {
            labels,
            w_u: vec![0.0; labels],
            w_p: vec![0.0; labels * labels],
            sigma,
            types,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labels;
        if l == 0 || self.w_u.len() != l || self.w_p.len() != l * l {
            return Err(Error::data(format!(
                "CRF weights have lengths {} and {} for L={l}",
                self.w_u.len(),
                self.w_p.len()
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::data(format!("bandwidth must be positive, got {}", self.sigma)));
        }
        if self.w_u.iter().chain(&self.w_p).any(|w| !w.is_finite()) {
            return Err(Error::data("CRF weights must be finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: CrfModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// `ψ_u` for label `y`: zero except `dist[y]` at index `y`.
pub fn unary_feature(dist: &[f64], y: Label) -> Result<Vec<f64>> {
    if y >= dist.len() {
        return Err(Error::data(format!("label {y} out of range for L={}", dist.len())));
    }
    let mut out = vec![0.0; dist.len()];
    out[y] = dist[y];
    Ok(out)
}

pub fn similarity(d_i: &[f64], d_j: &[f64], sigma: f64) -> Result<f64> {
    if d_i.len() != d_j.len() {
        return Err(Error::data(format!(
            "descriptor lengths differ: {} vs {}",
            d_i.len(),
            d_j.len()
        )));
    }
    let sq: f64 = d_i.iter().zip(d_j).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((-sq / (2.0 * sigma * sigma)).exp())
}

/// `ψ_p`: length `L²`, one nonzero similarity at `y_i·L + y_j`.
pub fn pairwise_feature(
    d_i: &[f64],
    d_j: &[f64],
    y_i: Label,
    y_j: Label,
    labels: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    if y_i >= labels || y_j >= labels {
        return Err(Error::data(format!("labels ({y_i}, {y_j}) out of range for L={labels}")));
    }
    let mut out = vec![0.0; labels * labels];
    out[y_i * labels + y_j] = similarity(d_i, d_j, sigma)?;
    Ok(out)
}

/// Which descriptors each node has, plus the means used for the rest.
#[derive(Clone, Copy)]
pub struct DescriptorContext<'a> {
    pub bank: &'a DescriptorBank,
    pub masks: &'a [SubsetMask],
    pub classifiers: &'a ClassifierBank,
}

impl DescriptorContext<'_> {
    /// Concatenated descriptor of `node` over `types`, substituting the class
    /// mean for `label` wherever the node has not computed a type.
    pub fn aligned(&self, node: NodeId, label: Label, types: SubsetMask) -> Vec<f64> {
        types
            .types()
            .flat_map(|t| {
                if self.masks[node].contains(t) {
                    self.bank.get(node, t)
                } else {
                    self.classifiers.class_mean(t, label)
                }
                .iter()
                .copied()
            })
            .collect()
    }
}

fn check_inputs(model: &CrfModel, graph: &SupervoxelGraph, distributions: &[Vec<f64>], ctx: &DescriptorContext) -> Result<()> {
    model.validate()?;
    let n = graph.len();
    if distributions.len() != n || ctx.masks.len() != n || ctx.bank.node_count() != n {
        return Err(Error::data("distributions, masks and descriptors must cover every node"));
    }
    if distributions.iter().any(|d| d.len() != model.labels) {
        return Err(Error::data(format!("every distribution must have length L={}", model.labels)));
    }
    Ok(())
}

/// Reference score: builds every `ψ_u` and `ψ_p` vector explicitly.
pub fn crf_score(
    model: &CrfModel,
    graph: &SupervoxelGraph,
    distributions: &[Vec<f64>],
    ctx: &DescriptorContext,
    labeling: &[Label],
) -> Result<f64> {
    check_inputs(model, graph, distributions, ctx)?;
    if labeling.len() != graph.len() {
        return Err(Error::data(format!(
            "labeling covers {} of {} nodes",
            labeling.len(),
            graph.len()
        )));
    }
    let dot = |w: &[f64], psi: &[f64]| w.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>();
    let mut score = 0.0;
    for (i, &y) in labeling.iter().enumerate() {
        score += dot(&model.w_u, &unary_feature(&distributions[i], y)?);
    }
    for &(i, j) in graph.edges() {
        let (yi, yj) = (labeling[i], labeling[j]);
        let di = ctx.aligned(i, yi, model.types);
        let dj = ctx.aligned(j, yj, model.types);
        score += dot(&model.w_p, &pairwise_feature(&di, &dj, yi, yj, model.labels, model.sigma)?);
    }
    Ok(score)
}

/// Weight-independent part of a CRF problem: distributions and per-edge
/// similarity tables for every label pair.
#[derive(Clone, Debug)]
pub struct CrfInstance {
    labels: usize,
    dist: Vec<f64>,
    edges: Vec<(NodeId, NodeId)>,
    sim: Vec<f64>,
    incident: Vec<Vec<usize>>,
}

impl CrfInstance {
    pub fn new(
        model: &CrfModel,
        graph: &SupervoxelGraph,
        distributions: &[Vec<f64>],
        ctx: &DescriptorContext,
    ) -> Result<Self> {
        check_inputs(model, graph, distributions, ctx)?;
        let l = model.labels;
        let inv = 1.0 / (2.0 * model.sigma * model.sigma);
        let sqd = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        let kernel = |x: &[f64], y: &[f64]| (-sqd(x, y) * inv).exp();
        // The kernel factorises over types, so each factor is computed once:
        // mean-to-mean per type, node-to-mean per computed (node, type).
        let types: Vec<usize> = model.types.types().collect();
        let means: Vec<Vec<f64>> = types
            .iter()
            .map(|&t| {
                (0..l * l)
                    .map(|k| kernel(ctx.classifiers.class_mean(t, k / l), ctx.classifiers.class_mean(t, k % l)))
                    .collect()
            })
            .collect();
        let n = graph.len();
        let mut to_mean = vec![0.0; n * types.len() * l];
        for i in 0..n {
            for (ti, &t) in types.iter().enumerate() {
                if ctx.masks[i].contains(t) {
                    let row = &mut to_mean[(i * types.len() + ti) * l..][..l];
                    for (b, r) in row.iter_mut().enumerate() {
                        *r = kernel(ctx.bank.get(i, t), ctx.classifiers.class_mean(t, b));
                    }
                }
            }
        }
        let mut sim = Vec::with_capacity(graph.edges().len() * l * l);
        let mut table = vec![0.0; l * l];
        for &(i, j) in graph.edges() {
            table.iter_mut().for_each(|v| *v = 1.0);
            for (ti, &t) in types.iter().enumerate() {
                let row_i = &to_mean[(i * types.len() + ti) * l..][..l];
                let row_j = &to_mean[(j * types.len() + ti) * l..][..l];
                match (ctx.masks[i].contains(t), ctx.masks[j].contains(t)) {
                    (true, true) => {
                        let f = kernel(ctx.bank.get(i, t), ctx.bank.get(j, t));
                        table.iter_mut().for_each(|v| *v *= f);
                    }
                    (true, false) => table.iter_mut().enumerate().for_each(|(k, v)| *v *= row_i[k % l]),
                    (false, true) => table.iter_mut().enumerate().for_each(|(k, v)| *v *= row_j[k / l]),
                    (false, false) => table.iter_mut().zip(&means[ti]).for_each(|(v, m)| *v *= m),
                }
            }
            sim.extend_from_slice(&table);
        }
        let mut incident = vec![Vec::new(); graph.len()];
        for (e, &(i, j)) in graph.edges().iter().enumerate() {
            incident[i].push(e);
            incident[j].push(e);
        }
        Ok(CrfInstance {
            labels: l,
            dist: distributions.concat(),
            edges: graph.edges().to_vec(),
            sim,
            incident,
        })
    }

    pub fn len(&self) -> usize {
        self.incident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incident.is_empty()
    }

    /// Summed joint feature `Ψ(labeling) = (Σ ψ_u, Σ ψ_p)`.
    pub fn joint_feature(&self, labeling: &[Label]) -> (Vec<f64>, Vec<f64>) {
        let l = self.labels;
        let mut unary = vec![0.0; l];
        let mut pair = vec![0.0; l * l];
        for (i, &y) in labeling.iter().enumerate() {
            unary[y] += self.dist[i * l + y];
        }
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let k = labeling[i] * l + labeling[j];
            pair[k] += self.sim[e * l * l + k];
        }
        (unary, pair)
    }

    pub fn potentials(&self, model: &CrfModel) -> Potentials {
        self.clone().into_potentials(model)
    }

    pub fn into_potentials(self, model: &CrfModel) -> Potentials {
        let l = self.labels;
        let unary = self
            .dist
            .iter()
            .enumerate()
            .map(|(k, p)| model.w_u[k % l] * p)
            .collect();
        let pair = self
            .sim
            .iter()
            .enumerate()
            .map(|(k, s)| model.w_p[k % (l * l)] * s)
            .collect();
        Potentials {
            labels: l,
            unary,
            edges: self.edges,
            pair,
            incident: self.incident,
        }
    }
}

/// Weighted score tables: `unary[i·L + y]` and `pair[e·L² + a·L + b]`.
#[derive(Clone, Debug)]
pub struct Potentials {
    labels: usize,
    unary: Vec<f64>,
    edges: Vec<(NodeId, NodeId)>,
    pair: Vec<f64>,
    incident: Vec<Vec<usize>>,
}

/// Result of α-expansion: the labeling and the score after each accepted move
/// (the first entry is the initial score).
#[derive(Clone, Debug)]
pub struct Expansion {
    pub labeling: Vec<Label>,
    pub trace: Vec<f64>,
}

const MAX_SWEEPS: usize = 100;

impl Potentials {
    /// Build directly from tables; used by tests and synthetic instances.
    pub fn from_tables(
        labels: usize,
        unary: Vec<f64>,
        edges: Vec<(NodeId, NodeId)>,
        pair: Vec<f64>,
    ) -> Result<Self> {
        if labels == 0 || !unary.len().is_multiple_of(labels) || pair.len() != edges.len() * labels * labels {
            return Err(Error::data("potential tables have inconsistent sizes"));
        }
        let n = unary.len() / labels;
        let mut incident = vec![Vec::new(); n];
        for (e, &(i, j)) in edges.iter().enumerate() {
            if i >= n || j >= n || i == j {
                return Err(Error::data(format!("bad edge ({i}, {j})")));
            }
            incident[i].push(e);
            incident[j].push(e);
        }
        Ok(Potentials {
            labels,
            unary,
            edges,
            pair,
            incident,
        })
    }

    pub fn len(&self) -> usize {
        self.incident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incident.is_empty()
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    fn u(&self, i: NodeId, y: Label) -> f64 {
        self.unary[i * self.labels + y]
    }

    fn p(&self, e: usize, a: Label, b: Label) -> f64 {
        self.pair[(e * self.labels + a) * self.labels + b]
    }

    pub fn score(&self, labeling: &[Label]) -> f64 {
        let unary: f64 = labeling.iter().enumerate().map(|(i, &y)| self.u(i, y)).sum();
        let pair: f64 = self
            .edges
            .iter()
            .enumerate()
            .map(|(e, &(i, j))| self.p(e, labeling[i], labeling[j]))
            .sum();
        unary + pair
    }

    /// Score change from relabeling node `i` to `y`.
    pub fn flip_delta(&self, labeling: &[Label], i: NodeId, y: Label) -> f64 {
        let old = labeling[i];
        let mut delta = self.u(i, y) - self.u(i, old);
        for &e in &self.incident[i] {
            let (a, b) = self.edges[e];
            delta += if a == i {
                self.p(e, y, labeling[b]) - self.p(e, old, labeling[b])
            } else {
                self.p(e, labeling[a], y) - self.p(e, labeling[a], old)
            };
        }
        delta
    }

    /// Per-node argmax of the unary score, lowest label on ties.
    pub fn unary_argmax(&self) -> Vec<Label> {
        (0..self.len())
            .map(|i| {
                let mut best = 0;
                for y in 1..self.labels {
                    if self.u(i, y) > self.u(i, best) {
                        best = y;
                    }
                }
                best
            })
            .collect()
    }

    /// Best `{keep, switch-to-α}` move via min-cut. Non-submodular edge terms
    /// are truncated, so the caller re-scores the proposal before accepting.
    fn expansion_proposal(&self, labeling: &[Label], alpha: Label) -> Vec<Label> {
        let n = self.len();
        let (s, t) = (n, n + 1);
        let mut delta = vec![0.0; n];
        let mut graph = FlowGraph::with_capacity(n + 2, self.edges.len() + n);
        let free = |i: NodeId| labeling[i] != alpha;
        for i in 0..n {
            if free(i) {
                delta[i] += self.u(i, labeling[i]) - self.u(i, alpha);
            }
        }
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let (li, lj) = (labeling[i], labeling[j]);
            // energies are negated scores
            let a = -self.p(e, li, lj);
            let b = -self.p(e, li, alpha);
            let c = -self.p(e, alpha, lj);
            let d = -self.p(e, alpha, alpha);
            match (free(i), free(j)) {
                (false, false) => {}
                (false, true) => delta[j] += b - a,
                (true, false) => delta[i] += c - a,
                (true, true) => {
                    delta[i] += c - a;
                    delta[j] += d - c;
                    let w = b + c - a - d;
                    if w > 0.0 {
                        graph.add_edge(i, j, w);
                    }
                }
            }
        }
        for (i, &dl) in delta.iter().enumerate() {
            if !free(i) {
                continue;
            }
            if dl > 0.0 {
                graph.add_edge(s, i, dl);
            } else if dl < 0.0 {
                graph.add_edge(i, t, -dl);
            }
        }
        graph.max_flow(s, t);
        let keep = graph.source_side(s);
        labeling
            .iter()
            .enumerate()
            .map(|(i, &y)| if free(i) && !keep[i] { alpha } else { y })
            .collect()
    }

    /// α-expansion: labels are visited in a seeded round-robin order; each
    /// accepted move strictly increases the score. Stops after a full sweep
    /// without improvement.
    pub fn expand(&self, init: &[Label], seed: u64) -> Expansion {
        let mut labeling = init.to_vec();
        let mut current = self.score(&labeling);
        let mut trace = vec![current];
        let mut order: Vec<Label> = (0..self.labels).collect();
        order.shuffle(&mut seed::rng(seed));
        let tol = |v: f64| 1e-10 * (1.0 + v.abs());

        for _ in 0..MAX_SWEEPS {
            let mut improved = false;
            for &alpha in &order {
                let proposal = self.expansion_proposal(&labeling, alpha);
                let proposed = self.score(&proposal);
                if proposed > current + tol(current) {
                    labeling = proposal;
                    current = proposed;
                    trace.push(current);
                    improved = true;
                    continue;
                }
                // truncated or tied cut: fall back to single-node switches to α
                for i in 0..labeling.len() {
                    if labeling[i] == alpha {
                        continue;
                    }
                    let delta = self.flip_delta(&labeling, i, alpha);
                    if delta > tol(current) {
                        labeling[i] = alpha;
                        current += delta;
                        trace.push(current);
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        Expansion { labeling, trace }
    }

    /// Exhaustive maximiser; ties go to the lexicographically smallest labeling.
    pub fn exact_map(&self) -> Result<Vec<Label>> {
        let n = self.len();
        let total = (self.labels as f64).powi(n as i32);
        if total > 1e6 {
            return Err(Error::contract(format!(
                "exact MAP needs L^n <= 1e6, got {}^{n}",
                self.labels
            )));
        }
        let mut labeling = vec![0; n];
        let mut best = labeling.clone();
        let mut best_score = self.score(&labeling);
        loop {
            // odometer increment, last position fastest => lexicographic order
            let mut pos = n;
            loop {
                if pos == 0 {
                    return Ok(best);
                }
                pos -= 1;
                labeling[pos] += 1;
                if labeling[pos] < self.labels {
                    break;
                }
                labeling[pos] = 0;
            }
            let s = self.score(&labeling);
            if s > best_score {
                best_score = s;
                best.clone_from(&labeling);
            }
        }
    }
}

pub fn alpha_expansion(
    model: &CrfModel,
    graph: &SupervoxelGraph,
    distributions: &[Vec<f64>],
    ctx: &DescriptorContext,
    init: &[Label],
    seed: u64,
) -> Result<Expansion> {
    if init.len() != graph.len() || init.iter().any(|&y| y >= model.labels) {
        return Err(Error::data("initial labeling must assign a valid label to every node"));
    }
    let potentials = CrfInstance::new(model, graph, distributions, ctx)?.into_potentials(model);
    Ok(potentials.expand(init, seed))
}

pub fn exact_map(
    model: &CrfModel,
    graph: &SupervoxelGraph,
    distributions: &[Vec<f64>],
    ctx: &DescriptorContext,
) -> Result<Vec<Label>> {
    CrfInstance::new(model, graph, distributions, ctx)?
        .potentials(model)
        .exact_map()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfHyper {
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for CrfHyper {
    fn default() -> Self {
        CrfHyper {
            epochs: 10,
            step: 0.1,
            seed: 0,
        }
    }
}

/// Median over training edges of the descriptor distance restricted to `types`.
pub fn median_edge_distance(videos: &[Video], types: SubsetMask) -> f64 {
    let mut distances: Vec<f64> = videos
        .iter()
        .flat_map(|v| {
            v.graph.edges().iter().map(move |&(i, j)| {
                types
                    .types()
                    .map(|t| {
                        v.descriptors
                            .get(i, t)
                            .iter()
                            .zip(v.descriptors.get(j, t))
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    if distances.is_empty() {
        return 1.0;
    }
    distances.sort_by(f64::total_cmp);
    let mid = distances.len() / 2;
    let median = if distances.len().is_multiple_of(2) {
        0.5 * (distances[mid - 1] + distances[mid])
    } else {
        distances[mid]
    };
    if median > 1e-12 {
        median
    } else {
        1.0
    }
}

/// Averaged structured perceptron with all descriptors in `types` computed
/// on every training node.
pub fn train_crf(
    videos: &[Video],
    classifiers: &ClassifierBank,
    hyper: &CrfHyper,
    types: SubsetMask,
) -> Result<CrfModel> {
    if videos.is_empty() {
        return Err(Error::data("cannot train a CRF on an empty corpus"));
    }
    if types.is_empty() {
        return Err(Error::config("CRF needs at least one descriptor type"));
    }
    let labels = classifiers.label_count();
    let sigma = median_edge_distance(videos, types);
    let shape = CrfModel::zeros(labels, sigma, types);

    let mut prepared = Vec::with_capacity(videos.len());
    for video in videos {
        let truth = video.graph.truth()?;
        let masks = vec![types; video.graph.len()];
        let distributions = (0..video.graph.len())
            .map(|i| classifiers.predict_node(types, &video.descriptors, i))
            .collect::<Result<Vec<_>>>()?;
        let ctx = DescriptorContext {
            bank: &video.descriptors,
            masks: &masks,
            classifiers,
        };
        let instance = CrfInstance::new(&shape, &video.graph, &distributions, &ctx)?;
        let target = instance.joint_feature(&truth);
        prepared.push((instance, target));
    }

    let mut model = shape.clone();
    let mut sum_u = vec![0.0; labels];
    let mut sum_p = vec![0.0; labels * labels];
    let mut updates = 0usize;
    let mut rng = seed::rng(hyper.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (instance, (true_u, true_p)) = &prepared[k];
            let potentials = instance.potentials(&model);
            let prediction = potentials.expand(&potentials.unary_argmax(), hyper.seed).labeling;
            let (pred_u, pred_p) = instance.joint_feature(&prediction);
            for y in 0..labels {
                model.w_u[y] += hyper.step * (true_u[y] - pred_u[y]);
            }
            for k in 0..labels * labels {
                model.w_p[k] += hyper.step * (true_p[k] - pred_p[k]);
            }
            for (s, w) in sum_u.iter_mut().zip(&model.w_u) {
                *s += w;
            }
            for (s, w) in sum_p.iter_mut().zip(&model.w_p) {
                *s += w;
            }
            updates += 1;
        }
    }
    if updates == 0 {
        return Ok(shape);
    }
    let avg = |v: Vec<f64>| v.into_iter().map(|x| x / updates as f64).collect();
    Ok(CrfModel {
        w_u: avg(sum_u),
        w_p: avg(sum_p),
        ..shape
    })
}

#[cfg(test)]
mod tests;
