//! Supervoxel graphs, descriptor banks and the seeded synthetic corpus.
//!
//! A video is a lattice of supervoxels with 6-neighbourhood adjacency. Each
//! node carries a ground-truth label drawn from a spatially coherent label
//! field, and one descriptor vector per descriptor type. Descriptor values
//! are class-mean vectors plus Gaussian noise, so each type is informative
//! in proportion to its configured mean separation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type NodeId = usize;
pub type Label = usize;

/// Largest supported number of descriptor types (one classifier per non-empty subset).
pub const MAX_DESCRIPTOR_TYPES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supervoxel {
    pub id: NodeId,
    pub centroid: [f64; 3],
    pub voxel_count: u32,
    #[serde(default)]
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelGraph {
    nodes: Vec<Supervoxel>,
    edges: Vec<(NodeId, NodeId)>,
    adjacency: Vec<Vec<NodeId>>,
    label_count: usize,
}

impl SupervoxelGraph {
    /// Validates and normalises the graph: edges are stored as `(lo, hi)`,
    /// sorted and deduplicated; adjacency lists are sorted ascending.
    pub fn new(
        nodes: Vec<Supervoxel>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        label_count: usize,
    ) -> Result<Self> {
        if label_count == 0 {
            return Err(Error::config("label count must be positive"));
        }
        for (pos, node) in nodes.iter().enumerate() {
            if node.id != pos {
                return Err(Error::data(format!(
                    "node ids must be dense: found id {} at position {pos}",
                    node.id
                )));
            }
            if node.voxel_count == 0 {
                return Err(Error::data(format!("node {pos} has zero voxel_count")));
            }
            if let Some(label) = node.label {
                if label >= label_count {
                    return Err(Error::data(format!(
                        "node {pos} has label {label} but only {label_count} labels exist"
                    )));
                }
            }
            if node.centroid.iter().any(|c| !c.is_finite()) {
                return Err(Error::data(format!("node {pos} has a non-finite centroid")));
            }
        }
        let n = nodes.len();
        let mut normalized = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::data(format!("edge ({a}, {b}) references an unknown node")));
            }
            if a == b {
                return Err(Error::data(format!("self-loop on node {a}")));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        normalized.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &normalized {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(SupervoxelGraph {
            nodes,
            edges: normalized,
            adjacency,
            label_count,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Supervoxel] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Supervoxel {
        &self.nodes[id]
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Neighbours of `id`, sorted ascending.
    pub fn neighbors(&self, id: NodeId) -> Result<&[NodeId]> {
        self.adjacency
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::data(format!("unknown node id {id}")))
    }

    /// Unchecked variant for hot loops over known-valid ids.
    pub(crate) fn adj(&self, id: NodeId) -> &[NodeId] {
        &self.adjacency[id]
    }

    pub fn centroid_distance(&self, a: NodeId, b: NodeId) -> f64 {
        let (p, q) = (&self.nodes[a].centroid, &self.nodes[b].centroid);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    /// Ground truth for every node, or an error naming the first unlabeled node.
    pub fn truth(&self) -> Result<Vec<Label>> {
        self.nodes
            .iter()
            .map(|n| {
                n.label
                    .ok_or_else(|| Error::data(format!("node {} has no ground-truth label", n.id)))
            })
            .collect()
    }

    pub fn voxel_counts(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.voxel_count).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    pub type_id: usize,
    pub dim: usize,
    pub cost: u64,
}

/// Precomputed descriptor values for every (node, type) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorBank {
    specs: Vec<DescriptorSpec>,
    offsets: Vec<usize>,
    stride: usize,
    values: Vec<f64>,
}

impl DescriptorBank {
    /// `values[node][type]` must have length `specs[type].dim`.
    pub fn new(specs: Vec<DescriptorSpec>, values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if specs.len() < 2 || specs.len() > MAX_DESCRIPTOR_TYPES {
            return Err(Error::config(format!(
                "descriptor type count must be in 2..={MAX_DESCRIPTOR_TYPES}, got {}",
                specs.len()
            )));
        }
        for (pos, spec) in specs.iter().enumerate() {
            if spec.type_id != pos {
                return Err(Error::data(format!("descriptor spec {pos} has type_id {}", spec.type_id)));
            }
            if spec.dim == 0 || spec.cost == 0 {
                return Err(Error::data(format!("descriptor type {pos} needs positive dim and cost")));
            }
        }
        let mut offsets = Vec::with_capacity(specs.len());
        let mut stride = 0;
        for spec in &specs {
            offsets.push(stride);
            stride += spec.dim;
        }
        let mut flat = Vec::with_capacity(values.len() * stride);
        for (node, per_type) in values.iter().enumerate() {
            if per_type.len() != specs.len() {
                return Err(Error::data(format!(
                    "node {node} has {} descriptor types, expected {}",
                    per_type.len(),
                    specs.len()
                )));
            }
            for (spec, v) in specs.iter().zip(per_type) {
                if v.len() != spec.dim {
                    return Err(Error::data(format!(
                        "descriptor {node}/{} has length {}, expected {}",
                        spec.type_id,
                        v.len(),
                        spec.dim
                    )));
                }
                flat.extend_from_slice(v);
            }
        }
        Ok(DescriptorBank {
            specs,
            offsets,
            stride,
            values: flat,
        })
    }

    pub fn specs(&self) -> &[DescriptorSpec] {
        &self.specs
    }

    pub fn type_count(&self) -> usize {
        self.specs.len()
    }

    pub fn node_count(&self) -> usize {
        if self.stride == 0 {
            0
        } else {
            self.values.len() / self.stride
        }
    }

    pub fn cost(&self, type_id: usize) -> u64 {
        self.specs[type_id].cost
    }

    pub fn get(&self, node: NodeId, type_id: usize) -> &[f64] {
        let start = node * self.stride + self.offsets[type_id];
        &self.values[start..start + self.specs[type_id].dim]
    }
}

/// One video of the corpus: its graph and precomputed descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub graph: SupervoxelGraph,
    pub descriptors: DescriptorBank,
}

impl Video {
    pub fn new(graph: SupervoxelGraph, descriptors: DescriptorBank) -> Result<Self> {
        if graph.len() != descriptors.node_count() {
            return Err(Error::data(format!(
                "graph has {} nodes but descriptor bank covers {}",
                graph.len(),
                descriptors.node_count()
            )));
        }
        Ok(Video { graph, descriptors })
    }

    /// Cost of running every descriptor type in `types` on every node.
    pub fn full_cost(&self, types: impl IntoIterator<Item = usize>) -> u64 {
        let per_node: u64 = types.into_iter().map(|t| self.descriptors.cost(t)).sum();
        per_node * self.graph.len() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorTypeConfig {
    pub dim: usize,
    pub cost: u64,
    /// Norm of every class-mean vector; 0 makes the type carry no label information.
    pub informativeness: f64,
    pub noise: f64,
    /// Labels this type separates. The remaining labels share one mean, so
    /// the type cannot tell them apart. `None` separates every label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Lattice extent `[X, Y, T]`.
    pub grid: [usize; 3],
    pub labels: usize,
    pub descriptors: Vec<DescriptorTypeConfig>,
    /// Number of majority-filter passes applied to the grown label field.
    pub smoothing: usize,
    pub seeds_per_label: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let ty = |dim, cost, informativeness, noise, classes: Option<&[usize]>| DescriptorTypeConfig {
            dim,
            cost,
            informativeness,
            noise,
            classes: classes.map(<[usize]>::to_vec),
        };
        CorpusConfig {
            grid: [4, 4, 6],
            labels: 4,
            // color, HOG, HOF, MBH analogues, then an expensive, strong "DCNN" type
            descriptors: vec![
                ty(3, 2, 1.0, 1.0, None),
                ty(4, 4, 3.0, 0.6, Some(&[0, 1])),
                ty(4, 8, 2.0, 1.0, None),
                ty(4, 5, 3.0, 0.6, Some(&[2, 3])),
                ty(4, 6, 3.0, 1.0, None),
            ],
            smoothing: 2,
            seeds_per_label: 2,
            seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.contains(&0) {
            return Err(Error::config(format!("zero-volume grid {:?}", self.grid)));
        }
        if self.labels < 2 {
            return Err(Error::config("at least two labels are required"));
        }
        let d = self.descriptors.len();
        if !(2..=MAX_DESCRIPTOR_TYPES).contains(&d) {
            return Err(Error::config(format!(
                "descriptor type count must be in 2..={MAX_DESCRIPTOR_TYPES}, got {d}"
            )));
        }
        for (t, ty) in self.descriptors.iter().enumerate() {
            if ty.dim == 0 || ty.cost == 0 {
                return Err(Error::config(format!("descriptor type {t} needs positive dim and cost")));
            }
            if !(ty.informativeness >= 0.0 && ty.informativeness.is_finite()) {
                return Err(Error::config(format!("descriptor type {t} has invalid informativeness")));
            }
            if !(ty.noise >= 0.0 && ty.noise.is_finite()) {
                return Err(Error::config(format!("descriptor type {t} has invalid noise")));
            }
            if let Some(classes) = &ty.classes {
                if classes.iter().any(|&c| c >= self.labels) {
                    return Err(Error::config(format!("descriptor type {t} lists a label outside 0..{}", self.labels)));
                }
            }
        }
        if self.seeds_per_label == 0 {
            return Err(Error::config("seeds_per_label must be positive"));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.grid.iter().product()
    }

    fn specs(&self) -> Vec<DescriptorSpec> {
        self.descriptors
            .iter()
            .enumerate()
            .map(|(type_id, d)| DescriptorSpec {
                type_id,
                dim: d.dim,
                cost: d.cost,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub videos: Vec<Video>,
}

impl Corpus {
    /// First half train, second half test (train gets the extra video when odd).
    pub fn split(&self) -> (&[Video], &[Video]) {
        let cut = self.videos.len().div_ceil(2);
        self.videos.split_at(cut)
    }
}

/// Node id of lattice cell `(x, y, t)`.
pub fn lattice_id(grid: [usize; 3], x: usize, y: usize, t: usize) -> NodeId {
    x + grid[0] * (y + grid[1] * t)
}

/// 6-neighbourhood edges of an `X×Y×T` lattice.
pub fn lattice_edges(grid: [usize; 3]) -> Vec<(NodeId, NodeId)> {
    let [nx, ny, nt] = grid;
    let mut edges = Vec::new();
    for t in 0..nt {
        for y in 0..ny {
            for x in 0..nx {
                let id = lattice_id(grid, x, y, t);
                if x + 1 < nx {
                    edges.push((id, lattice_id(grid, x + 1, y, t)));
                }
                if y + 1 < ny {
                    edges.push((id, lattice_id(grid, x, y + 1, t)));
                }
                if t + 1 < nt {
                    edges.push((id, lattice_id(grid, x, y, t + 1)));
                }
            }
        }
    }
    edges
}

fn class_means(config: &CorpusConfig, rng: &mut seed::Rng) -> Vec<Vec<Vec<f64>>> {
    // means[type][label]
    config
        .descriptors
        .iter()
        .map(|ty| {
            let mut means: Vec<Vec<f64>> = (0..config.labels)
                .map(|_| {
                    let mut v: Vec<f64> = (0..ty.dim).map(|_| StandardNormal.sample(rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    for x in &mut v {
                        *x *= ty.informativeness / norm;
                    }
                    v
                })
                .collect();
            if let Some(classes) = &ty.classes {
                let shared = (0..config.labels).find(|l| !classes.contains(l));
                if let Some(shared) = shared {
                    let mean = means[shared].clone();
                    for (l, m) in means.iter_mut().enumerate() {
                        if !classes.contains(&l) {
                            m.clone_from(&mean);
                        }
                    }
                }
            }
            means
        })
        .collect()
}

fn grow_labels(graph_adj: &[Vec<NodeId>], config: &CorpusConfig, rng: &mut seed::Rng) -> Vec<Label> {
    let n = graph_adj.len();
    let mut labels: Vec<Option<Label>> = vec![None; n];
    let mut order: Vec<NodeId> = (0..n).collect();
    order.shuffle(rng);
    let n_seeds = (config.seeds_per_label * config.labels).min(n);
    let mut seed_labels: Vec<Label> = (0..config.labels).collect();
    seed_labels.shuffle(rng);
    let mut frontier: Vec<(NodeId, Label)> = Vec::new();
    for (k, &node) in order.iter().take(n_seeds).enumerate() {
        let label = seed_labels[k % config.labels];
        labels[node] = Some(label);
        frontier.extend(graph_adj[node].iter().map(|&j| (j, label)));
    }
    while !frontier.is_empty() {
        let pick = rng.random_range(0..frontier.len());
        let (node, label) = frontier.swap_remove(pick);
        if labels[node].is_some() {
            continue;
        }
        labels[node] = Some(label);
        frontier.extend(
            graph_adj[node]
                .iter()
                .filter(|&&j| labels[j].is_none())
                .map(|&j| (j, label)),
        );
    }
    // Isolated nodes (only possible on degenerate 1-node grids) fall back to a random label.
    let mut labels: Vec<Label> = labels
        .into_iter()
        .map(|l| l.unwrap_or_else(|| rng.random_range(0..config.labels)))
        .collect();

    for _ in 0..config.smoothing {
        let previous = labels.clone();
        for i in 0..n {
            let mut counts = vec![0usize; config.labels];
            counts[previous[i]] += 1;
            for &j in &graph_adj[i] {
                counts[previous[j]] += 1;
            }
            let best = *counts.iter().max().unwrap();
            if counts[previous[i]] < best {
                labels[i] = counts.iter().position(|&c| c == best).unwrap();
            }
        }
    }
    labels
}

fn generate_video(
    config: &CorpusConfig,
    means: &[Vec<Vec<f64>>],
    edges: &[(NodeId, NodeId)],
    adjacency: &[Vec<NodeId>],
    rng: &mut seed::Rng,
) -> Result<Video> {
    let grid = config.grid;
    let labels = grow_labels(adjacency, config, rng);
    let mut nodes = Vec::with_capacity(config.node_count());
    for t in 0..grid[2] {
        for y in 0..grid[1] {
            for x in 0..grid[0] {
                let id = lattice_id(grid, x, y, t);
                let jx: f64 = rng.random_range(-0.2..0.2);
                let jy: f64 = rng.random_range(-0.2..0.2);
                nodes.push(Supervoxel {
                    id,
                    centroid: [x as f64 + jx, y as f64 + jy, t as f64],
                    voxel_count: rng.random_range(1..=5),
                    label: Some(labels[id]),
                });
            }
        }
    }
    let values: Vec<Vec<Vec<f64>>> = nodes
        .iter()
        .map(|node| {
            let label = labels[node.id];
            config
                .descriptors
                .iter()
                .enumerate()
                .map(|(t, ty)| {
                    means[t][label]
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + ty.noise * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let graph = SupervoxelGraph::new(nodes, edges.iter().copied(), config.labels)?;
    let bank = DescriptorBank::new(config.specs(), values)?;
    Video::new(graph, bank)
}

/// Generate `n_videos` lattice videos; a pure function of `(config, n_videos)`.
pub fn generate_corpus(config: &CorpusConfig, n_videos: usize) -> Result<Corpus> {
    config.validate()?;
    if n_videos == 0 {
        return Err(Error::config("n_videos must be at least 1"));
    }
    let mut mean_rng = seed::derived_rng(config.seed, u64::MAX);
    let means = class_means(config, &mut mean_rng);
    let edges = lattice_edges(config.grid);
    let mut adjacency = vec![Vec::new(); config.node_count()];
    for &(a, b) in &edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    let videos = (0..n_videos)
        .map(|k| {
            let mut rng = seed::derived_rng(config.seed, k as u64);
            generate_video(config, &means, &edges, &adjacency, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        videos,
    })
}

// ---------------------------------------------------------------------------
// JSON corpus format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    config: CorpusConfig,
    videos: Vec<VideoFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoFile {
    nodes: Vec<Supervoxel>,
    edges: Vec<[NodeId; 2]>,
    descriptors: DescriptorFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorFile {
    specs: Vec<SpecFile>,
    values: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    type_id: usize,
    dim: usize,
    cost: u64,
}

impl Corpus {
    pub fn to_json(&self) -> Result<String> {
        let videos = self
            .videos
            .iter()
            .map(|v| {
                let bank = &v.descriptors;
                let mut values = BTreeMap::new();
                for node in 0..bank.node_count() {
                    for t in 0..bank.type_count() {
                        values.insert(format!("{node}/{t}"), bank.get(node, t).to_vec());
                    }
                }
                VideoFile {
                    nodes: v.graph.nodes().to_vec(),
                    edges: v.graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
                    descriptors: DescriptorFile {
                        specs: bank
                            .specs()
                            .iter()
                            .map(|s| SpecFile {
                                type_id: s.type_id,
                                dim: s.dim,
                                cost: s.cost,
                            })
                            .collect(),
                        values,
                    },
                }
            })
            .collect();
        let file = CorpusFile {
            config: self.config.clone(),
            videos,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CorpusFile = serde_json::from_str(text)?;
        let label_count = file.config.labels;
        let videos = file
            .videos
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                let specs: Vec<DescriptorSpec> = v
                    .descriptors
                    .specs
                    .iter()
                    .map(|s| DescriptorSpec {
                        type_id: s.type_id,
                        dim: s.dim,
                        cost: s.cost,
                    })
                    .collect();
                let mut values = v.descriptors.values;
                let per_node = (0..v.nodes.len())
                    .map(|node| {
                        (0..specs.len())
                            .map(|t| {
                                values.remove(&format!("{node}/{t}")).ok_or_else(|| {
                                    Error::data(format!("video {k}: missing descriptor {node}/{t}"))
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(extra) = values.keys().next() {
                    return Err(Error::data(format!("video {k}: unexpected descriptor key {extra}")));
                }
                let graph = SupervoxelGraph::new(
                    v.nodes,
                    v.edges.into_iter().map(|[a, b]| (a, b)),
                    label_count,
                )?;
                let bank = DescriptorBank::new(specs, per_node)?;
                Video::new(graph, bank)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            config: file.config,
            videos,
        })
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, corpus.to_json()?)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_json(&fs::read_to_string(path)?)
}
