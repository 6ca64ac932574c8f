//! One multinomial logistic classifier per non-empty descriptor subset.
//!
//! At inference time a node is classified by the classifier whose subset is
//! exactly the set of descriptors computed for it, so no missing-value
//! handling is ever needed. Class-conditional descriptor means are kept
//! alongside for expected-feature substitution in pairwise terms.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::svgraph::{DescriptorBank, Label, NodeId, Video, MAX_DESCRIPTOR_TYPES};

/// Bitmask over descriptor types; bit `t` set means type `t` is in the subset.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetMask(u8);

impl SubsetMask {
    pub const EMPTY: SubsetMask = SubsetMask(0);

    pub fn from_bits(bits: u8) -> Self {
        SubsetMask(bits)
    }

    /// All of the first `d` types.
    pub fn full(d: usize) -> Self {
        debug_assert!(d <= MAX_DESCRIPTOR_TYPES);
        SubsetMask(((1u16 << d) - 1) as u8)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, type_id: usize) -> bool {
        type_id < MAX_DESCRIPTOR_TYPES && self.0 & (1 << type_id) != 0
    }

    pub fn with(self, type_id: usize) -> Self {
        SubsetMask(self.0 | (1 << type_id))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: SubsetMask) -> bool {
        self.0 & !other.0 == 0
    }

    /// Member types in increasing order.
    pub fn types(self) -> impl Iterator<Item = usize> {
        (0..MAX_DESCRIPTOR_TYPES).filter(move |&t| self.contains(t))
    }
}

impl fmt::Debug for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SubsetMask({:#010b})", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetClassifier {
    pub mask: SubsetMask,
    /// Row-major `L × (input_dim + 1)`; the last column is the bias.
    pub weights: Vec<f64>,
    pub input_dim: usize,
}

impl SubsetClassifier {
    fn row(&self, label: usize) -> &[f64] {
        let width = self.input_dim + 1;
        &self.weights[label * width..(label + 1) * width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankHyper {
    pub l2: f64,
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for BankHyper {
    fn default() -> Self {
        BankHyper {
            l2: 1e-3,
            epochs: 30,
            step: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    labels: usize,
    dims: Vec<usize>,
    standardization: Vec<Standardization>,
    /// Indexed by `mask.bits() - 1`.
    classifiers: Vec<SubsetClassifier>,
    /// `class_means[type][label]`, in raw descriptor units.
    class_means: Vec<Vec<Vec<f64>>>,
}

pub fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

impl ClassifierBank {
    /// Assemble a bank from explicit parts. `classifiers[k]` must have mask `k + 1`.
    pub fn from_parts(
        labels: usize,
        standardization: Vec<Standardization>,
        classifiers: Vec<SubsetClassifier>,
        class_means: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let d = standardization.len();
        if !(1..=MAX_DESCRIPTOR_TYPES).contains(&d) || labels == 0 {
            return Err(Error::data(format!("invalid bank shape D={d}, L={labels}")));
        }
        let dims: Vec<usize> = standardization.iter().map(|s| s.mean.len()).collect();
        if classifiers.len() != (1 << d) - 1 {
            return Err(Error::data(format!("expected {} classifiers", (1 << d) - 1)));
        }
        for (k, clf) in classifiers.iter().enumerate() {
            let input_dim: usize = clf.mask.types().map(|t| dims.get(t).copied().unwrap_or(0)).sum();
            if clf.mask.bits() as usize != k + 1
                || clf.input_dim != input_dim
                || clf.weights.len() != labels * (input_dim + 1)
            {
                return Err(Error::data(format!("classifier {k} has an inconsistent shape")));
            }
        }
        if class_means.len() != d
            || class_means
                .iter()
                .zip(&dims)
                .any(|(per_label, &dim)| per_label.len() != labels || per_label.iter().any(|m| m.len() != dim))
        {
            return Err(Error::data("class means must cover every (type, label) pair"));
        }
        Ok(ClassifierBank {
            labels,
            dims,
            standardization,
            classifiers,
            class_means,
        })
    }

    pub fn type_count(&self) -> usize {
        self.dims.len()
    }

    pub fn label_count(&self) -> usize {
        self.labels
    }

    pub fn subset_dim(&self, mask: SubsetMask) -> usize {
        mask.types().map(|t| self.dims[t]).sum()
    }

    pub fn classifier(&self, mask: SubsetMask) -> Result<&SubsetClassifier> {
        if mask.is_empty() {
            return Err(Error::contract(
                "the empty subset has no classifier; interpolate from neighbours instead",
            ));
        }
        self.classifiers
            .get(mask.bits() as usize - 1)
            .ok_or_else(|| Error::data(format!("no classifier for {mask:?}")))
    }

    pub fn classifiers(&self) -> &[SubsetClassifier] {
        &self.classifiers
    }

    /// Label distribution from concatenated raw descriptor values of `mask`'s
    /// member types, in increasing type order.
    pub fn predict(&self, mask: SubsetMask, values: &[f64]) -> Result<Vec<f64>> {
        let clf = self.classifier(mask)?;
        if values.len() != clf.input_dim {
            return Err(Error::data(format!(
                "{mask:?} expects {} values, got {}",
                clf.input_dim,
                values.len()
            )));
        }
        let mut x = Vec::with_capacity(values.len());
        let mut offset = 0;
        for t in mask.types() {
            let st = &self.standardization[t];
            for k in 0..self.dims[t] {
                x.push((values[offset + k] - st.mean[k]) / st.std[k]);
            }
            offset += self.dims[t];
        }
        Ok(self.scores(clf, &x))
    }

    fn scores(&self, clf: &SubsetClassifier, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.labels)
            .map(|y| {
                let row = clf.row(y);
                row[..x.len()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + row[x.len()]
            })
            .collect();
        softmax_in_place(&mut out);
        out
    }

    /// Predict for one node of a descriptor bank, using exactly the classifier for `mask`.
    pub fn predict_node(&self, mask: SubsetMask, bank: &DescriptorBank, node: NodeId) -> Result<Vec<f64>> {
        let values: Vec<f64> = mask.types().flat_map(|t| bank.get(node, t).iter().copied()).collect();
        self.predict(mask, &values)
    }

    pub fn expected_descriptor(&self, type_id: usize, label: Label) -> Result<&[f64]> {
        self.class_means
            .get(type_id)
            .and_then(|per_label| per_label.get(label))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::data(format!("no class mean for type {type_id}, label {label}")))
    }

    pub(crate) fn class_mean(&self, type_id: usize, label: Label) -> &[f64] {
        &self.class_means[type_id][label]
    }
}

/// Train all `2^D - 1` subset classifiers and the class-conditional means.
pub fn train_bank(videos: &[Video], hyper: &BankHyper) -> Result<ClassifierBank> {
    let first = videos.first().ok_or_else(|| Error::data("cannot train on an empty corpus"))?;
    let labels = first.graph.label_count();
    let dims: Vec<usize> = first.descriptors.specs().iter().map(|s| s.dim).collect();
    let d = dims.len();
    let stride: usize = dims.iter().sum();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Label> = Vec::new();
    for (k, video) in videos.iter().enumerate() {
        if video.graph.label_count() != labels || video.descriptors.type_count() != d {
            return Err(Error::data(format!("video {k} disagrees on label or descriptor counts")));
        }
        let truth = video.graph.truth()?;
        for (node, &label) in truth.iter().enumerate() {
            let mut row = Vec::with_capacity(stride);
            for t in 0..d {
                row.extend_from_slice(video.descriptors.get(node, t));
            }
            rows.push(row);
            targets.push(label);
        }
    }
    let mut label_counts = vec![0usize; labels];
    for &y in &targets {
        label_counts[y] += 1;
    }
    if let Some(missing) = label_counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("label {missing} has no training examples")));
    }

    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &dim| {
            let start = *acc;
            *acc += dim;
            Some(start)
        })
        .collect();

    let n = rows.len() as f64;
    let mut standardization = Vec::with_capacity(d);
    let mut class_means = Vec::with_capacity(d);
    for t in 0..d {
        let (off, dim) = (offsets[t], dims[t]);
        let mut mean = vec![0.0; dim];
        let mut per_label = vec![vec![0.0; dim]; labels];
        for (row, &y) in rows.iter().zip(&targets) {
            for k in 0..dim {
                mean[k] += row[off + k];
                per_label[y][k] += row[off + k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for (y, sums) in per_label.iter_mut().enumerate() {
            sums.iter_mut().for_each(|s| *s /= label_counts[y] as f64);
        }
        let mut var = vec![0.0; dim];
        for row in &rows {
            for k in 0..dim {
                var[k] += (row[off + k] - mean[k]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        standardization.push(Standardization { mean, std });
        class_means.push(per_label);
    }

    let standardized: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            let mut out = row.clone();
            for t in 0..d {
                let st = &standardization[t];
                for k in 0..dims[t] {
                    out[offsets[t] + k] = (row[offsets[t] + k] - st.mean[k]) / st.std[k];
                }
            }
            out
        })
        .collect();

    let mut classifiers = Vec::with_capacity((1 << d) - 1);
    for bits in 1..(1u16 << d) {
        let mask = SubsetMask::from_bits(bits as u8);
        let columns: Vec<usize> = mask
            .types()
            .flat_map(|t| offsets[t]..offsets[t] + dims[t])
            .collect();
        classifiers.push(fit_logistic(
            mask,
            &columns,
            &standardized,
            &targets,
            labels,
            hyper,
        ));
    }

    Ok(ClassifierBank {
        labels,
        dims,
        standardization,
        classifiers,
        class_means,
    })
}

fn fit_logistic(
    mask: SubsetMask,
    columns: &[usize],
    rows: &[Vec<f64>],
    targets: &[Label],
    labels: usize,
    hyper: &BankHyper,
) -> SubsetClassifier {
    let dim = columns.len();
    let width = dim + 1;
    let mut weights = vec![0.0; labels * width];
    let mut rng = seed::derived_rng(hyper.seed, mask.bits() as u64);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut x = vec![0.0; dim];
    let mut p = vec![0.0; labels];
    for epoch in 1..=hyper.epochs {
        let step = hyper.step / (epoch as f64).sqrt();
        order.shuffle(&mut rng);
        for &r in &order {
            for (slot, &c) in x.iter_mut().zip(columns) {
                *slot = rows[r][c];
            }
            for (y, score) in p.iter_mut().enumerate() {
                let row = &weights[y * width..(y + 1) * width];
                *score = row[..dim].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + row[dim];
            }
            softmax_in_place(&mut p);
            for (y, &prob) in p.iter().enumerate() {
                let g = prob - if y == targets[r] { 1.0 } else { 0.0 };
                let row = &mut weights[y * width..(y + 1) * width];
                for k in 0..dim {
                    row[k] -= step * (g * x[k] + hyper.l2 * row[k]);
                }
                row[dim] -= step * g;
            }
        }
    }
    SubsetClassifier {
        mask,
        weights,
        input_dim: dim,
    }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "L")]
    l: usize,
    standardization: BTreeMap<String, Standardization>,
    classifiers: BTreeMap<String, ClassifierFile>,
    class_means: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierFile {
    weights: Vec<Vec<f64>>,
}

impl ClassifierBank {
    pub fn to_json(&self) -> Result<String> {
        let d = self.type_count();
        let file = BankFile {
            d,
            l: self.labels,
            standardization: self
                .standardization
                .iter()
                .enumerate()
                .map(|(t, s)| (t.to_string(), s.clone()))
                .collect(),
            classifiers: self
                .classifiers
                .iter()
                .map(|c| {
                    let width = c.input_dim + 1;
                    (
                        c.mask.bits().to_string(),
                        ClassifierFile {
                            weights: c.weights.chunks(width).map(<[f64]>::to_vec).collect(),
                        },
                    )
                })
                .collect(),
            class_means: (0..d)
                .flat_map(|t| (0..self.labels).map(move |y| (t, y)))
                .map(|(t, y)| (format!("{t}/{y}"), self.class_means[t][y].clone()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: BankFile = serde_json::from_str(text)?;
        let (d, labels) = (file.d, file.l);
        if !(1..=MAX_DESCRIPTOR_TYPES).contains(&d) || labels == 0 {
            return Err(Error::data(format!("invalid bank shape D={d}, L={labels}")));
        }
        let standardization = (0..d)
            .map(|t| {
                file.standardization
                    .remove(&t.to_string())
                    .ok_or_else(|| Error::data(format!("missing standardization for type {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = standardization.iter().map(|s| s.mean.len()).collect();
        for (t, s) in standardization.iter().enumerate() {
            if s.std.len() != s.mean.len() || s.std.iter().any(|&v| v <= 0.0) {
                return Err(Error::data(format!("invalid standardization for type {t}")));
            }
        }
        let mut classifiers = Vec::with_capacity((1 << d) - 1);
        for bits in 1..(1u16 << d) {
            let mask = SubsetMask::from_bits(bits as u8);
            let entry = file
                .classifiers
                .remove(&bits.to_string())
                .ok_or_else(|| Error::data(format!("missing classifier for mask {bits}")))?;
            let input_dim: usize = mask.types().map(|t| dims[t]).sum();
            if entry.weights.len() != labels || entry.weights.iter().any(|r| r.len() != input_dim + 1) {
                return Err(Error::data(format!("classifier {bits} has the wrong weight shape")));
            }
            classifiers.push(SubsetClassifier {
                mask,
                weights: entry.weights.concat(),
                input_dim,
            });
        }
        let class_means = (0..d)
            .map(|t| {
                (0..labels)
                    .map(|y| {
                        let v = file
                            .class_means
                            .remove(&format!("{t}/{y}"))
                            .ok_or_else(|| Error::data(format!("missing class mean {t}/{y}")))?;
                        if v.len() != dims[t] {
                            return Err(Error::data(format!("class mean {t}/{y} has the wrong length")));
                        }
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassifierBank {
            labels,
            dims,
            standardization,
            classifiers,
            class_means,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svgraph::{generate_corpus, CorpusConfig, DescriptorSpec, Supervoxel, SupervoxelGraph};

    fn tiny_video(rows: &[(Label, Vec<Vec<f64>>)], dims: &[usize]) -> Video {
        let nodes = rows
            .iter()
            .enumerate()
            .map(|(id, (label, _))| Supervoxel {
                id,
                centroid: [id as f64, 0.0, 0.0],
                voxel_count: 1,
                label: Some(*label),
            })
            .collect();
        let edges = (1..rows.len()).map(|i| (i - 1, i));
        let graph = SupervoxelGraph::new(nodes, edges, 2).unwrap();
        let specs = dims
            .iter()
            .enumerate()
            .map(|(type_id, &dim)| DescriptorSpec { type_id, dim, cost: 1 })
            .collect();
        let bank = DescriptorBank::new(specs, rows.iter().map(|(_, v)| v.clone()).collect()).unwrap();
        Video::new(graph, bank).unwrap()
    }

    #[test]
    fn mask_basics() {
        let m = SubsetMask::EMPTY.with(0).with(3);
        assert_eq!(m.types().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(m.len(), 2);
        assert!(m.is_subset_of(SubsetMask::full(4)));
        assert!(!m.is_subset_of(SubsetMask::full(3)));
        assert_eq!(SubsetMask::full(8).bits(), 255);
    }

    #[test]
    fn bank_has_one_classifier_per_nonempty_subset() {
        let corpus = generate_corpus(&CorpusConfig { grid: [3, 3, 2], ..Default::default() }, 2).unwrap();
        let bank = train_bank(&corpus.videos, &BankHyper { epochs: 2, ..Default::default() }).unwrap();
        assert_eq!(bank.classifiers().len(), 31);
        for (i, clf) in bank.classifiers().iter().enumerate() {
            assert_eq!(clf.mask.bits() as usize, i + 1);
            assert_eq!(bank.classifier(clf.mask).unwrap().mask, clf.mask);
        }
    }

    #[test]
    fn empty_mask_and_bad_lengths_are_rejected() {
        let corpus = generate_corpus(&CorpusConfig { grid: [3, 3, 2], ..Default::default() }, 2).unwrap();
        let bank = train_bank(&corpus.videos, &BankHyper { epochs: 1, ..Default::default() }).unwrap();
        assert!(matches!(bank.predict(SubsetMask::EMPTY, &[]), Err(Error::Contract(_))));
        assert!(matches!(bank.predict(SubsetMask::from_bits(1), &[0.0]), Err(Error::Data(_))));
        assert!(bank.expected_descriptor(9, 0).is_err());
        assert!(bank.expected_descriptor(0, 9).is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let corpus = generate_corpus(&CorpusConfig { grid: [3, 3, 2], ..Default::default() }, 2).unwrap();
        let bank = train_bank(&corpus.videos, &BankHyper { epochs: 0, ..Default::default() }).unwrap();
        let p = bank.predict(SubsetMask::from_bits(1), &[0.3, -1.0, 2.0]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_label_names_the_label() {
        let rows = vec![(0, vec![vec![1.0], vec![2.0]]), (0, vec![vec![1.5], vec![2.5]])];
        let video = tiny_video(&rows, &[1, 1]);
        let err = train_bank(&[video], &BankHyper::default()).unwrap_err();
        assert!(err.to_string().contains("label 1"), "{err}");
    }

    #[test]
    fn expected_descriptor_of_constant_and_singleton() {
        let rows = vec![
            (0, vec![vec![0.1], vec![7.0, -2.0]]),
            (0, vec![vec![0.4], vec![7.0, -2.0]]),
            (1, vec![vec![3.0], vec![1.5, 9.0]]),
        ];
        let video = tiny_video(&rows, &[1, 2]);
        let bank = train_bank(&[video], &BankHyper { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(bank.expected_descriptor(1, 0).unwrap(), &[7.0, -2.0]);
        assert_eq!(bank.expected_descriptor(1, 1).unwrap(), &[1.5, 9.0]);
        assert_eq!(bank.expected_descriptor(0, 1).unwrap(), &[3.0]);
    }

    #[test]
    fn json_round_trip() {
        let corpus = generate_corpus(&CorpusConfig { grid: [3, 3, 2], ..Default::default() }, 2).unwrap();
        let bank = train_bank(&corpus.videos, &BankHyper { epochs: 2, ..Default::default() }).unwrap();
        let back = ClassifierBank::from_json(&bank.to_json().unwrap()).unwrap();
        assert_eq!(bank, back);
    }
}
