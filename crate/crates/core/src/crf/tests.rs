use super::*;
use crate::classifier_bank::{train_bank, BankHyper, Standardization, SubsetClassifier};
use crate::svgraph::{generate_corpus, CorpusConfig, DescriptorSpec, Supervoxel};
use rand::Rng;

/// A bank with zero classifier weights and the given class means (`[type][label]`).
fn bank_with_means(labels: usize, dims: &[usize], means: Vec<Vec<Vec<f64>>>) -> ClassifierBank {
    let d = dims.len();
    let standardization = dims
        .iter()
        .map(|&dim| Standardization { mean: vec![0.0; dim], std: vec![1.0; dim] })
        .collect();
    let classifiers = (1..(1u16 << d))
        .map(|bits| {
            let mask = SubsetMask::from_bits(bits as u8);
            let input_dim: usize = mask.types().map(|t| dims[t]).sum();
            SubsetClassifier { mask, weights: vec![0.0; labels * (input_dim + 1)], input_dim }
        })
        .collect();
    ClassifierBank::from_parts(labels, standardization, classifiers, means).unwrap()
}

fn chain_graph(n: usize, labels: usize) -> SupervoxelGraph {
    let nodes = (0..n)
        .map(|id| Supervoxel { id, centroid: [id as f64, 0.0, 0.0], voxel_count: 1, label: None })
        .collect();
    SupervoxelGraph::new(nodes, (1..n).map(|i| (i - 1, i)), labels).unwrap()
}

struct RandomInstance {
    model: CrfModel,
    graph: SupervoxelGraph,
    dists: Vec<Vec<f64>>,
    bank: DescriptorBank,
    masks: Vec<SubsetMask>,
    clf: ClassifierBank,
}

impl RandomInstance {
    fn ctx(&self) -> DescriptorContext<'_> {
        DescriptorContext { bank: &self.bank, masks: &self.masks, classifiers: &self.clf }
    }
}

fn random_distribution(rng: &mut impl Rng, l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Random graph over `n` nodes (spanning chain plus extra random edges),
/// random descriptors for 2 types, random masks, random weights.
fn random_instance(seed_value: u64, n: usize, l: usize, potts: bool) -> RandomInstance {
    let mut rng = seed::rng(seed_value);
    let dims = [2usize, 3];
    let nodes: Vec<Supervoxel> = (0..n)
        .map(|id| Supervoxel {
            id,
            centroid: [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), 0.0],
            voxel_count: 1,
            label: None,
        })
        .collect();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    let graph = SupervoxelGraph::new(nodes, edges, l).unwrap();
    let specs = dims
        .iter()
        .enumerate()
        .map(|(type_id, &dim)| DescriptorSpec { type_id, dim, cost: 1 })
        .collect();
    let values = (0..n)
        .map(|_| dims.iter().map(|&dim| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let bank = DescriptorBank::new(specs, values).unwrap();
    let means = dims
        .iter()
        .map(|&dim| (0..l).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let clf = bank_with_means(l, &dims, means);
    let masks = (0..n).map(|_| SubsetMask::from_bits(rng.random_range(0..4u8))).collect();
    let dists = (0..n).map(|_| random_distribution(&mut rng, l)).collect();
    let w_u = (0..l).map(|_| rng.random_range(0.5..2.0)).collect();
    let w_p = if potts {
        let lambda = rng.random_range(0.1..1.5);
        (0..l * l).map(|k| if k / l == k % l { lambda } else { 0.0 }).collect()
    } else {
        (0..l * l).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let model = CrfModel { labels: l, w_u, w_p, sigma: 0.8, types: SubsetMask::full(2) };
    RandomInstance { model, graph, dists, bank, masks, clf }
}

/// Independent summation: no ψ vectors, no precomputed tables.
fn oracle_score(inst: &RandomInstance, labeling: &[Label]) -> f64 {
    let l = inst.model.labels;
    let mut total = 0.0;
    for (i, &y) in labeling.iter().enumerate() {
        total += inst.model.w_u[y] * inst.dists[i][y];
    }
    for &(i, j) in inst.graph.edges() {
        let (yi, yj) = (labeling[i], labeling[j]);
        let mut sq = 0.0;
        for t in 0..2 {
            let vi = if inst.masks[i].contains(t) { inst.bank.get(i, t).to_vec() } else { inst.clf.class_mean(t, yi).to_vec() };
            let vj = if inst.masks[j].contains(t) { inst.bank.get(j, t).to_vec() } else { inst.clf.class_mean(t, yj).to_vec() };
            for k in 0..vi.len() {
                sq += (vi[k] - vj[k]) * (vi[k] - vj[k]);
            }
        }
        let s = (-sq / (2.0 * inst.model.sigma * inst.model.sigma)).exp();
        total += inst.model.w_p[yi * l + yj] * s;
    }
    total
}

fn random_labeling(rng: &mut impl Rng, n: usize, l: usize) -> Vec<Label> {
    (0..n).map(|_| rng.random_range(0..l)).collect()
}

#[test]
fn unary_feature_examples() {
    assert_eq!(unary_feature(&[0.7, 0.2, 0.1], 0).unwrap(), vec![0.7, 0.0, 0.0]);
    let uniform = [0.25; 4];
    for y in 0..4 {
        let f = unary_feature(&uniform, y).unwrap();
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(f[y], 0.25);
    }
    let total: f64 = (0..3).map(|y| unary_feature(&[0.7, 0.2, 0.1], y).unwrap()[y]).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(unary_feature(&[0.5, 0.5], 2).is_err());
}

#[test]
fn pairwise_feature_examples() {
    let f = pairwise_feature(&[1.0, 2.0], &[1.0, 2.0], 1, 0, 2, 0.7).unwrap();
    assert_eq!(f, vec![0.0, 0.0, 1.0, 0.0]);
    let s = similarity(&[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
    assert!((s - (-1.0f64).exp()).abs() < 1e-15);
    assert!((s - 0.3679).abs() < 1e-4);
    assert!(pairwise_feature(&[1.0], &[1.0, 2.0], 0, 0, 2, 1.0).is_err());
    assert!(pairwise_feature(&[1.0], &[1.0], 0, 2, 2, 1.0).is_err());
}

#[test]
fn hand_evaluated_two_node_score() {
    let graph = chain_graph(2, 2);
    let specs = vec![
        DescriptorSpec { type_id: 0, dim: 1, cost: 1 },
        DescriptorSpec { type_id: 1, dim: 1, cost: 1 },
    ];
    let bank = DescriptorBank::new(specs, vec![vec![vec![0.3], vec![1.0]]; 2]).unwrap();
    let clf = bank_with_means(2, &[1, 1], vec![vec![vec![0.0], vec![1.0]]; 2]);
    let masks = vec![SubsetMask::full(2); 2];
    let ctx = DescriptorContext { bank: &bank, masks: &masks, classifiers: &clf };
    let model = CrfModel {
        labels: 2,
        w_u: vec![1.0, 1.0],
        w_p: vec![0.5, -0.5, -0.5, 0.5],
        sigma: 1.0,
        types: SubsetMask::full(2),
    };
    let dists = vec![vec![0.8, 0.2], vec![0.6, 0.4]];
    let score = crf_score(&model, &graph, &dists, &ctx, &[0, 0]).unwrap();
    assert!((score - 1.9).abs() < 1e-12, "{score}");

    let zero_pair = CrfModel { w_p: vec![0.0; 4], ..model.clone() };
    let s = crf_score(&zero_pair, &graph, &dists, &ctx, &[1, 0]).unwrap();
    assert!((s - (0.2 + 0.6)).abs() < 1e-12);
    assert!(crf_score(&model, &graph, &dists, &ctx, &[0]).is_err());
}

#[test]
fn score_matches_independent_summation() {
    let mut rng = seed::rng(99);
    for case in 0..20 {
        let inst = random_instance(case, 5, 3, false);
        let potentials = CrfInstance::new(&inst.model, &inst.graph, &inst.dists, &inst.ctx()).unwrap().potentials(&inst.model);
        for _ in 0..5 {
            let labeling = random_labeling(&mut rng, 5, 3);
            let oracle = oracle_score(&inst, &labeling);
            let reference = crf_score(&inst.model, &inst.graph, &inst.dists, &inst.ctx(), &labeling).unwrap();
            assert!((oracle - reference).abs() < 1e-12, "case {case}");
            assert!((oracle - potentials.score(&labeling)).abs() < 1e-12, "case {case}");
        }
    }
}

#[test]
fn single_flip_decomposes_into_local_terms() {
    let mut rng = seed::rng(5);
    for case in 0..30 {
        let inst = random_instance(100 + case, 7, 4, false);
        let potentials = CrfInstance::new(&inst.model, &inst.graph, &inst.dists, &inst.ctx()).unwrap().potentials(&inst.model);
        let labeling = random_labeling(&mut rng, 7, 4);
        let node = rng.random_range(0..7);
        let y = rng.random_range(0..4);
        let mut flipped = labeling.clone();
        flipped[node] = y;
        let direct = oracle_score(&inst, &flipped) - oracle_score(&inst, &labeling);
        assert!((direct - potentials.flip_delta(&labeling, node, y)).abs() < 1e-12);
    }
}

#[test]
fn decoupled_unaries_give_per_node_argmax() {
    for case in 0..10 {
        let mut inst = random_instance(200 + case, 6, 3, false);
        inst.model.w_p = vec![0.0; 9];
        let init = vec![0; 6];
        let out = alpha_expansion(&inst.model, &inst.graph, &inst.dists, &inst.ctx(), &init, 3).unwrap();
        for (i, &y) in out.labeling.iter().enumerate() {
            let scores: Vec<f64> = (0..3).map(|k| inst.model.w_u[k] * inst.dists[i][k]).collect();
            let best = (0..3).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
            assert_eq!(y, best);
        }
    }
}

#[test]
fn expansion_trace_is_monotone_and_dominated_by_exact() {
    let mut rng = seed::rng(7);
    for case in 0..40 {
        let inst = random_instance(300 + case, 6, 3, false);
        let potentials = CrfInstance::new(&inst.model, &inst.graph, &inst.dists, &inst.ctx()).unwrap().potentials(&inst.model);
        let init = random_labeling(&mut rng, 6, 3);
        let out = potentials.expand(&init, case);
        for w in out.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!((out.trace.last().unwrap() - potentials.score(&out.labeling)).abs() < 1e-9);
        let exact = potentials.exact_map().unwrap();
        assert!(potentials.score(&exact) >= potentials.score(&out.labeling) - 1e-12);
    }
}

/// Second, independently written enumeration: recursive descent.
fn enumerate_best(potentials: &Potentials, n: usize, l: usize) -> (f64, Vec<Label>) {
    fn go(p: &Potentials, l: usize, prefix: &mut Vec<Label>, n: usize, best: &mut (f64, Vec<Label>)) {
        if prefix.len() == n {
            let s = p.score(prefix);
            if s > best.0 {
                *best = (s, prefix.clone());
            }
            return;
        }
        for y in 0..l {
            prefix.push(y);
            go(p, l, prefix, n, best);
            prefix.pop();
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(potentials, l, &mut Vec::new(), n, &mut best);
    best
}

#[test]
fn exact_map_matches_second_enumeration() {
    for case in 0..10 {
        let inst = random_instance(400 + case, 4, 3, false);
        let potentials = CrfInstance::new(&inst.model, &inst.graph, &inst.dists, &inst.ctx()).unwrap().potentials(&inst.model);
        let (_, best) = enumerate_best(&potentials, 4, 3);
        assert_eq!(exact_map(&inst.model, &inst.graph, &inst.dists, &inst.ctx()).unwrap(), best);
    }
}

#[test]
fn exact_map_single_node_and_size_guard() {
    let p = Potentials::from_tables(3, vec![0.1, 0.5, 0.4], vec![], vec![]).unwrap();
    assert_eq!(p.exact_map().unwrap(), vec![1]);
    let tie = Potentials::from_tables(2, vec![0.5, 0.5, 0.5, 0.5], vec![], vec![]).unwrap();
    assert_eq!(tie.exact_map().unwrap(), vec![0, 0]);
    let big = Potentials::from_tables(4, vec![0.0; 4 * 11], vec![], vec![]).unwrap();
    assert!(big.exact_map().is_err());
}

#[test]
fn potts_expansion_is_near_optimal() {
    let mut rng = seed::rng(11);
    for case in 0..50 {
        let n = rng.random_range(2..=8);
        let inst = random_instance(500 + case, n, 3, true);
        let potentials = CrfInstance::new(&inst.model, &inst.graph, &inst.dists, &inst.ctx()).unwrap().potentials(&inst.model);
        let out = potentials.expand(&potentials.unary_argmax(), case);
        let exact = potentials.score(&potentials.exact_map().unwrap());
        assert!(potentials.score(&out.labeling) >= 0.95 * exact, "case {case}");
    }
}

#[test]
fn zero_epochs_give_zero_weights() {
    let corpus = generate_corpus(&CorpusConfig { grid: [3, 3, 2], ..Default::default() }, 2).unwrap();
    let bank = train_bank(&corpus.videos, &BankHyper { epochs: 3, ..Default::default() }).unwrap();
    let model = train_crf(&corpus.videos, &bank, &CrfHyper { epochs: 0, ..Default::default() }, SubsetMask::full(5)).unwrap();
    assert!(model.w_u.iter().chain(&model.w_p).all(|&w| w == 0.0));
    assert!(model.sigma > 0.0);
    assert!(train_crf(&[], &bank, &CrfHyper::default(), SubsetMask::full(5)).is_err());
}

#[test]
fn perceptron_recovers_truth_with_perfect_unaries() {
    let mut config = CorpusConfig { grid: [4, 4, 3], ..Default::default() };
    for ty in &mut config.descriptors {
        ty.informativeness = 8.0;
        ty.noise = 0.3;
    }
    let corpus = generate_corpus(&config, 4).unwrap();
    let bank = train_bank(&corpus.videos, &BankHyper::default()).unwrap();
    let types = SubsetMask::full(5);
    let model = train_crf(&corpus.videos, &bank, &CrfHyper::default(), types).unwrap();
    for video in &corpus.videos {
        let masks = vec![types; video.graph.len()];
        let ctx = DescriptorContext { bank: &video.descriptors, masks: &masks, classifiers: &bank };
        let dists: Vec<Vec<f64>> = (0..video.graph.len())
            .map(|i| bank.predict_node(types, &video.descriptors, i).unwrap())
            .collect();
        let potentials = CrfInstance::new(&model, &video.graph, &dists, &ctx).unwrap().potentials(&model);
        let out = potentials.expand(&potentials.unary_argmax(), 0);
        assert_eq!(out.labeling, video.graph.truth().unwrap());
    }
}

#[test]
fn learned_pairwise_prefers_agreement_on_smooth_corpora() {
    // weak descriptors, so labels must come from neighbours
    let mut config = CorpusConfig::default();
    for ty in &mut config.descriptors {
        ty.informativeness = 0.8;
        ty.noise = 1.0;
        ty.classes = None;
    }
    let corpus = generate_corpus(&config, 6).unwrap();
    let bank = train_bank(&corpus.videos, &BankHyper::default()).unwrap();
    let model = train_crf(&corpus.videos, &bank, &CrfHyper::default(), SubsetMask::full(4)).unwrap();
    let l = model.labels;
    let diag: f64 = (0..l).map(|y| model.w_p[y * l + y]).sum::<f64>() / l as f64;
    let off: f64 = (0..l * l).filter(|k| k / l != k % l).map(|k| model.w_p[k]).sum::<f64>() / (l * l - l) as f64;
    assert!(diag > off, "diag {diag} off {off} {model:?}");
}

#[test]
fn model_json_round_trip() {
    let model = CrfModel { labels: 2, w_u: vec![0.1, 0.2], w_p: vec![1.0, -1.0, 0.5, 0.25], sigma: 1.5, types: SubsetMask::full(3) };
    assert_eq!(CrfModel::from_json(&model.to_json().unwrap()).unwrap(), model);
    assert!(CrfModel::from_json("{\"L\": 2}").is_err());
}
