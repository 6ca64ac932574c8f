use std::sync::OnceLock;

use budgetseg::budget_engine::{interpolate_unaries, run_budgeted_inference, SelectStrategy, Setting};
use budgetseg::classifier_bank::{train_bank, BankHyper, ClassifierBank, SubsetMask};
use budgetseg::crf::{train_crf, CrfHyper, CrfModel, Potentials};
use budgetseg::policy::{Action, PolicyWeights};
use budgetseg::svgraph::{generate_corpus, Corpus, CorpusConfig};
use proptest::prelude::*;

struct Fixture {
    corpus: Corpus,
    bank: ClassifierBank,
    crf: CrfModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let config = CorpusConfig { grid: [3, 3, 4], ..Default::default() };
        let corpus = generate_corpus(&config, 4).unwrap();
        let bank = train_bank(&corpus.videos, &BankHyper { epochs: 5, ..Default::default() }).unwrap();
        let crf = train_crf(&corpus.videos, &bank, &CrfHyper { epochs: 2, ..Default::default() }, SubsetMask::full(5)).unwrap();
        Fixture { corpus, bank, crf }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn charged_cost_never_exceeds_budget(
        video in 0usize..4,
        budget in 0u64..600,
        policy_seed in any::<u64>(),
        run_seed in any::<u64>(),
        random_selection in any::<bool>(),
    ) {
        let f = fixture();
        let setting = Setting {
            classifiers: &f.bank,
            crf: &f.crf,
            strategy: if random_selection { SelectStrategy::Random } else { SelectStrategy::NeighborConfidence },
            types: SubsetMask::full(5),
            inference_seed: 1,
            weighted: true,
        };
        let v = &f.corpus.videos[video];
        let env = setting.env(v);
        let policy = PolicyWeights::random(5, 4, policy_seed);
        let (labeling, trace) = run_budgeted_inference(&env, &policy, budget, run_seed).unwrap();
        prop_assert!(trace.spent() <= budget);
        prop_assert_eq!(labeling.len(), v.graph.len());
        let mut remaining = budget;
        let mut seen = std::collections::HashSet::new();
        for s in &trace.steps {
            remaining -= s.cost;
            prop_assert_eq!(s.remaining, remaining);
            if let Action::Descriptor(t) = s.action {
                prop_assert!(seen.insert((s.node, t)), "descriptor charged twice");
                prop_assert_eq!(s.cost, v.descriptors.cost(t));
            } else {
                prop_assert_eq!(s.cost, 0);
            }
        }
    }

    #[test]
    fn expansion_never_lowers_the_score(
        n in 2usize..12,
        labels in 2usize..5,
        seed in any::<u64>(),
        values in proptest::collection::vec(-2.0f64..2.0, 12 * 5 + 66 * 25),
    ) {
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| (i * 7 + j * 3) % 3 != 0 || j == i + 1)
            .collect();
        let unary = values[..n * labels].to_vec();
        let pair = values[n * labels..n * labels + edges.len() * labels * labels].to_vec();
        let p = Potentials::from_tables(labels, unary, edges, pair).unwrap();
        let init = p.unary_argmax();
        let e = p.expand(&init, seed);
        prop_assert!(e.trace.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(p.score(&e.labeling) >= p.score(&init) - 1e-12);
        prop_assert!((p.score(&e.labeling) - e.trace[e.trace.len() - 1]).abs() < 1e-9);
    }

    #[test]
    fn interpolated_unaries_are_distributions(video in 0usize..4, keep in proptest::collection::vec(any::<bool>(), 36)) {
        let f = fixture();
        let v = &f.corpus.videos[video];
        let computed: Vec<Option<Vec<f64>>> = (0..v.graph.len())
            .map(|i| keep[i].then(|| f.bank.predict_node(SubsetMask::from_bits(1), &v.descriptors, i).unwrap()))
            .collect();
        let dists = interpolate_unaries(&v.graph, &computed).unwrap();
        for (i, d) in dists.iter().enumerate() {
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if let Some(c) = &computed[i] {
                prop_assert_eq!(d, c);
            }
        }
    }
}

#[test]
fn corpus_json_round_trips() {
    let corpus = &fixture().corpus;
    let text = corpus.to_json().unwrap();
    assert_eq!(&Corpus::from_json(&text).unwrap(), corpus);
}
