use crate::budget_engine::{SelectStrategy, Setting};
use crate::classifier_bank::{train_bank, BankHyper, ClassifierBank, SubsetMask};
use crate::crf::{train_crf, CrfHyper, CrfModel};
use crate::svgraph::{generate_corpus, Corpus, CorpusConfig};

/// Small trained pipeline shared by unit tests.
pub struct Fixture {
    pub corpus: Corpus,
    pub bank: ClassifierBank,
    pub crf: CrfModel,
    pub types: SubsetMask,
}

impl Fixture {
    pub fn new(videos: usize) -> Self {
        let config = CorpusConfig { grid: [4, 4, 3], ..Default::default() };
        let corpus = generate_corpus(&config, videos.max(3)).unwrap();
        let bank = train_bank(&corpus.videos, &BankHyper { epochs: 10, ..Default::default() }).unwrap();
        let types = SubsetMask::full(4);
        let crf = train_crf(&corpus.videos, &bank, &CrfHyper { epochs: 3, ..Default::default() }, types).unwrap();
        Fixture { corpus, bank, crf, types }
    }

    pub fn setting(&self, strategy: SelectStrategy) -> Setting<'_> {
        Setting {
            classifiers: &self.bank,
            crf: &self.crf,
            strategy,
            types: self.types,
            inference_seed: 3,
            weighted: true,
        }
    }
}
