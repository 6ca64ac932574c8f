//! End-to-end experiments: train every component, sweep budgets, evaluate
//! variants and baselines, write result tables and selection histograms.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::budget_engine::{
    run_budgeted_inference, write_trace_csv, Budget, RunTrace, SelectStrategy, Setting, TraceStep,
};
use crate::classifier_bank::{train_bank, BankHyper, ClassifierBank, SubsetMask};
use crate::crf::{train_crf, CrfHyper, CrfModel};
use crate::error::{Error, Result};
use crate::learn::{
    baseline1, baseline2, capi_train, qlearn_baseline3, run_global_subset, CapiConfig, CapiOutcome, QHyper,
    RankerHyper,
};
use crate::policy::{Action, PolicyWeights};
use crate::seed;
use crate::svgraph::{generate_corpus, load_corpus, Corpus, CorpusConfig, Label, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    RndRnk,
    NhbRnk,
    Full,
    Baseline1,
    Baseline2,
    Baseline3,
    UnboundedCrf,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::RndRnk,
        Variant::NhbRnk,
        Variant::Full,
        Variant::Baseline1,
        Variant::Baseline2,
        Variant::Baseline3,
        Variant::UnboundedCrf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RndRnk => "RndRnk",
            Variant::NhbRnk => "NhbRnk",
            Variant::Full => "Full",
            Variant::Baseline1 => "Baseline1",
            Variant::Baseline2 => "Baseline2",
            Variant::Baseline3 => "Baseline3",
            Variant::UnboundedCrf => "UnboundedCRF",
        }
    }

    /// Variants driven by a CAPI-trained policy.
    pub fn is_learned_policy(self) -> bool {
        matches!(self, Variant::RndRnk | Variant::NhbRnk | Variant::Full)
    }

    fn stream(self) -> u64 {
        Variant::ALL.iter().position(|&v| v == self).unwrap_or(0) as u64
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Budget::Units(u) => s.serialize_u64(u),
            Budget::Fraction(f) => s.serialize_f64(f),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    /// Integers are cost units, floats are fractions, strings use the
    /// `FromStr` rules.
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Units(u64),
            Fraction(f64),
            Text(String),
        }
        let budget = match Raw::deserialize(d)? {
            Raw::Units(u) => Budget::Units(u),
            Raw::Fraction(f) if f >= 0.0 && f.is_finite() => Budget::Fraction(f),
            Raw::Fraction(f) => return Err(serde::de::Error::custom(format!("invalid budget {f}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom)?,
        };
        Ok(budget)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyTraining {
    pub max_iters: usize,
    pub patience: usize,
    pub max_states: usize,
    pub simulations: Option<usize>,
    pub margin: f64,
    /// Independent runs from different random initial policies; the one with
    /// the best training accuracy is kept.
    pub restarts: usize,
    pub ranker: RankerHyper,
}

impl Default for PolicyTraining {
    fn default() -> Self {
        PolicyTraining {
            max_iters: 4,
            patience: 2,
            max_states: 5000,
            simulations: None,
            margin: CapiConfig::default().margin,
            restarts: 3,
            ranker: RankerHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Load this corpus instead of generating one.
    pub corpus_path: Option<PathBuf>,
    /// Total videos; the first half trains, the second half tests.
    pub videos: usize,
    pub budgets: Vec<Budget>,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub weighted_accuracy: bool,
    /// Descriptor types available to every variant except `Full`.
    pub base_types: usize,
    pub bank: BankHyper,
    pub crf: CrfHyper,
    pub policy: PolicyTraining,
    pub qlearn: QHyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            corpus_path: None,
            videos: 40,
            budgets: vec![Budget::Fraction(0.2), Budget::Fraction(0.5), Budget::Fraction(0.9)],
            variants: Variant::ALL.to_vec(),
            seed: 0,
            weighted_accuracy: true,
            base_types: 4,
            bank: BankHyper::default(),
            crf: CrfHyper::default(),
            policy: PolicyTraining::default(),
            qlearn: QHyper::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("at least one variant is required"));
        }
        if self.budgets.is_empty() {
            return Err(Error::config("at least one budget is required"));
        }
        if self.budgets.iter().any(|b| matches!(b, Budget::Units(0)) || matches!(b, Budget::Fraction(f) if *f <= 0.0)) {
            return Err(Error::config("budgets must be positive"));
        }
        if self.corpus_path.is_none() {
            self.corpus.validate()?;
            if self.videos < 2 {
                return Err(Error::config("need at least two videos for a train/test split"));
            }
        }
        if self.base_types == 0 {
            return Err(Error::config("base_types must be positive"));
        }
        Ok(())
    }
}

/// Label of a budget in result tables.
pub fn budget_label(budget: Budget) -> String {
    budget.to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub variant: Variant,
    pub budget: String,
    /// Recall per ground-truth class, `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Mean per-class recall.
    pub avg: f64,
    pub cost_spent: f64,
    /// Mean per-video Hamming accuracy.
    pub hamming: f64,
    /// Resolved budget in units; `None` for the budget-free variant.
    pub budget_units: Option<f64>,
}

/// Summary of one (variant, budget) evaluation over the test videos.
pub fn summarize(
    variant: Variant,
    budget: String,
    budget_units: Option<f64>,
    videos: &[Video],
    traces: &[RunTrace],
    weighted: bool,
) -> Result<ResultRow> {
    if traces.is_empty() || traces.len() != videos.len() {
        return Err(Error::data("need one run per test video"));
    }
    let labels = videos[0].graph.label_count();
    let mut hit = vec![0.0; labels];
    let mut total = vec![0.0; labels];
    let mut hamming = 0.0;
    for (video, trace) in videos.iter().zip(traces) {
        let truth = video.graph.truth()?;
        for (node, (&y, &p)) in truth.iter().zip(&trace.labeling).enumerate() {
            let w = if weighted { f64::from(video.graph.node(node).voxel_count) } else { 1.0 };
            total[y] += w;
            if y == p {
                hit[y] += w;
            }
        }
        hamming += trace.accuracy.ok_or_else(|| Error::data("test video has no truth"))?;
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| if t > 0.0 { Some(h / t) } else { None })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let n = traces.len() as f64;
    Ok(ResultRow {
        variant,
        budget,
        avg: present.iter().sum::<f64>() / present.len().max(1) as f64,
        per_class,
        cost_spent: traces.iter().map(|t| t.spent() as f64).sum::<f64>() / n,
        hamming: hamming / n,
        budget_units,
    })
}

pub fn results_header(labels: usize) -> Vec<String> {
    let mut header = vec!["variant".to_string(), "budget".to_string()];
    header.extend((0..labels).map(|y| format!("class_{y}")));
    header.push("avg".into());
    header.push("cost_spent".into());
    header
}

pub fn write_results_csv<W: io::Write>(rows: &[ResultRow], labels: usize, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(results_header(labels))?;
    for row in rows {
        let mut record = vec![row.variant.to_string(), row.budget.clone()];
        record.extend(
            row.per_class
                .iter()
                .map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default()),
        );
        record.push(format!("{:.6}", row.avg));
        record.push(format!("{:.3}", row.cost_spent));
        writer.write_record(record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Selection counts per descriptor type for each budget, and for one budget
/// the counts per tenth of the run's spent cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Histograms {
    pub type_count: usize,
    pub per_budget: BTreeMap<String, Vec<u64>>,
    /// `deciles[k][t]`: selections of type `t` made while the spent cost was
    /// in the `k`-th tenth of the run's total.
    pub deciles: Vec<Vec<u64>>,
}

fn decile_counts(steps: &[TraceStep], type_count: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; type_count]; 10];
    let total: u64 = steps.iter().map(|s| s.cost).sum();
    let mut spent = 0u64;
    for s in steps {
        if let Action::Descriptor(t) = s.action {
            let k = if total == 0 { 0 } else { ((10 * spent) / total).min(9) as usize };
            if t < type_count {
                counts[k][t] += 1;
            }
        }
        spent += s.cost;
    }
    counts
}

/// `runs` pairs a budget label with the traces of that budget; the decile
/// table is built from the runs labelled `decile_budget`.
pub fn descriptor_histograms(
    runs: &[(String, Vec<Vec<TraceStep>>)],
    type_count: usize,
    decile_budget: &str,
) -> Result<Histograms> {
    if runs.iter().all(|(_, traces)| traces.is_empty()) {
        return Err(Error::data("no traces to histogram"));
    }
    let mut per_budget = BTreeMap::new();
    let mut deciles = vec![vec![0u64; type_count]; 10];
    for (label, traces) in runs {
        let counts: &mut Vec<u64> = per_budget.entry(label.clone()).or_insert_with(|| vec![0; type_count]);
        for steps in traces {
            for s in steps {
                if let Action::Descriptor(t) = s.action {
                    if t < type_count {
                        counts[t] += 1;
                    }
                }
            }
            if label == decile_budget {
                for (row, add) in deciles.iter_mut().zip(decile_counts(steps, type_count)) {
                    row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Ok(Histograms {
        type_count,
        per_budget,
        deciles,
    })
}

/// Mean over runs of the share of `type_id` among selections in the first
/// and in the last cost decile. Runs with an empty decile are skipped for it.
pub fn decile_shares(traces: &[Vec<TraceStep>], type_count: usize, type_id: usize) -> (f64, f64) {
    let mut first = Vec::new();
    let mut last = Vec::new();
    for steps in traces {
        let counts = decile_counts(steps, type_count);
        for (k, acc) in [(0usize, &mut first), (9, &mut last)] {
            let total: u64 = counts[k].iter().sum();
            if total > 0 {
                acc.push(counts[k][type_id] as f64 / total as f64);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&first), mean(&last))
}

pub fn write_histograms<W: io::Write>(hist: &Histograms, per_budget: W, deciles: W) -> Result<()> {
    let types: Vec<String> = (0..hist.type_count).map(|t| format!("type_{t}")).collect();
    let mut w = csv::Writer::from_writer(per_budget);
    w.write_record(std::iter::once("budget".to_string()).chain(types.iter().cloned()))?;
    for (label, counts) in &hist.per_budget {
        w.write_record(std::iter::once(label.clone()).chain(counts.iter().map(u64::to_string)))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(deciles);
    w.write_record(std::iter::once("decile".to_string()).chain(types))?;
    for (k, counts) in hist.deciles.iter().enumerate() {
        w.write_record(std::iter::once(k.to_string()).chain(counts.iter().map(u64::to_string)))?;
    }
    w.flush()?;
    Ok(())
}

/// Trained bank and the two CRF models (base descriptor set and all types).
#[derive(Clone, Debug)]
pub struct Trained {
    pub bank: ClassifierBank,
    pub crf_base: CrfModel,
    pub crf_full: CrfModel,
    pub base: SubsetMask,
    pub full: SubsetMask,
}

pub fn train_models(config: &ExperimentConfig, train: &[Video]) -> Result<Trained> {
    let d = train
        .first()
        .ok_or_else(|| Error::data("no training videos"))?
        .descriptors
        .type_count();
    let full = SubsetMask::full(d);
    let base = SubsetMask::full(config.base_types.min(d));
    let bank = train_bank(train, &BankHyper { seed: seed::derive(config.seed, 1), ..config.bank })?;
    let crf_hyper = CrfHyper { seed: seed::derive(config.seed, 2), ..config.crf };
    let crf_base = train_crf(train, &bank, &crf_hyper, base)?;
    let crf_full = if full == base { crf_base.clone() } else { train_crf(train, &bank, &crf_hyper, full)? };
    Ok(Trained {
        bank,
        crf_base,
        crf_full,
        base,
        full,
    })
}

/// What a variant needs beyond the trained models.
#[derive(Clone, Debug)]
pub enum Learned {
    Nothing,
    Policy(PolicyWeights),
    Subset(SubsetMask),
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub trained: Trained,
}

impl Experiment {
    /// Generate or load the corpus and train bank and CRFs.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = match &config.corpus_path {
            Some(path) => load_corpus(path)?,
            None => generate_corpus(&config.corpus, config.videos)?,
        };
        if corpus.videos.len() < 2 {
            return Err(Error::data("corpus needs at least two videos"));
        }
        let trained = train_models(&config, corpus.split().0)?;
        Ok(Experiment { config, corpus, trained })
    }

    pub fn train_videos(&self) -> &[Video] {
        self.corpus.split().0
    }

    pub fn test_videos(&self) -> &[Video] {
        self.corpus.split().1
    }

    pub fn type_count(&self) -> usize {
        self.trained.bank.type_count()
    }

    pub fn label_count(&self) -> usize {
        self.trained.bank.label_count()
    }

    pub fn setting(&self, variant: Variant) -> Setting<'_> {
        let (crf, types) = if variant == Variant::Full {
            (&self.trained.crf_full, self.trained.full)
        } else {
            (&self.trained.crf_base, self.trained.base)
        };
        Setting {
            classifiers: &self.trained.bank,
            crf,
            strategy: if variant == Variant::RndRnk { SelectStrategy::Random } else { SelectStrategy::NeighborConfidence },
            types,
            inference_seed: seed::derive(self.config.seed, 3),
            weighted: self.config.weighted_accuracy,
        }
    }

    fn run_seed(&self, variant: Variant, budget_index: usize, purpose: u64) -> u64 {
        seed::derive(
            seed::derive(self.config.seed, 100 + purpose),
            variant.stream() * 1000 + budget_index as u64,
        )
    }

    pub fn capi_config(&self, variant: Variant, budget: Budget, budget_index: usize) -> CapiConfig {
        let p = &self.config.policy;
        CapiConfig {
            budget,
            simulations: p.simulations,
            max_states: p.max_states,
            ranker: p.ranker,
            seed: self.run_seed(variant, budget_index, 1),
            margin: p.margin,
        }
    }

    /// CAPI from seeded random policies on the training videos.
    pub fn train_policy(&self, variant: Variant, budget: Budget, budget_index: usize) -> Result<CapiOutcome> {
        if !variant.is_learned_policy() {
            return Err(Error::config(format!("{variant} has no learned policy")));
        }
        let p = &self.config.policy;
        let init_seed = self.run_seed(variant, budget_index, 2);
        let mut best: Option<CapiOutcome> = None;
        for r in 0..p.restarts.max(1) {
            let s = if r == 0 { init_seed } else { seed::derive(init_seed, r as u64) };
            let initial = PolicyWeights::random(self.type_count(), self.label_count(), s);
            let outcome = capi_train(
                &initial,
                &self.setting(variant),
                self.train_videos(),
                &self.capi_config(variant, budget, budget_index),
                p.max_iters,
                p.patience,
            )?;
            if best.as_ref().is_none_or(|b| outcome.best_accuracy > b.best_accuracy) {
                best = Some(outcome);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    pub fn train_subset(&self, budget: Budget, budget_index: usize) -> Result<SubsetMask> {
        let hyper = QHyper { seed: self.run_seed(Variant::Baseline3, budget_index, 2), ..self.config.qlearn };
        Ok(qlearn_baseline3(&self.setting(Variant::Baseline3), self.train_videos(), budget, &hyper)?.subset)
    }

    pub fn learn(&self, variant: Variant, budget: Budget, budget_index: usize) -> Result<Learned> {
        Ok(match variant {
            v if v.is_learned_policy() => Learned::Policy(self.train_policy(v, budget, budget_index)?.policy),
            Variant::Baseline3 => Learned::Subset(self.train_subset(budget, budget_index)?),
            _ => Learned::Nothing,
        })
    }

    /// Run one variant on every test video.
    pub fn evaluate(&self, variant: Variant, budget: Budget, budget_index: usize, learned: &Learned) -> Result<Vec<RunTrace>> {
        let setting = self.setting(variant);
        let eval_seed = self.run_seed(variant, budget_index, 3);
        self.test_videos()
            .iter()
            .enumerate()
            .map(|(k, video)| {
                let env = setting.env(video);
                let b = budget.resolve(video);
                let s = seed::derive(eval_seed, k as u64);
                match (variant, learned) {
                    (v, Learned::Policy(p)) if v.is_learned_policy() => {
                        run_budgeted_inference(&env, p, b, s).map(|(_, t)| t)
                    }
                    (Variant::Baseline1, _) => baseline1(&env, b, s),
                    (Variant::Baseline2, _) => baseline2(&env, b, s),
                    (Variant::Baseline3, Learned::Subset(m)) => run_global_subset(&env, *m, b),
                    (Variant::UnboundedCrf, _) => {
                        let cost = video.full_cost(setting.types.types());
                        run_global_subset(&env, setting.types, cost)
                    }
                    _ => Err(Error::contract(format!("{variant} evaluated without its learned part"))),
                }
            })
            .collect()
    }

    pub fn row(&self, variant: Variant, budget: Budget, traces: &[RunTrace]) -> Result<ResultRow> {
        let (label, units) = if variant == Variant::UnboundedCrf {
            ("inf".to_string(), None)
        } else {
            let videos = self.test_videos();
            let mean = videos.iter().map(|v| budget.resolve(v) as f64).sum::<f64>() / videos.len() as f64;
            (budget_label(budget), Some(mean))
        };
        summarize(variant, label, units, self.test_videos(), traces, self.config.weighted_accuracy)
    }

    /// Every configured variant at every configured budget. With `out`, writes
    /// `results.csv`, per-run traces, training logs, policies and histograms.
    pub fn run(&self, out: Option<&Path>) -> Result<ExperimentReport> {
        if let Some(dir) = out {
            fs::create_dir_all(dir.join("traces"))?;
            fs::create_dir_all(dir.join("policies"))?;
        }
        let mut rows = Vec::new();
        let mut policy_traces: Vec<(String, Vec<Vec<TraceStep>>)> = Vec::new();
        let mut unbounded: Option<Vec<RunTrace>> = None;
        for (bi, &budget) in self.config.budgets.iter().enumerate() {
            for &variant in &self.config.variants {
                let label = budget_label(budget);
                let traces = if variant == Variant::UnboundedCrf {
                    if unbounded.is_none() {
                        unbounded = Some(self.evaluate(variant, budget, 0, &Learned::Nothing)?);
                    }
                    unbounded.clone().expect("just computed")
                } else {
                    let learned = if variant.is_learned_policy() {
                        let outcome = self.train_policy(variant, budget, bi)?;
                        if let Some(dir) = out {
                            write_training_artifacts(dir, variant, &label, &outcome)?;
                        }
                        Learned::Policy(outcome.policy)
                    } else {
                        self.learn(variant, budget, bi)?
                    };
                    self.evaluate(variant, budget, bi, &learned)?
                };
                if let Some(dir) = out {
                    for (k, t) in traces.iter().enumerate() {
                        let path = dir.join("traces").join(format!("{variant}_{label}_video{k}.csv"));
                        write_trace_csv(&t.steps, fs::File::create(path)?)?;
                    }
                }
                if variant.is_learned_policy() {
                    policy_traces.push((format!("{variant}@{label}"), traces.iter().map(|t| t.steps.clone()).collect()));
                }
                rows.push(self.row(variant, budget, &traces)?);
            }
        }
        if let Some(dir) = out {
            write_results_csv(&rows, self.label_count(), fs::File::create(dir.join("results.csv"))?)?;
            if let Some((last, _)) = policy_traces.last() {
                let hist = descriptor_histograms(&policy_traces, self.type_count(), last)?;
                write_histograms(
                    &hist,
                    fs::File::create(dir.join("hist_budget.csv"))?,
                    fs::File::create(dir.join("hist_deciles.csv"))?,
                )?;
            }
        }
        Ok(ExperimentReport { rows })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
}

impl ExperimentReport {
    pub fn row(&self, variant: Variant, budget: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && (r.budget == budget || variant == Variant::UnboundedCrf))
    }
}

pub fn write_training_artifacts(dir: &Path, variant: Variant, label: &str, outcome: &CapiOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(format!("train_log_{variant}_{label}.csv")))?;
    for entry in &outcome.log {
        w.serialize(entry)?;
    }
    w.flush()?;
    for (t, policy) in outcome.history.iter().enumerate() {
        fs::write(dir.join("policies").join(format!("{variant}_{label}_iter{t}.json")), policy.to_json()?)?;
    }
    fs::write(dir.join("policies").join(format!("{variant}_{label}.json")), outcome.policy.to_json()?)?;
    Ok(())
}

/// Labeling of one video by a single variant; used by the CLI's `infer`.
pub fn infer_video(
    experiment: &Experiment,
    variant: Variant,
    video: &Video,
    budget: Budget,
    learned: &Learned,
    seed_value: u64,
) -> Result<(Vec<Label>, RunTrace)> {
    let setting = experiment.setting(variant);
    let env = setting.env(video);
    let b = budget.resolve(video);
    let trace = match (variant, learned) {
        (v, Learned::Policy(p)) if v.is_learned_policy() => run_budgeted_inference(&env, p, b, seed_value)?.1,
        (Variant::Baseline1, _) => baseline1(&env, b, seed_value)?,
        (Variant::Baseline2, _) => baseline2(&env, b, seed_value)?,
        (Variant::Baseline3, Learned::Subset(m)) => run_global_subset(&env, *m, b)?,
        (Variant::UnboundedCrf, _) => run_global_subset(&env, setting.types, video.full_cost(setting.types.types()))?,
        _ => return Err(Error::config(format!("{variant} needs a trained policy or subset"))),
    };
    Ok((trace.labeling.clone(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(step: usize, action: Action, cost: u64) -> TraceStep {
        TraceStep { step, node: 0, action, cost, remaining: 0 }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("Baseline9".parse::<Variant>().unwrap_err().is_config());
    }

    #[test]
    fn header_matches_schema() {
        assert_eq!(
            results_header(3).join(","),
            "variant,budget,class_0,class_1,class_2,avg,cost_spent"
        );
    }

    #[test]
    fn single_type_histogram() {
        let runs = vec![("0.9".to_string(), vec![vec![step(0, Action::Descriptor(0), 2), step(1, Action::Finished, 0), step(2, Action::Descriptor(0), 2)]])];
        let h = descriptor_histograms(&runs, 3, "0.9").unwrap();
        assert_eq!(h.per_budget["0.9"], vec![2, 0, 0]);
        let total: u64 = h.deciles.iter().flatten().sum();
        assert_eq!(total, 2);
        assert!(h.deciles.iter().all(|r| r[1] == 0 && r[2] == 0));
        assert!(descriptor_histograms(&[], 3, "x").is_err());
    }

    #[test]
    fn deciles_partition_selections() {
        let steps: Vec<TraceStep> = (0..37).map(|k| step(k, Action::Descriptor(k % 3), 1 + (k % 4) as u64)).collect();
        let counts = decile_counts(&steps, 3);
        assert_eq!(counts.iter().flatten().sum::<u64>(), 37);
        // cheap type early, expensive late
        let mut shifted = vec![step(0, Action::Descriptor(0), 1); 5];
        shifted.extend(vec![step(0, Action::Descriptor(2), 8); 5]);
        let (first, last) = decile_shares(&[shifted], 3, 0);
        assert_eq!((first, last), (1.0, 0.0));
    }

    #[test]
    fn config_json_defaults_and_errors() {
        let c = ExperimentConfig::from_json(r#"{"budgets": [0.2, 480, "50%"], "variants": ["NhbRnk"]}"#).unwrap();
        assert_eq!(c.budgets, vec![Budget::Fraction(0.2), Budget::Units(480), Budget::Fraction(0.5)]);
        assert_eq!(c.videos, 40);
        assert!(ExperimentConfig::from_json(r#"{"variants": ["Nope"]}"#).unwrap_err().is_config());
        assert!(ExperimentConfig::from_json(r#"{"variants": []}"#).unwrap_err().is_config());
        assert!(ExperimentConfig::from_json(r#"{"budgets": [0]}"#).unwrap_err().is_config());
    }
}
