use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use budgetseg::budget_engine::{read_trace_csv, write_trace_csv, Budget, RunTrace, TraceStep};
use budgetseg::classifier_bank::{train_bank, BankHyper, ClassifierBank};
use budgetseg::crf::{train_crf, CrfHyper, CrfModel};
use budgetseg::error::{Error, Result};
use budgetseg::harness::{
    budget_label, descriptor_histograms, infer_video, train_models, write_histograms, write_results_csv,
    write_training_artifacts, Experiment, ExperimentConfig, Learned, Trained, Variant,
};
use budgetseg::policy::PolicyWeights;
use budgetseg::seed;
use budgetseg::svgraph::{generate_corpus, load_corpus, save_corpus, Corpus};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "budgetseg", version, about = "Budgeted CRF inference over supervoxel graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Voxel-weighted accuracy (true) or plain node accuracy (false).
    #[arg(long, global = true)]
    weighted_accuracy: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Train the descriptor-subset classifiers on the training half.
    TrainClassifiers,
    /// Train the CRF models on the training half.
    TrainCrf,
    /// Train one inference policy by policy iteration.
    TrainPolicy {
        #[arg(long)]
        budget: Budget,
        #[arg(long, default_value = "NhbRnk")]
        variant: Variant,
    },
    /// Run one variant on the test videos.
    Infer {
        #[arg(long)]
        budget: Budget,
        #[arg(long)]
        variant: Variant,
        /// Policy JSON; defaults to the one written by `train-policy`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Full experiment: every variant at every budget.
    Eval,
    /// Descriptor histograms from the traces written by `eval`.
    Hist {
        #[arg(long, default_value = "Full")]
        variant: Variant,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Gen => {
            let corpus = generate_corpus(&config.corpus, config.videos)?;
            save_corpus(&corpus, out.join("corpus.json"))?;
            println!("wrote {} videos to {}", corpus.videos.len(), out.join("corpus.json").display());
        }
        Command::TrainClassifiers => {
            let corpus = corpus(&config, out)?;
            let bank = train_bank(corpus.split().0, &BankHyper { seed: seed::derive(config.seed, 1), ..config.bank })?;
            fs::write(out.join("bank.json"), bank.to_json()?)?;
            println!("wrote {}", out.join("bank.json").display());
        }
        Command::TrainCrf => {
            let corpus = corpus(&config, out)?;
            let bank = ClassifierBank::from_json(&read(&out.join("bank.json"))?)?;
            let trained = train_crfs(&config, corpus.split().0, bank)?;
            fs::write(out.join("crf_base.json"), trained.crf_base.to_json()?)?;
            fs::write(out.join("crf_full.json"), trained.crf_full.to_json()?)?;
            println!("wrote {} and {}", out.join("crf_base.json").display(), out.join("crf_full.json").display());
        }
        Command::TrainPolicy { budget, variant } => {
            let exp = experiment(config, out)?;
            let outcome = exp.train_policy(variant, budget, budget_index(&exp.config, budget))?;
            fs::create_dir_all(out.join("policies"))?;
            write_training_artifacts(out, variant, &budget_label(budget), &outcome)?;
            println!(
                "{variant} at {budget}: training accuracy {:.4} (initial {:.4})",
                outcome.best_accuracy, outcome.initial_accuracy
            );
        }
        Command::Infer { budget, variant, policy } => {
            let exp = experiment(config, out)?;
            let bi = budget_index(&exp.config, budget);
            let label = budget_label(budget);
            let learned = if variant.is_learned_policy() {
                let path = policy.unwrap_or_else(|| out.join("policies").join(format!("{variant}_{label}.json")));
                Learned::Policy(PolicyWeights::from_json(&read(&path)?)?)
            } else {
                exp.learn(variant, budget, bi)?
            };
            let dir = out.join("infer");
            fs::create_dir_all(&dir)?;
            let eval_seed = seed::derive(exp.config.seed, 9);
            let mut traces: Vec<RunTrace> = Vec::new();
            for (k, video) in exp.test_videos().iter().enumerate() {
                let (_, trace) = infer_video(&exp, variant, video, budget, &learned, seed::derive(eval_seed, k as u64))?;
                write_trace_csv(&trace.steps, fs::File::create(dir.join(format!("{variant}_{label}_video{k}.csv")))?)?;
                traces.push(trace);
            }
            let row = exp.row(variant, budget, &traces)?;
            write_results_csv(
                std::slice::from_ref(&row),
                exp.label_count(),
                fs::File::create(dir.join(format!("{variant}_{label}.csv")))?,
            )?;
            println!("{variant} at {}: avg {:.4}, cost spent {:.1}", row.budget, row.avg, row.cost_spent);
        }
        Command::Eval => {
            let exp = experiment(config, out)?;
            let report = exp.run(Some(out))?;
            for row in &report.rows {
                println!("{:<12} {:>6}  avg {:.4}  cost {:.1}", row.variant.to_string(), row.budget, row.avg, row.cost_spent);
            }
        }
        Command::Hist { variant } => {
            let type_count = match fs::read_to_string(out.join("bank.json")) {
                Ok(text) => ClassifierBank::from_json(&text)?.type_count(),
                Err(_) => config.corpus.descriptors.len(),
            };
            let mut runs: Vec<(String, Vec<Vec<TraceStep>>)> = Vec::new();
            for &budget in &config.budgets {
                let label = budget_label(budget);
                let traces = read_traces(&out.join("traces"), variant, &label)?;
                if !traces.is_empty() {
                    runs.push((label, traces));
                }
            }
            let last = runs
                .last()
                .map(|(l, _)| l.clone())
                .ok_or_else(|| Error::Data(format!("no {variant} traces under {}", out.join("traces").display())))?;
            let hist = descriptor_histograms(&runs, type_count, &last)?;
            write_histograms(
                &hist,
                fs::File::create(out.join("hist_budget.csv"))?,
                fs::File::create(out.join("hist_deciles.csv"))?,
            )?;
            println!("wrote {} and {}", out.join("hist_budget.csv").display(), out.join("hist_deciles.csv").display());
        }
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(w) = common.weighted_accuracy {
        config.weighted_accuracy = w;
    }
    Ok(config)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// The corpus written by `gen`, else the configured one.
fn corpus(config: &ExperimentConfig, out: &Path) -> Result<Corpus> {
    let saved = out.join("corpus.json");
    let corpus = if saved.exists() {
        load_corpus(&saved)?
    } else if let Some(path) = &config.corpus_path {
        load_corpus(path)?
    } else {
        generate_corpus(&config.corpus, config.videos)?
    };
    if corpus.videos.len() < 2 {
        return Err(Error::Data("corpus needs at least two videos".into()));
    }
    Ok(corpus)
}

fn train_crfs(config: &ExperimentConfig, train: &[budgetseg::svgraph::Video], bank: ClassifierBank) -> Result<Trained> {
    let d = bank.type_count();
    let full = budgetseg::classifier_bank::SubsetMask::full(d);
    let base = budgetseg::classifier_bank::SubsetMask::full(config.base_types.min(d));
    let hyper = CrfHyper { seed: seed::derive(config.seed, 2), ..config.crf };
    let crf_base = train_crf(train, &bank, &hyper, base)?;
    let crf_full = if full == base { crf_base.clone() } else { train_crf(train, &bank, &hyper, full)? };
    Ok(Trained { bank, crf_base, crf_full, base, full })
}

/// Reuses saved classifiers and CRFs when present and trains what is missing.
fn experiment(config: ExperimentConfig, out: &Path) -> Result<Experiment> {
    let corpus = corpus(&config, out)?;
    let bank_path = out.join("bank.json");
    let trained = if bank_path.exists() {
        let bank = ClassifierBank::from_json(&read(&bank_path)?)?;
        let (base_path, full_path) = (out.join("crf_base.json"), out.join("crf_full.json"));
        if base_path.exists() && full_path.exists() {
            let crf_base = CrfModel::from_json(&read(&base_path)?)?;
            let crf_full = CrfModel::from_json(&read(&full_path)?)?;
            Trained { base: crf_base.types, full: crf_full.types, bank, crf_base, crf_full }
        } else {
            train_crfs(&config, corpus.split().0, bank)?
        }
    } else {
        train_models(&config, corpus.split().0)?
    };
    Ok(Experiment { config, corpus, trained })
}

fn budget_index(config: &ExperimentConfig, budget: Budget) -> usize {
    config.budgets.iter().position(|&b| b == budget).unwrap_or(0)
}

fn read_traces(dir: &Path, variant: Variant, label: &str) -> Result<Vec<Vec<TraceStep>>> {
    let mut out = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("{variant}_{label}_video{k}.csv"));
        if !path.exists() {
            break;
        }
        out.push(read_trace_csv(fs::File::open(path)?)?);
    }
    Ok(out)
}
