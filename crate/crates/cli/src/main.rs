use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use headlab::coref::LinkMode;
use headlab::experiment::{self, ExperimentConfig};
use headlab::injection::HeadSelection;
use headlab::Error;

/// Attention-head importance, pruning and coreference-injection experiments
/// on a synthetic dialogue summarization corpus.
///
/// Every command reads and writes under `<outdir>/<run-id>/`. The output
/// directory can also be set with the HEADLAB_OUTDIR environment variable,
/// which takes precedence over the config file but not over `--outdir`.
///
/// Exit codes: 0 success, 1 configuration error, 2 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "headlab", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or copy) the corpus, its vocabulary and statistics.
    GenData,
    /// Train one baseline model per seed.
    Train,
    /// Score every attention head of each baseline.
    ScoreHeads,
    /// Write pruning plans and train the lowest-ranking-pruned models.
    Prune,
    /// Select heads, then train models with coreference-guided attention.
    Inject,
    /// Decode the test split with every model and score it.
    Eval,
    /// Render markdown and CSV report tables from stored results.
    Report,
    /// Run every stage in order for all seeds.
    RunMatrix,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON config file; absent fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    /// Subdirectory of the output root for this run.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Heads pruned per layer.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Heads whose importance coefficient of variation across the ensemble
    /// exceeds this are never selected.
    #[arg(long, global = true)]
    cov_threshold: Option<f64>,
    /// Head selection methods for injection (importance, probing).
    #[arg(long, global = true, value_delimiter = ',')]
    selection: Option<Vec<HeadSelection>>,
    /// Coreference matrix kinds for injection (full, adjacent).
    #[arg(long, global = true, value_delimiter = ',')]
    link_mode: Option<Vec<LinkMode>>,
    /// Encoder layers receiving injection, as `lo:hi` (half-open).
    #[arg(long, global = true, value_parser = parse_range)]
    layer_range: Option<(usize, usize)>,
    /// Injected heads per layer.
    #[arg(long, global = true)]
    inject_k: Option<usize>,
    /// Beam width for test decoding.
    #[arg(long, global = true)]
    beam_size: Option<usize>,
    /// Existing JSONL corpus used instead of the generator.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Seed of the corpus generator.
    #[arg(long, global = true)]
    corpus_seed: Option<u64>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env();
        if let Some(v) = &self.outdir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.run_id {
            cfg.run_id = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.training.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.training.learning_rate = v;
        }
        if let Some(v) = self.k {
            cfg.analysis.k = v;
        }
        if let Some(v) = self.cov_threshold {
            cfg.analysis.cov_threshold = v;
        }
        if let Some(v) = &self.selection {
            cfg.injection.selections = v.clone();
        }
        if let Some(v) = &self.link_mode {
            cfg.injection.link_modes = v.clone();
        }
        if let Some(v) = self.layer_range {
            cfg.injection.layer_range = Some(v);
        }
        if let Some(v) = self.inject_k {
            cfg.injection.k = v;
        }
        if let Some(v) = self.beam_size {
            cfg.decode.beam_size = v;
        }
        if let Some(v) = &self.corpus {
            cfg.corpus.path = Some(v.clone());
        }
        if let Some(v) = self.corpus_seed {
            cfg.corpus.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

type Stage = fn(&ExperimentConfig) -> Result<(), Error>;

const PIPELINE: [(&str, Stage); 6] = [
    ("gen-data", experiment::gen_data),
    ("train", experiment::train_baselines),
    ("score-heads", experiment::score_baselines),
    ("prune", experiment::prune),
    ("inject", experiment::inject),
    ("eval", experiment::eval),
];

fn stage(name: &str, f: Stage, cfg: &ExperimentConfig) -> Result<(), Error> {
    let start = Instant::now();
    eprintln!("headlab: {name} ...");
    f(cfg)?;
    eprintln!(
        "headlab: {name} done in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn report(cfg: &ExperimentConfig) -> Result<(), Error> {
    for f in experiment::report(cfg)?.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(command: &Command, cfg: &ExperimentConfig) -> Result<(), Error> {
    let named = |name: &str| PIPELINE.iter().find(|(n, _)| *n == name).map(|&(_, f)| f);
    let single = match command {
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::ScoreHeads => "score-heads",
        Command::Prune => "prune",
        Command::Inject => "inject",
        Command::Eval => "eval",
        Command::Report => return report(cfg),
        Command::RunMatrix => {
            for (name, f) in PIPELINE {
                stage(name, f, cfg)?;
            }
            return report(cfg);
        }
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(cfg)?);
            return Ok(());
        }
    };
    stage(
        single,
        named(single).expect("every single-stage command is in the pipeline"),
        cfg,
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cfg = match cli.overrides.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("headlab: configuration error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("headlab: {e}");
            ExitCode::from(2)
        }
    }
}
