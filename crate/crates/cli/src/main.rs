use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use spt_core::assistant::AssistantClient;
use spt_core::corpus;
use spt_core::eval::evaluate_checkpoint;
use spt_core::experiment::{self, Grid, RunResult};
use spt_core::segment::{offline_assistant, Backend};
use spt_core::tokenizer::Vocab;
use spt_core::train::TrainConfig;
use spt_core::Error;

/// Reversal-curse lab: generate corpora, segment, train with chunk
/// permutations and evaluate in both directions.
#[derive(Parser)]
#[command(name = "spt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the segmentation backend: heuristic, ngram:<n>, assistant
    /// or mock (the offline stand-in for the assistant).
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset as train/test JSON lines plus its vocabulary.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach chunks to every permutable sentence of a training file.
    Segment {
        #[command(flatten)]
        common: Common,
        /// Training file to annotate.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print tagged training samples as the trainer would see them.
    PermutePreview {
        #[command(flatten)]
        common: Common,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Train and evaluate one configuration into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Root under which the run directory is created.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate the checkpoint of a run directory.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Directory for the new metrics; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid built from a base configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Seeds to repeat every grid cell with (defaults to the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Collate run directories into markdown tables.
    Report {
        /// Run directories, or roots containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Threshold(Vec<String>),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::Config { .. } | Error::TomlDe(_) | Error::VocabMismatch { .. })
            )
        });
        if config {
            Failure::Config(e)
        } else {
            Failure::Other(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))
        .map_err(Failure::Config)?;
    let mut cfg = TrainConfig::from_toml(&text)
        .with_context(|| format!("parsing {}", common.config.display()))
        .map_err(Failure::Config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &common.backend {
        cfg.segmenter = if b == "mock" {
            Backend::Assistant
        } else {
            b.parse().map_err(|e: String| Failure::Config(anyhow::anyhow!(e)))?
        };
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn client_for(common: &Common, cfg: &TrainConfig) -> Result<Option<AssistantClient>, Failure> {
    if cfg.segmenter != Backend::Assistant {
        return Ok(None);
    }
    if common.backend.as_deref() == Some("mock") {
        return Ok(Some(offline_assistant()));
    }
    let acfg = cfg.assistant.clone().unwrap_or_default();
    Ok(Some(AssistantClient::http(&acfg).map_err(|e| Failure::Config(e.into()))?))
}

fn print_summary(r: &RunResult) {
    let s = &r.summary;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{}\tepochs={}\tloss={:.4}\tdetermined_loss={:.4}\tsame={}\treverse={}\tsame_bleu={}\treverse_bleu={}",
        r.dir.display(),
        s.epochs_run,
        s.final_loss,
        s.final_determined_loss,
        fmt(s.same),
        fmt(s.reverse),
        fmt(s.same_bleu),
        fmt(s.reverse_bleu)
    );
}

fn expand_runs(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(experiment::SUMMARY_FILE).is_file() {
            dirs.push(p.clone());
        } else {
            let found = experiment::find_runs(p).with_context(|| format!("scanning {}", p.display()))?;
            if found.is_empty() {
                bail!("no run directories under {}", p.display());
            }
            dirs.extend(found);
        }
    }
    Ok(dirs)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            let ds = corpus::build(&cfg.dataset, cfg.seed)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            corpus::write_jsonl(&ds, &out.join(experiment::TRAIN_FILE), &out.join(experiment::TEST_FILE))?;
            let vocab = Vocab::build(ds.train.iter().map(|t| t.text.as_str()));
            std::fs::write(out.join(experiment::VOCAB_FILE), serde_json::to_string(&vocab).map_err(Error::from)?)
                .map_err(Error::from)?;
            println!("{} training items, {} evaluation items, vocabulary {}", ds.train.len(), ds.eval.len(), vocab.len());
        }
        Command::Segment { common, input, out } => {
            let cfg = load_config(&common)?;
            let client = client_for(&common, &cfg)?;
            let mut ds = corpus::Dataset { train: corpus::read_train(&input)?, eval: Vec::new() };
            let (ok, fallbacks) = experiment::segment_dataset(&mut ds, cfg.segmenter, client.as_ref())?;
            experiment::write_train(&out, &ds.train)?;
            println!("segmented with {}: assistant {ok}, fallbacks {fallbacks}", cfg.segmenter);
        }
        Command::PermutePreview { common, n, epoch } => {
            let cfg = load_config(&common)?;
            let client = client_for(&common, &cfg)?;
            let prepared = experiment::prepare(&cfg, client.as_ref())?;
            for line in experiment::preview(&cfg, &prepared, epoch, n)? {
                println!("{line}");
            }
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let client = client_for(&common, &cfg)?;
            let r = experiment::run(&cfg, &out, client.as_ref())?;
            print_summary(&r);
            if !r.summary.violations.is_empty() {
                return Err(Failure::Threshold(r.summary.violations));
            }
        }
        Command::Eval { run, out } => {
            let text = std::fs::read_to_string(run.join(experiment::CONFIG_FILE)).map_err(Error::from)?;
            let cfg = TrainConfig::from_toml(&text)?;
            let vocab: Vocab = serde_json::from_str(
                &std::fs::read_to_string(run.join(experiment::VOCAB_FILE)).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
            let items = corpus::read_eval(&run.join(experiment::TEST_FILE))?;
            let (_, table) = evaluate_checkpoint(&run.join(experiment::CHECKPOINT_FILE), &vocab, &items, cfg.max_new)?;
            let out = out.unwrap_or(run);
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            std::fs::write(out.join(experiment::METRICS_CSV), table.to_csv()).map_err(Error::from)?;
            std::fs::write(out.join(experiment::METRICS_MD), table.to_markdown()).map_err(Error::from)?;
            print!("{}", table.to_markdown());
            let violations = table.violations(&cfg.thresholds);
            if !violations.is_empty() {
                return Err(Failure::Threshold(violations));
            }
        }
        Command::Ablate { common, grid, out, jobs, seeds } => {
            let base = load_config(&common)?;
            let client = client_for(&common, &base)?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let configs: Vec<TrainConfig> = seeds
                .iter()
                .flat_map(|&seed| experiment::grid_configs(&TrainConfig { seed, ..base.clone() }, grid))
                .collect();
            let runs = experiment::run_all(&configs, &out, client.as_ref(), jobs, true)?;
            for r in &runs {
                print_summary(r);
            }
            std::fs::write(out.join("ablation.csv"), experiment::ablation_csv(&runs)).map_err(Error::from)?;
            let dirs: Vec<PathBuf> = runs.iter().map(|r| r.dir.clone()).collect();
            std::fs::write(out.join("report.md"), experiment::report(&dirs)?).map_err(Error::from)?;
            let violations: Vec<String> = runs
                .iter()
                .flat_map(|r| r.summary.violations.iter().map(move |v| format!("{}: {v}", r.summary.name)))
                .collect();
            if !violations.is_empty() {
                return Err(Failure::Threshold(violations));
            }
        }
        Command::Report { runs, out } => {
            let dirs = expand_runs(&runs)?;
            let md = experiment::report(&dirs)?;
            match out {
                Some(p) => write_file(&p, &md)?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Other(anyhow::Error::from(e).context(format!("writing {}", path.display()))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(v)) => {
            for line in v {
                eprintln!("threshold violated: {line}");
            }
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
