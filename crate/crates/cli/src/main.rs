use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remind_core::datasets::load_corpus;
use remind_core::runner::{
    emit_feature_histograms, features_file, histogram_dir, summarize, Experiment, ExperimentConfig,
};
use remind_core::{Error, Label};

/// Audit machine unlearning from loss-landscape geometry around each input.
#[derive(Parser)]
#[command(name = "remind", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Score the corpus, train classifiers and write the full report.
    Run(Common),
    /// Redraw feature histograms from an existing features CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Features CSV to plot; defaults to every arm's file in the output directory.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Check the config and inputs without contacting the oracle.
    ValidateConfig(Common),
    /// Issue every oracle request a run would make, filling the cache.
    WarmCache(Common),
    /// Baselines only, no classifiers.
    ScoreBaselines(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn log_cache(exp: &Experiment) {
    if let Some(c) = exp.cache_stats() {
        log::info!("oracle cache: {} hits, {} misses", c.hits, c.misses);
    }
}

fn plot(cfg: &ExperimentConfig, features: Option<&Path>) -> Result<(), Error> {
    let jobs: Vec<(PathBuf, PathBuf)> = match features {
        Some(f) => {
            let dir = f.parent().unwrap_or(Path::new(".")).join("histograms");
            vec![(f.to_path_buf(), dir)]
        }
        None => cfg
            .views
            .iter()
            .map(|&v| {
                (
                    cfg.output_dir.join(features_file(v)),
                    cfg.output_dir.join(histogram_dir(v)),
                )
            })
            .collect(),
    };
    for (csv, dir) in jobs {
        if !csv.is_file() {
            return Err(Error::Data(format!(
                "{} not found; run `remind run` first",
                csv.display()
            )));
        }
        let out = emit_feature_histograms(&csv, &dir, cfg.histogram_bins)?;
        println!("{} panels written to {}", out.panels.len(), dir.display());
    }
    Ok(())
}

fn validate(cfg: &ExperimentConfig) -> Result<(), Error> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus_spec())?;
    print!("{}", cfg.summary());
    let counts = corpus.class_counts();
    let per_class: Vec<String> = Label::ALL
        .iter()
        .map(|l| format!("{l}={}", counts[l.index()]))
        .collect();
    println!(
        "corpus: {} samples ({}), {} paraphrases",
        corpus.len(),
        per_class.join(", "),
        corpus.paraphrases().len()
    );
    Ok(())
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let exp = Experiment::prepare(&cfg)?;
            let report = exp.run();
            log_cache(&exp);
            print!("{}", summarize(&report?, &cfg.output_dir));
        }
        Command::ScoreBaselines(common) => {
            let cfg = load_config(&common)?;
            let exp = Experiment::prepare(&cfg)?;
            let report = exp.score_baselines();
            log_cache(&exp);
            print!("{}", summarize(&report?, &cfg.output_dir));
        }
        Command::WarmCache(common) => {
            let cfg = load_config(&common)?;
            if cfg.cache_path.is_none() {
                log::warn!("no cache_path configured; responses will not be kept");
            }
            let exp = Experiment::prepare(&cfg)?;
            let n = exp.warm_cache();
            log_cache(&exp);
            println!("scored {} samples", n?);
        }
        Command::Plot { common, features } => {
            let cfg = load_config(&common)?;
            plot(&cfg, features.as_deref())?;
        }
        Command::ValidateConfig(common) => {
            let cfg = load_config(&common)?;
            validate(&cfg)?;
            println!("config ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_oracle() { 2 } else { 1 })
        }
    }
}
