use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histotype::config::{PipelineConfig, DEFAULT_CONFIG};
use histotype::error::{Error, Result};
use histotype::labels::ClassifierId;
use histotype::pipeline::{self, Pipeline, StageOutcome};
use histotype::scoring;
use histotype::synthetic::CohortSpec;

#[derive(Parser)]
#[command(name = "histotype", version, about = "H&E whole-slide molecular subtyping pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `gbdt.n_rounds=50`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// External scorer command; selects the process backend.
    #[arg(long)]
    scorer_cmd: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Tile every slide in the manifest.
    Tile(StageArgs),
    /// Score all tiles with the tumor classifier.
    ScoreTumor(StageArgs),
    /// Build the stain reference mosaic and profile.
    BuildRef(StageArgs),
    /// Stain-normalize tumor tiles.
    Normalize(StageArgs),
    /// Patient-level stratified split.
    Split(StageArgs),
    /// Score tumor tiles with the four subtype classifiers.
    Score(StageArgs),
    /// Choose per-classifier decision thresholds.
    Threshold(StageArgs),
    /// Aggregate tile calls into slide feature vectors.
    Features(StageArgs),
    /// Train the boosted-tree slide classifier.
    Train(StageArgs),
    /// Predict subtypes of the test slides.
    Predict(StageArgs),
    /// Metrics with bootstrap confidence intervals.
    Evaluate(StageArgs),
    /// Tumor-score overlays.
    Heatmap(StageArgs),
    /// Run every stage in order, skipping up-to-date ones.
    RunAll(StageArgs),
    /// Write a synthetic cohort with a matching pipeline.toml.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        wsis_per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Score signal strength in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        signal: f64,
        #[arg(long, default_value_t = 384)]
        slide_px: usize,
    },
    /// Print the built-in default configuration.
    DefaultConfig,
    /// Deterministic scorer speaking the line protocol on stdin/stdout.
    #[command(hide = true)]
    ScorerStub {
        #[arg(long)]
        classifier_id: String,
    },
}

fn load(args: &StageArgs) -> Result<Pipeline> {
    let mut cfg = PipelineConfig::load(Some(&args.config), &args.overrides)?;
    if let Some(cmd) = &args.scorer_cmd {
        cfg.scoring.backend = "process".into();
        cfg.scoring.command = cmd.clone();
        cfg.validate()?;
    }
    Ok(Pipeline::new(cfg))
}

fn report(stage: &str, outcome: StageOutcome) {
    let word = match outcome {
        StageOutcome::Ran => "done",
        StageOutcome::Skipped => "up to date",
    };
    log::info!("{stage}: {word}");
}

fn run(cli: Cli) -> Result<()> {
    let (stage, args) = match cli.command {
        Command::Tile(a) => ("tile", a),
        Command::ScoreTumor(a) => ("score-tumor", a),
        Command::BuildRef(a) => ("build-ref", a),
        Command::Normalize(a) => ("normalize", a),
        Command::Split(a) => ("split", a),
        Command::Score(a) => ("score", a),
        Command::Threshold(a) => ("threshold", a),
        Command::Features(a) => ("features", a),
        Command::Train(a) => ("train", a),
        Command::Predict(a) => ("predict", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Heatmap(a) => ("heatmap", a),
        Command::RunAll(a) => {
            for (stage, outcome) in load(&a)?.run_all()? {
                report(stage, outcome);
            }
            return Ok(());
        }
        Command::GenerateSynthetic {
            out,
            wsis_per_class,
            seed,
            signal,
            slide_px,
        } => {
            let spec = CohortSpec {
                wsis_per_class,
                seed,
                slide_px,
                ..CohortSpec::default()
            };
            let path = pipeline::generate_synthetic(&spec, signal, &out)?;
            println!("{}", path.display());
            return Ok(());
        }
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG}");
            return Ok(());
        }
        Command::ScorerStub { classifier_id } => {
            let classifier: ClassifierId = classifier_id.parse()?;
            let stdin = std::io::stdin();
            let mut stdout = std::io::stdout().lock();
            scoring::serve_stub(classifier, BufReader::new(stdin.lock()), &mut stdout)
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdio>", e))?;
            return Ok(());
        }
    };
    let outcome = load(&args)?.run_stage(stage)?;
    report(stage, outcome);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
