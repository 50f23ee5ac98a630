use clap::{Parser, Subcommand};

use capguide_cli::commands::{caption, demo, evaluate, gen_corpus, train};
use capguide_cli::error::CliResult;

/// Classifier-guided caption decoding: corpora, training, captioning, evaluation.
#[derive(Parser)]
#[command(name = "capguide", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classifier or LM corpus.
    GenCorpus(gen_corpus::GenCorpusArgs),
    /// Train the caption language model.
    TrainLm(train::TrainArgs),
    /// Train the audibility classifier.
    TrainClassifier(train::TrainArgs),
    /// Decode captions for a prefix file, with or without guidance.
    Caption(caption::CaptionArgs),
    /// Score captions against references.
    Evaluate(evaluate::EvaluateArgs),
    /// Run the whole pipeline on the 16-token demo world.
    Demo(demo::DemoArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus::run(&a).map(drop),
        Command::TrainLm(a) => train::run_lm(&a).map(drop),
        Command::TrainClassifier(a) => train::run_classifier(&a).map(drop),
        Command::Caption(a) => caption::run(&a).map(drop),
        Command::Evaluate(a) => evaluate::run(&a).map(drop),
        Command::Demo(a) => demo::run(&a).map(drop),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
