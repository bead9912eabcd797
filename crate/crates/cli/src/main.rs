//! `newsclf` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "newsclf", version, about = "Multilingual news genre, framing and persuasion classification")]
pub struct Cli {
    /// JSON configuration document for the subcommand
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Seed overriding the configured one
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean articles; with --vocab also write head+tail truncated inputs
    Preprocess(PreprocessArgs),
    /// Stratified train/validation/test or k-fold split
    Split(SplitArgs),
    /// Build a vocabulary from article text
    Vocab(VocabArgs),
    /// Oversample minority classes of the training part
    Oversample(OversampleArgs),
    /// Masked-language-model training on unlabeled article text (config: TAPT job)
    Tapt,
    /// Fine-tune a classifier (config: training job)
    Train,
    /// Choose checkpoints from a training run
    Select(SelectArgs),
    /// Predict with one checkpoint or a routing table of checkpoints
    Predict(PredictArgs),
    /// Majority vote over member predictions
    Ensemble(EnsembleArgs),
    /// Translate articles into another language
    Translate(TranslateArgs),
    /// Score predictions against gold labels
    Evaluate(EvaluateArgs),
    /// Per-language validation curves from a metrics TSV
    Report(ReportArgs),
    /// Run an experiment manifest (config: manifest)
    Experiment,
    /// Write the synthetic planted-keyword corpus (config: generator settings, optional)
    Synth,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
