//! `procprog` command-line tool.

mod adapt;
mod annotate;
mod config;
mod eval;
mod label;
mod util;
mod vqa;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use util::Fatal;

const SUBCOMMANDS: [&str; 9] = [
    "annotate",
    "label",
    "gen-vqa",
    "eval",
    "split",
    "rft-label",
    "profile",
    "synth-corpus",
    "baseline",
];

/// Procedure-grounded progress labels, annotation pipeline, VQA samples and
/// progress-metric evaluation for robot manipulation trajectories.
#[derive(Debug, Parser)]
#[command(name = "procprog", version)]
struct Cli {
    /// Flat `key = value` file of flag values; flags given on the command
    /// line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the annotation pipeline over an episode directory.
    Annotate(annotate::AnnotateArgs),
    /// Fill the `progress` field of annotation JSONL.
    Label(label::LabelArgs),
    /// Generate VQA samples from labeled annotations.
    GenVqa(vqa::GenVqaArgs),
    /// Evaluate progress predictions and segmentations.
    Eval(eval::EvalArgs),
    /// Build one-shot adaptation splits from trajectory tags.
    Split(adapt::SplitArgs),
    /// Label advantage classes from reward-model progress.
    RftLabel(adapt::RftLabelArgs),
    /// Run the pipeline and report per-stage busy time.
    Profile(annotate::ProfileArgs),
    /// Write a seeded synthetic episode corpus.
    SynthCorpus(annotate::SynthArgs),
    /// Write elapsed-time progress predictions for annotated trajectories.
    Baseline(label::BaselineArgs),
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Annotate(a) => annotate::annotate(a),
        Command::Label(a) => label::label(a),
        Command::GenVqa(a) => vqa::gen_vqa(a),
        Command::Eval(a) => eval::eval(a),
        Command::Split(a) => adapt::split(a),
        Command::RftLabel(a) => adapt::rft_label(a),
        Command::Profile(a) => annotate::profile(a),
        Command::SynthCorpus(a) => annotate::synth_corpus(a),
        Command::Baseline(a) => label::baseline(a),
    }
}

fn main() -> ExitCode {
    let (args, config_path) =
        match config::merge_config_args(std::env::args().collect(), &SUBCOMMANDS) {
            Ok(a) => a,
            Err(e) => {
                return util::report_fatal(&Fatal::new("ConfigError", format!("{e:#}")).into())
            }
        };
    let cli = match Cli::try_parse_from(args) {
        Ok(mut c) => {
            c.config = config_path.map(PathBuf::from);
            c
        }
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return util::report_fatal(&Fatal::new("UsageError", e.kind().to_string()).into());
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    log::info!("resolved config: {cli:?}");
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => util::report_fatal(&e),
    }
}
