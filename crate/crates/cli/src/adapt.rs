use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde_json::json;

use procprog::formats::read_progress_series;
use procprog::splits::{
    build_oneshot_splits, read_tags_csv, rft_advantage_labels, AdvantageClass, AdvantageConfig,
    AdvantageCut, ScoredTrajectory, SplitMode, TrajectoryTag,
};

use crate::util::{create, fatal, open, print_json, split_list, write_json, SCHEMA_VERSION};

fn load_tags(path: &std::path::Path) -> Result<Vec<TrajectoryTag>> {
    read_tags_csv(open(path)?).map_err(|e| fatal("ParseError", format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SplitArgs {
    /// Tags CSV: trajectory_id,task,outcome,failure_type.
    #[arg(long)]
    tags: PathBuf,
    /// succ or succ_fail.
    #[arg(long, default_value = "succ")]
    mode: SplitMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated failure types every task must cover (succ_fail).
    #[arg(long, default_value = "")]
    require_failure_types: String,
    /// Split JSON output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn split(args: SplitArgs) -> Result<u8> {
    let tags = load_tags(&args.tags)?;
    let required = split_list(&args.require_failure_types);
    let s = build_oneshot_splits(&tags, args.mode, args.seed, &required)
        .map_err(|e| fatal("SplitError", e.to_string()))?;
    let value = json!({
        "schema_version": SCHEMA_VERSION,
        "mode": args.mode,
        "seed": args.seed,
        "train": s.train,
        "test": s.test,
    });
    match &args.out {
        Some(path) => {
            write_json(path, &value)?;
            print_json(&json!({"train": s.train.len(), "test": s.test.len()}))?;
        }
        None => print_json(&value)?,
    }
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CutArg {
    PerSample,
    PerTrajectory,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct RftLabelArgs {
    /// Reward-model progress: point JSONL or labeled annotation JSONL.
    #[arg(long)]
    progress: PathBuf,
    /// Tags CSV giving each trajectory's task.
    #[arg(long)]
    tags: PathBuf,
    /// Advantage horizon in steps.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    /// Fraction of samples per task labeled positive.
    #[arg(long, default_value_t = 0.3)]
    top_fraction: f64,
    #[arg(long, value_enum, default_value = "per-sample")]
    cut: CutArg,
    /// Label JSONL output.
    #[arg(long)]
    out: PathBuf,
}

pub fn rft_label(args: RftLabelArgs) -> Result<u8> {
    let series = read_progress_series(open(&args.progress)?)
        .map_err(|e| fatal("ParseError", e.to_string()))?;
    let tasks: BTreeMap<String, String> = load_tags(&args.tags)?
        .into_iter()
        .map(|t| (t.trajectory_id, t.task))
        .collect();
    let missing: Vec<&String> = series
        .keys()
        .filter(|id| !tasks.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(fatal(
            "AlignmentError",
            format!("trajectories without tags: {missing:?}"),
        ));
    }
    let scored: Vec<ScoredTrajectory> = series
        .into_iter()
        .map(|(id, progress)| ScoredTrajectory {
            task: tasks[&id].clone(),
            trajectory_id: id,
            progress,
        })
        .collect();
    let config = AdvantageConfig {
        horizon: args.horizon,
        top_fraction: args.top_fraction,
        cut: match args.cut {
            CutArg::PerSample => AdvantageCut::PerSample,
            CutArg::PerTrajectory => AdvantageCut::PerTrajectory,
        },
    };
    let labels =
        rft_advantage_labels(&scored, &config).map_err(|e| fatal("ConfigError", e.to_string()))?;
    let mut w = create(&args.out)?;
    for l in &labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let positives = labels
        .iter()
        .filter(|l| l.label == AdvantageClass::Positive)
        .count();
    print_json(&json!({"samples": labels.len(), "positive": positives}))?;
    Ok(0)
}
