use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde_json::json;

use procprog::annotation::{
    group_by_trajectory, read_jsonl, segmentation_from_records, write_jsonl, EpisodeRef,
};
use procprog::formats::{read_segments_jsonl, write_progress_jsonl};
use procprog::pipeline::source::{camera_dir, frame_file_name, FEATURES_FILE};
use procprog::progress::{
    frame_diffs, load_features, pixel_features, progress_labels, read_magnitudes_csv,
    time_interp_baseline, DiffMetric, ProgressConfig, ProgressError, VisualSignal,
};

use crate::util::{create, fatal, open, print_json, EXIT_PARTIAL};

const DIFFS_FILE: &str = "diffs.csv";

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct LabelArgs {
    /// Annotation JSONL to label.
    #[arg(long)]
    annotations: PathBuf,
    /// Feature matrix file (single trajectory) or corpus root.
    #[arg(long, conflicts_with = "diffs")]
    features: Option<PathBuf>,
    /// Magnitude CSV (single trajectory) or corpus root holding `diffs.csv`
    /// per camera directory.
    #[arg(long)]
    diffs: Option<PathBuf>,
    /// Budget clip bounds.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.75, 1.25])]
    clip: Vec<f64>,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value = "l2")]
    metric: DiffMetric,
    /// Output annotation JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Replace progress values that are already present.
    #[arg(long)]
    force: bool,
}

enum SignalSource<'a> {
    FeatureFile(&'a Path),
    FeatureRoot(&'a Path),
    DiffFile(&'a Path),
    DiffRoot(&'a Path),
}

impl SignalSource<'_> {
    fn single_file(&self) -> bool {
        matches!(
            self,
            SignalSource::FeatureFile(_) | SignalSource::DiffFile(_)
        )
    }

    fn diffs(&self, episode: &EpisodeRef, metric: DiffMetric) -> Result<Vec<f64>> {
        let load_err =
            |e: ProgressError| fatal("InputError", format!("{}: {e}", episode.trajectory_id()));
        let signal = match self {
            SignalSource::FeatureFile(p) => {
                VisualSignal::Features(load_features(p).map_err(load_err)?)
            }
            SignalSource::DiffFile(p) => {
                VisualSignal::Magnitudes(read_magnitudes_csv(open(p)?).map_err(load_err)?)
            }
            SignalSource::DiffRoot(root) => {
                let p = camera_dir(root, episode).join(DIFFS_FILE);
                VisualSignal::Magnitudes(read_magnitudes_csv(open(&p)?).map_err(load_err)?)
            }
            SignalSource::FeatureRoot(root) => {
                let dir = camera_dir(root, episode);
                let bin = dir.join(FEATURES_FILE);
                if bin.exists() {
                    VisualSignal::Features(load_features(&bin).map_err(load_err)?)
                } else {
                    let mut rows = Vec::with_capacity(episode.num_frames);
                    for t in 0..episode.num_frames {
                        let p = dir.join(frame_file_name(t));
                        let bytes = fs::read(&p)
                            .map_err(|e| fatal("InputError", format!("{}: {e}", p.display())))?;
                        rows.push(pixel_features(&bytes).map_err(load_err)?);
                    }
                    VisualSignal::Features(rows)
                }
            }
        };
        if signal.num_frames() != episode.num_frames {
            return Err(fatal(
                "LengthMismatch",
                format!(
                    "{}: signal covers {} frames, annotations have {}",
                    episode.trajectory_id(),
                    signal.num_frames(),
                    episode.num_frames
                ),
            ));
        }
        frame_diffs(&signal, metric).map_err(load_err)
    }
}

pub fn label(args: LabelArgs) -> Result<u8> {
    let config = ProgressConfig {
        clip_lo: args.clip[0],
        clip_hi: args.clip[1],
        epsilon: args.eps,
        diff_metric: args.metric,
    };
    config
        .check()
        .map_err(|e| fatal("ConfigError", e.to_string()))?;
    let source = match (&args.features, &args.diffs) {
        (Some(p), _) if p.is_dir() => SignalSource::FeatureRoot(p),
        (Some(p), _) => SignalSource::FeatureFile(p),
        (None, Some(p)) if p.is_dir() => SignalSource::DiffRoot(p),
        (None, Some(p)) => SignalSource::DiffFile(p),
        (None, None) => {
            return Err(fatal(
                "UsageError",
                "one of --features or --diffs is required",
            ))
        }
    };

    let mut records =
        read_jsonl(open(&args.annotations)?).map_err(|e| fatal("ParseError", e.to_string()))?;
    if !args.force {
        if let Some(r) = records.iter().find(|r| r.progress.is_some()) {
            return Err(fatal(
                "RefuseOverwrite",
                format!(
                    "{} frame {} already has progress; pass --force to replace",
                    r.trajectory_id(),
                    r.frame_id
                ),
            ));
        }
    }
    let groups = group_by_trajectory(&records);
    if source.single_file() && groups.len() != 1 {
        return Err(fatal(
            "UsageError",
            format!(
                "a single signal file needs exactly one trajectory, found {}",
                groups.len()
            ),
        ));
    }

    let mut labels: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (id, recs) in &groups {
        let seg = segmentation_from_records(recs)
            .map_err(|e| fatal("ValidationError", format!("{id}: {e}")))?;
        let diffs = source.diffs(&recs[0].episode, args.metric)?;
        match progress_labels(&seg, &diffs, &config) {
            Ok(l) => {
                labels.insert(id.clone(), l.values);
            }
            Err(
                e @ (ProgressError::NoValidSubtasks
                | ProgressError::EmptySegment(_)
                | ProgressError::DegenerateSegmentSignal(_)),
            ) => {
                log::warn!("{id}: left unlabeled: {e}");
                skipped.push(json!({"trajectory_id": id, "reason": e.to_string()}));
            }
            Err(e) => return Err(fatal("LabelError", format!("{id}: {e}"))),
        }
    }

    for r in &mut records {
        r.progress = labels.get(&r.trajectory_id()).map(|v| v[r.frame_id]);
    }
    let mut w = create(&args.out)?;
    write_jsonl(&mut w, &records)?;
    w.flush()?;
    print_json(&json!({"labeled": labels.len(), "skipped": skipped}))?;
    Ok(if skipped.is_empty() { 0 } else { EXIT_PARTIAL })
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BaselineArgs {
    /// Annotation JSONL whose trajectories get predictions.
    #[arg(
        long,
        required_unless_present = "segments",
        conflicts_with = "segments"
    )]
    annotations: Option<PathBuf>,
    /// Segment JSONL as an alternative trajectory list.
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Only trajectories whose annotation records carry progress labels.
    #[arg(long, requires = "annotations")]
    labeled_only: bool,
    /// Progress JSONL output.
    #[arg(long)]
    out: PathBuf,
}

pub fn baseline(args: BaselineArgs) -> Result<u8> {
    let lengths: BTreeMap<String, usize> = match (&args.annotations, &args.segments) {
        (Some(p), _) => {
            let records = read_jsonl(open(p)?).map_err(|e| fatal("ParseError", e.to_string()))?;
            records
                .iter()
                .filter(|r| !args.labeled_only || r.progress.is_some())
                .map(|r| (r.trajectory_id(), r.episode.num_frames))
                .collect()
        }
        (None, Some(p)) => {
            let segs =
                read_segments_jsonl(open(p)?).map_err(|e| fatal("ParseError", e.to_string()))?;
            segs.into_iter()
                .map(|s| (s.trajectory_id, s.num_frames))
                .collect()
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let mut series = BTreeMap::new();
    for (id, n) in lengths {
        let l = time_interp_baseline(n).map_err(|e| fatal("LabelError", format!("{id}: {e}")))?;
        series.insert(id, l.values);
    }
    let mut w = create(&args.out)?;
    write_progress_jsonl(&mut w, &series)?;
    w.flush()?;
    print_json(&json!({"trajectories": series.len()}))?;
    Ok(0)
}
