use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde_json::json;

use procprog::annotation::{group_by_trajectory, read_jsonl, segmentation_from_records};
use procprog::progress::{ProgressConfig, ProgressLabels};
use procprog::vqa::{
    gen_action_segmentation, gen_future_plan, gen_next_step, gen_progress, query_frames,
    EpisodeAnnotations, SamplingConfig, TaskFamily, VqaError, VqaSample,
};

use crate::util::{create, fatal, open, print_json, split_list};

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenVqaArgs {
    /// Annotation JSONL; the progress family needs labeled records.
    #[arg(long)]
    annotations: PathBuf,
    /// Comma-separated families: a1, a2, b1, b2, c.
    #[arg(long, default_value = "a1,a2,b1,b2,c")]
    families: String,
    /// Sampling rate of segmentation videos.
    #[arg(long, default_value_t = 2.0)]
    fps: f64,
    /// Frame rate of the source trajectories; unset keeps every frame.
    #[arg(long)]
    source_fps: Option<f64>,
    #[arg(long, default_value_t = 512)]
    max_frames: usize,
    /// Recent-observation window in frames.
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Query frames per trajectory for b1, b2 and c.
    #[arg(long, default_value_t = 8)]
    density: usize,
    /// Prefix of image paths.
    #[arg(long, default_value = "")]
    image_root: String,
    /// VQA JSONL output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Default)]
struct Tally {
    counts: BTreeMap<&'static str, usize>,
    skipped: BTreeMap<&'static str, usize>,
}

impl Tally {
    fn push(
        &mut self,
        family: TaskFamily,
        result: std::result::Result<VqaSample, VqaError>,
        out: &mut Vec<VqaSample>,
    ) -> Result<()> {
        match result {
            Ok(s) => {
                *self.counts.entry(family.code()).or_default() += 1;
                out.push(s);
            }
            Err(
                VqaError::NoValidSubtasks
                | VqaError::NoFutureAction(_)
                | VqaError::MissingLabels(_),
            ) => {
                *self.skipped.entry(family.code()).or_default() += 1;
            }
            Err(e) => return Err(fatal("VqaError", e.to_string())),
        }
        Ok(())
    }
}

pub fn gen_vqa(args: GenVqaArgs) -> Result<u8> {
    let mut families = Vec::new();
    for name in split_list(&args.families) {
        let f: TaskFamily = name
            .parse()
            .map_err(|e: VqaError| fatal("UnknownFamily", e.to_string()))?;
        if !families.contains(&f) {
            families.push(f);
        }
    }
    families.sort();
    let config = SamplingConfig {
        fps: args.fps,
        source_fps: args.source_fps,
        max_frames: args.max_frames,
        window: args.window,
        ..Default::default()
    };
    config
        .check()
        .map_err(|e| fatal("ConfigError", e.to_string()))?;
    if args.density == 0 {
        return Err(fatal("ConfigError", "density must be >= 1"));
    }

    let records =
        read_jsonl(open(&args.annotations)?).map_err(|e| fatal("ParseError", e.to_string()))?;
    let groups = group_by_trajectory(&records);
    let labels: BTreeMap<&String, Vec<f64>> = groups
        .iter()
        .filter_map(|(id, recs)| {
            recs.iter()
                .map(|r| r.progress)
                .collect::<Option<Vec<f64>>>()
                .map(|v| (id, v))
        })
        .collect();
    if families.contains(&TaskFamily::Progress) && labels.is_empty() {
        return Err(fatal(
            "MissingLabels",
            "progress family requested but no trajectory has labels; run `label` first",
        ));
    }

    let mut samples = Vec::new();
    let mut tally = Tally::default();
    for (id, recs) in &groups {
        let seg = segmentation_from_records(recs)
            .map_err(|e| fatal("ValidationError", format!("{id}: {e}")))?;
        let ann =
            EpisodeAnnotations::with_default_paths(recs[0].episode.clone(), seg, &args.image_root);
        let progress = labels.get(id).map(|v| ProgressLabels {
            values: v.clone(),
            completed: ann.segmentation.is_completed(),
            config: ProgressConfig::default(),
            per_subtask_budget: BTreeMap::new(),
        });
        if families.contains(&TaskFamily::Progress) && progress.is_none() {
            log::warn!("{id}: no progress labels, skipping progress samples");
        }
        let queries = query_frames(ann.episode.num_frames, args.density);
        for &family in &families {
            match family {
                TaskFamily::SegWithTask => tally.push(
                    family,
                    gen_action_segmentation(&ann, true, &config),
                    &mut samples,
                )?,
                TaskFamily::SegTaskFree => tally.push(
                    family,
                    gen_action_segmentation(&ann, false, &config),
                    &mut samples,
                )?,
                TaskFamily::NextStep => {
                    for &t in &queries {
                        tally.push(family, gen_next_step(&ann, t, &config), &mut samples)?;
                    }
                }
                TaskFamily::FuturePlan => {
                    for &t in &queries {
                        tally.push(family, gen_future_plan(&ann, t, &config), &mut samples)?;
                    }
                }
                TaskFamily::Progress => {
                    for &t in &queries {
                        let r = match &progress {
                            Some(l) => gen_progress(&ann, l, t, &config),
                            None => Err(VqaError::MissingLabels(t)),
                        };
                        tally.push(family, r, &mut samples)?;
                    }
                }
            }
        }
    }

    let mut w = create(&args.out)?;
    for s in &samples {
        serde_json::to_writer(&mut w, &s.to_json())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    print_json(
        &json!({"samples": samples.len(), "counts": tally.counts, "skipped": tally.skipped}),
    )?;
    Ok(0)
}
