//! Seeded synthetic corpus: scripted episodes with known segments, piecewise
//! feature trajectories and failure variants.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{EpisodeRef, SegmentationResult, SubtaskSegment};
use crate::formats::{write_cutoffs_csv, write_segments_jsonl, TrajectorySegments};
use crate::pipeline::backend::{MARKER_DIM, PHASE_DIM};
use crate::pipeline::source::{
    frame_file_name, EpisodeData, EpisodeMeta, EpisodeSpec, FEATURES_FILE, META_FILE,
};
use crate::progress::write_features;
use crate::splits::{write_tags_csv, Outcome, TrajectoryTag};

pub const FEATURE_DIM: usize = 8;
pub const IMAGE_SIDE: u32 = 32;
pub const FAILURE_TYPES: [&str; 2] = ["stall", "regress"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub episodes: usize,
    pub num_tasks: usize,
    pub subtasks_min: usize,
    pub subtasks_max: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub failure_rate: f64,
    /// Chance of an idle gap before each subtask.
    pub gap_rate: f64,
    pub seed: u64,
    pub dataset_name: String,
    pub camera_key: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            num_tasks: 3,
            subtasks_min: 2,
            subtasks_max: 5,
            frames_min: 12,
            frames_max: 40,
            failure_rate: 0.3,
            gap_rate: 0.2,
            seed: 0,
            dataset_name: "synth".into(),
            camera_key: "front".into(),
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.num_tasks == 0 || self.subtasks_min == 0 || self.subtasks_min > self.subtasks_max {
            return Err("need num_tasks >= 1 and 1 <= subtasks_min <= subtasks_max".into());
        }
        if self.frames_min < 4 || self.frames_min > self.frames_max {
            return Err("need 4 <= frames_min <= frames_max".into());
        }
        if !(0.0..=1.0).contains(&self.failure_rate) || !(0.0..=1.0).contains(&self.gap_rate) {
            return Err("rates must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEpisode {
    pub episode: EpisodeRef,
    pub task: String,
    /// Ground-truth segmentation, plan order.
    pub segmentation: SegmentationResult,
    pub features: Vec<Vec<f64>>,
    pub outcome: Outcome,
    pub failure_type: Option<String>,
    /// Frame where the failed attempt peaks.
    pub t_cut: Option<usize>,
}

impl SynthEpisode {
    pub fn trajectory_id(&self) -> String {
        self.episode.trajectory_id()
    }

    pub fn spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            episode: self.episode.clone(),
            data: EpisodeData::Features(self.features.clone()),
        }
    }

    pub fn tag(&self) -> TrajectoryTag {
        TrajectoryTag {
            trajectory_id: self.trajectory_id(),
            task: self.task.clone(),
            outcome: self.outcome,
            failure_type: self.failure_type.clone(),
        }
    }
}

const OBJECTS: [&str; 8] = [
    "red block",
    "blue cup",
    "green apple",
    "yellow sponge",
    "black marker",
    "white bowl",
    "orange carrot",
    "purple cube",
];
const PLACES: [&str; 4] = ["plate", "tray", "shelf", "basket"];
const SINGLES: [&str; 6] = [
    "Open the drawer",
    "Close the drawer",
    "Press the button",
    "Rotate the knob clockwise",
    "Push the box forward",
    "Tilt the gripper to pour the water",
];

fn task_steps(rng: &mut ChaCha8Rng, k: usize) -> Vec<String> {
    let mut objects = OBJECTS.to_vec();
    objects.shuffle(rng);
    let mut singles = SINGLES.to_vec();
    singles.shuffle(rng);
    let mut steps = Vec::with_capacity(k);
    while steps.len() < k {
        if k - steps.len() >= 2 && !objects.is_empty() && (singles.is_empty() || rng.gen_bool(0.7))
        {
            let obj = objects.pop().expect("non-empty");
            let place = PLACES[rng.gen_range(0..PLACES.len())];
            steps.push(format!("Grasp the {obj}"));
            steps.push(format!("Place the {obj} onto the {place}"));
        } else if let Some(s) = singles.pop() {
            steps.push(s.to_string());
        } else {
            let obj = objects.pop().unwrap_or("red block");
            steps.push(format!("Push the {obj} left"));
        }
    }
    steps
}

fn instruction_for(steps: &[String]) -> String {
    steps
        .iter()
        .map(|s| {
            let mut c = s.chars();
            c.next()
                .map(|f| f.to_lowercase().chain(c).collect::<String>())
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(", then ")
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    rows: Vec<Vec<f64>>,
    state: [f64; FEATURE_DIM - 2],
}

impl Builder<'_> {
    fn push(&mut self, marker: f64, phase: f64) {
        let mut row = vec![0.0; FEATURE_DIM];
        row[MARKER_DIM] = marker;
        row[PHASE_DIM] = phase;
        for (i, s) in self.state.iter().enumerate() {
            row[2 + i] = s + self.rng.gen_range(-0.002..0.002);
        }
        self.rows.push(row);
    }
}

/// Deterministic corpus for `config`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthEpisode>, String> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tasks: Vec<Vec<String>> = (0..config.num_tasks)
        .map(|_| {
            let k = rng.gen_range(config.subtasks_min..=config.subtasks_max);
            task_steps(&mut rng, k)
        })
        .collect();

    let mut out = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let steps = &tasks[e % tasks.len()];
        let instruction = instruction_for(steps);
        let failed = rng.gen_bool(config.failure_rate);
        let fail_at = failed.then(|| rng.gen_range(0..steps.len()));
        let failure_type =
            failed.then(|| FAILURE_TYPES[rng.gen_range(0..FAILURE_TYPES.len())].to_string());

        let mut b = Builder {
            rng: &mut rng,
            rows: Vec::new(),
            state: [0.0; FEATURE_DIM - 2],
        };
        let mut subtasks = Vec::with_capacity(steps.len());
        let mut t_cut = None;
        for (i, name) in steps.iter().enumerate() {
            let id = i as u32 + 1;
            if fail_at.is_some_and(|f| i > f) {
                let mut s = SubtaskSegment::new(id, name.clone(), None, None);
                s.notes = "not present".into();
                subtasks.push(s);
                continue;
            }
            if b.rng.gen_bool(config.gap_rate) {
                for _ in 0..b.rng.gen_range(2..=4) {
                    b.push(0.0, 0.0);
                }
            }
            let len = b.rng.gen_range(config.frames_min..=config.frames_max);
            let start = b.rows.len();
            let dim = i % (FEATURE_DIM - 2);
            let base = b.state[dim];
            if fail_at == Some(i) {
                let peak = b.rng.gen_range(0.3..0.5);
                let rise = (len / 2).max(2);
                for j in 0..rise {
                    let phase = peak * smoothstep(j as f64 / (rise - 1) as f64);
                    b.state[dim] = base + phase;
                    b.push(id as f64, phase);
                }
                t_cut = Some(b.rows.len() - 1);
                let tail = len - rise + b.rng.gen_range(4..=10);
                for j in 1..=tail {
                    let phase = match failure_type.as_deref() {
                        Some("regress") => peak * (1.0 - 0.8 * j as f64 / tail as f64),
                        _ => peak,
                    };
                    b.state[dim] = base + phase;
                    b.push(id as f64, phase);
                }
                subtasks.push(SubtaskSegment::new(
                    id,
                    name.clone(),
                    Some(start as i64),
                    None,
                ));
            } else {
                for j in 0..len {
                    let phase = smoothstep(j as f64 / (len - 1) as f64);
                    b.state[dim] = base + phase;
                    b.push(id as f64, phase);
                }
                let end = b.rows.len() - 1;
                subtasks.push(SubtaskSegment::new(
                    id,
                    name.clone(),
                    Some(start as i64),
                    Some(end as i64),
                ));
            }
        }
        let rows = b.rows;
        let episode = EpisodeRef {
            dataset_name: config.dataset_name.clone(),
            episode_id: format!("ep_{e:05}"),
            camera_key: config.camera_key.clone(),
            num_frames: rows.len(),
            instruction: instruction.clone(),
        };
        out.push(SynthEpisode {
            segmentation: SegmentationResult {
                task: instruction,
                subtasks,
                overall_notes: if failed {
                    "task not completed".into()
                } else {
                    String::new()
                },
            },
            task: format!("task_{}", e % tasks.len()),
            features: rows,
            outcome: if failed {
                Outcome::Failure
            } else {
                Outcome::Success
            },
            failure_type,
            t_cut,
            episode,
        });
    }
    Ok(out)
}

/// Grayscale rendering of one feature row: a phase bar, a marker band and
/// one stripe per object-state dimension.
pub fn render_frame(row: &[f64]) -> Vec<u8> {
    let img = GrayImage::from_fn(IMAGE_SIDE, IMAGE_SIDE, |x, y| {
        let v = if y < 8 {
            if (x as f64) < row[PHASE_DIM] * IMAGE_SIDE as f64 {
                230.0
            } else {
                20.0
            }
        } else if y < 12 {
            30.0 * row[MARKER_DIM]
        } else {
            let dim = 2 + ((y - 12) as usize / 4) % (FEATURE_DIM - 2);
            40.0 + 150.0
                * (row[dim] - (x as f64 / IMAGE_SIDE as f64))
                    .clamp(-1.0, 1.0)
                    .abs()
        };
        Luma([v.clamp(0.0, 255.0) as u8])
    });
    let mut buf = io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding to memory");
    buf.into_inner()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> io::Error {
    io::Error::other(format!("{}: {e}", path.display()))
}

/// Writes the corpus under `root`: per-episode `meta.json`, camera
/// `features.bin` (and PNG frames when `images`), plus `tags.csv`,
/// `cutoffs.csv` and ground-truth `segments.jsonl` at the root.
pub fn write_corpus(root: &Path, episodes: &[SynthEpisode], images: bool) -> io::Result<()> {
    for ep in episodes {
        let ep_dir = root
            .join(&ep.episode.dataset_name)
            .join(&ep.episode.episode_id);
        let cam_dir = ep_dir.join(&ep.episode.camera_key);
        fs::create_dir_all(&cam_dir).map_err(|e| io_err(&cam_dir, e))?;
        let meta = EpisodeMeta {
            instruction: ep.episode.instruction.clone(),
            num_frames: ep.episode.num_frames,
        };
        fs::write(
            ep_dir.join(META_FILE),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        let f = fs::File::create(cam_dir.join(FEATURES_FILE))?;
        write_features(BufWriter::new(f), &ep.features).map_err(|e| io_err(&cam_dir, e))?;
        if images {
            for (t, row) in ep.features.iter().enumerate() {
                fs::write(cam_dir.join(frame_file_name(t)), render_frame(row))?;
            }
        }
    }
    let tags: Vec<TrajectoryTag> = episodes.iter().map(SynthEpisode::tag).collect();
    write_tags_csv(fs::File::create(root.join("tags.csv"))?, &tags).map_err(|e| io_err(root, e))?;
    let cutoffs: BTreeMap<String, usize> = episodes
        .iter()
        .filter_map(|e| e.t_cut.map(|t| (e.trajectory_id(), t)))
        .collect();
    write_cutoffs_csv(fs::File::create(root.join("cutoffs.csv"))?, &cutoffs)
        .map_err(|e| io_err(root, e))?;
    let segs: Vec<TrajectorySegments> = episodes
        .iter()
        .map(|e| {
            TrajectorySegments::from_segmentation(
                e.trajectory_id(),
                e.episode.num_frames,
                &e.segmentation,
            )
        })
        .collect();
    let mut w = BufWriter::new(fs::File::create(root.join("segments.jsonl"))?);
    write_segments_jsonl(&mut w, &segs).map_err(|e| io_err(root, e))?;
    w.flush()
}
