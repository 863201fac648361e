//! Procedure-aware VQA samples built from dense annotations, and parsing of
//! `<progress>` answers.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::annotation::{EpisodeRef, SegmentationResult, SubtaskSegment};
use crate::progress::ProgressLabels;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VqaError {
    #[error("episode has no valid subtasks")]
    NoValidSubtasks,
    #[error("no action starts after frame {0}")]
    NoFutureAction(usize),
    #[error("no progress label for frame {0}")]
    MissingLabels(usize),
    #[error("no <progress> tag found")]
    TagNotFound,
    #[error("frame {t} outside episode of {num_frames} frames")]
    FrameOutOfRange { t: usize, num_frames: usize },
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
}

pub type Result<T, E = VqaError> = std::result::Result<T, E>;

pub const SEG_WITH_TASK_TEMPLATE: &str = "Segment the execution of the task \"{task}\" into consecutive atomic actions. Each segment should correspond to a single, explicit verb-level action. Output a JSON list with keys \"action_description\", \"start_frame\", and \"end_frame\".";
pub const SEG_TASK_FREE_TEMPLATE: &str = "Segment the actions shown in the image sequence into consecutive atomic actions, each described by a single explicit verb. Output a JSON list with keys \"action_description\", \"start_frame\", and \"end_frame\".";
pub const NEXT_STEP_TEMPLATE: &str = "Given the recent observation and the task \"{task}\", predict the immediate next atomic action the robot should execute. Use a single explicit verb-level description.";
pub const FUTURE_PLAN_TEMPLATE: &str = "Given the recent observation and the task \"{task}\", list the remaining atomic actions required to complete the task, starting from the next time step. Each action should be a single explicit verb-level step.";
pub const PROGRESS_TEMPLATE: &str = "Given the recent observation and the task \"{task}\", first infer the remaining atomic actions required to complete the task. Then estimate the current completion percentage and output it as a float wrapped by <progress> tags.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SegWithTask,
    SegTaskFree,
    NextStep,
    FuturePlan,
    Progress,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::SegWithTask,
        TaskFamily::SegTaskFree,
        TaskFamily::NextStep,
        TaskFamily::FuturePlan,
        TaskFamily::Progress,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TaskFamily::SegWithTask => "a1",
            TaskFamily::SegTaskFree => "a2",
            TaskFamily::NextStep => "b1",
            TaskFamily::FuturePlan => "b2",
            TaskFamily::Progress => "c",
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = VqaError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "a1" | "a.1" | "seg_with_task" => TaskFamily::SegWithTask,
            "a2" | "a.2" | "seg_task_free" => TaskFamily::SegTaskFree,
            "b1" | "b.1" | "next_step" => TaskFamily::NextStep,
            "b2" | "b.2" | "future_plan" => TaskFamily::FuturePlan,
            "c" | "progress" => TaskFamily::Progress,
            other => return Err(VqaError::UnknownFamily(other.to_string())),
        })
    }
}

/// One image in a sample, optionally followed by a frame-id marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Frame index in the source trajectory.
    pub source_frame: usize,
    pub path: String,
    /// Index in the sampled sequence, shown to the model.
    pub marker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub family: TaskFamily,
    pub instruction: String,
    pub visual_refs: Vec<FrameRef>,
    pub prompt: String,
    pub target: String,
    pub progress_value: Option<f64>,
}

impl VqaSample {
    /// Flat JSONL form: `family`, `instruction`, `prompt`, `images`,
    /// `target`, `progress`.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "family": self.family,
            "instruction": self.instruction,
            "prompt": self.prompt,
            "images": self.visual_refs.iter().map(|r| r.path.as_str()).collect::<Vec<_>>(),
            "target": self.target,
            "progress": self.progress_value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Target sampling rate for segmentation videos.
    pub fps: f64,
    /// Frame rate of the source trajectory; `None` keeps every frame
    /// (up to `max_frames`).
    pub source_fps: Option<f64>,
    pub max_frames: usize,
    /// Recent-observation window for next-step, plan and progress samples.
    pub window: usize,
    pub min_pixels: u32,
    pub max_pixels: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            fps: 2.0,
            source_fps: None,
            max_frames: 512,
            window: 4,
            min_pixels: 32 * 32,
            max_pixels: 512 * 512,
        }
    }
}

impl SamplingConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(VqaError::Config("fps must be > 0".into()));
        }
        if self.window < 1 || self.window > self.max_frames {
            return Err(VqaError::Config(format!(
                "need 1 <= window <= max_frames, got window={} max_frames={}",
                self.window, self.max_frames
            )));
        }
        if self.min_pixels > self.max_pixels {
            return Err(VqaError::Config("min_pixels > max_pixels".into()));
        }
        Ok(())
    }

    /// Number of frames sampled from a trajectory of `num_frames`.
    pub fn sample_count(&self, num_frames: usize) -> usize {
        let mut s = num_frames.min(self.max_frames);
        if let Some(src) = self.source_fps.filter(|f| *f > 0.0) {
            let by_rate = (num_frames as f64 * self.fps / src).ceil() as usize;
            s = s.min(by_rate.max(1));
        }
        s.max(1)
    }
}

/// Source frame shown at sampled position `j` of `samples`.
pub fn sampled_source_frame(j: usize, samples: usize, num_frames: usize) -> usize {
    j * num_frames / samples
}

/// Sampled position of source frame `i`: `floor(i * S / T)`.
pub fn remap_frame(i: usize, samples: usize, num_frames: usize) -> usize {
    i * samples / num_frames
}

/// Everything the generators need about one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeAnnotations {
    pub episode: EpisodeRef,
    /// Validated segmentation.
    pub segmentation: SegmentationResult,
    /// Image path per frame.
    pub frame_paths: Vec<String>,
}

impl EpisodeAnnotations {
    /// Frame paths following the `<dataset>/<episode>/<camera>/frame_%06d.png`
    /// layout under `root`.
    pub fn with_default_paths(
        episode: EpisodeRef,
        segmentation: SegmentationResult,
        root: &str,
    ) -> Self {
        let frame_paths = (0..episode.num_frames)
            .map(|t| frame_path(root, &episode, t))
            .collect();
        Self {
            episode,
            segmentation,
            frame_paths,
        }
    }

    fn started_segments(&self) -> Vec<&SubtaskSegment> {
        let mut segs: Vec<&SubtaskSegment> = self
            .segmentation
            .subtasks
            .iter()
            .filter(|s| s.start_frame.is_some())
            .collect();
        segs.sort_by_key(|s| (s.start_frame, s.id));
        segs
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.episode.num_frames {
            return Err(VqaError::FrameOutOfRange {
                t,
                num_frames: self.episode.num_frames,
            });
        }
        Ok(())
    }

    fn window(&self, t: usize, config: &SamplingConfig) -> Vec<FrameRef> {
        let first = (t + 1).saturating_sub(config.window);
        (first..=t)
            .map(|f| FrameRef {
                source_frame: f,
                path: self.frame_paths[f].clone(),
                marker: None,
            })
            .collect()
    }
}

pub fn frame_path(root: &str, episode: &EpisodeRef, t: usize) -> String {
    let rel = format!(
        "{}/{}/{}/frame_{t:06}.png",
        episode.dataset_name, episode.episode_id, episode.camera_key
    );
    if root.is_empty() {
        rel
    } else {
        format!("{}/{rel}", root.trim_end_matches('/'))
    }
}

fn render(template: &str, task: &str) -> String {
    template.replace("{task}", task)
}

fn image_prefix(refs: &[FrameRef]) -> String {
    refs.iter()
        .map(|r| match r.marker {
            Some(m) => format!("<image><frame_id: {m}>"),
            None => "<image>".to_string(),
        })
        .collect()
}

/// Action segmentation over an interleaved frame-index sequence.
pub fn gen_action_segmentation(
    ann: &EpisodeAnnotations,
    with_task: bool,
    config: &SamplingConfig,
) -> Result<VqaSample> {
    config.check()?;
    let valid: Vec<&SubtaskSegment> = {
        let mut v: Vec<&SubtaskSegment> = ann.segmentation.valid_segments().collect();
        v.sort_by_key(|s| s.start_frame);
        v
    };
    if valid.is_empty() {
        return Err(VqaError::NoValidSubtasks);
    }
    let t_len = ann.episode.num_frames;
    let samples = config.sample_count(t_len);
    let refs: Vec<FrameRef> = (0..samples)
        .map(|j| {
            let f = sampled_source_frame(j, samples, t_len);
            FrameRef {
                source_frame: f,
                path: ann.frame_paths[f].clone(),
                marker: Some(j),
            }
        })
        .collect();
    let segments: Vec<serde_json::Value> = valid
        .iter()
        .map(|s| {
            let (a, b) = s.span().expect("valid");
            json!({
                "action_description": s.name,
                "start_frame": remap_frame(a, samples, t_len),
                "end_frame": remap_frame(b, samples, t_len),
            })
        })
        .collect();
    let (family, text) = if with_task {
        (
            TaskFamily::SegWithTask,
            render(SEG_WITH_TASK_TEMPLATE, &ann.episode.instruction),
        )
    } else {
        (TaskFamily::SegTaskFree, SEG_TASK_FREE_TEMPLATE.to_string())
    };
    Ok(VqaSample {
        family,
        instruction: if with_task {
            ann.episode.instruction.clone()
        } else {
            String::new()
        },
        prompt: format!("{}\n{text}", image_prefix(&refs)),
        visual_refs: refs,
        target: serde_json::to_string(&segments).expect("json"),
        progress_value: None,
    })
}

fn future_segments(ann: &EpisodeAnnotations, t: usize) -> Result<Vec<&SubtaskSegment>> {
    ann.check_frame(t)?;
    let future: Vec<&SubtaskSegment> = ann
        .started_segments()
        .into_iter()
        .filter(|s| s.start_frame.is_some_and(|a| a > t as i64))
        .collect();
    if future.is_empty() {
        return Err(VqaError::NoFutureAction(t));
    }
    Ok(future)
}

/// Next atomic action: the first segment starting strictly after `t`.
pub fn gen_next_step(
    ann: &EpisodeAnnotations,
    t: usize,
    config: &SamplingConfig,
) -> Result<VqaSample> {
    config.check()?;
    let future = future_segments(ann, t)?;
    let refs = ann.window(t, config);
    Ok(VqaSample {
        family: TaskFamily::NextStep,
        instruction: ann.episode.instruction.clone(),
        prompt: format!(
            "{}\n{}",
            image_prefix(&refs),
            render(NEXT_STEP_TEMPLATE, &ann.episode.instruction)
        ),
        visual_refs: refs,
        target: future[0].name.clone(),
        progress_value: None,
    })
}

/// Remaining plan: every segment starting after `t`, one per line.
pub fn gen_future_plan(
    ann: &EpisodeAnnotations,
    t: usize,
    config: &SamplingConfig,
) -> Result<VqaSample> {
    config.check()?;
    let future = future_segments(ann, t)?;
    let refs = ann.window(t, config);
    Ok(VqaSample {
        family: TaskFamily::FuturePlan,
        instruction: ann.episode.instruction.clone(),
        prompt: format!(
            "{}\n{}",
            image_prefix(&refs),
            render(FUTURE_PLAN_TEMPLATE, &ann.episode.instruction)
        ),
        visual_refs: refs,
        target: future
            .iter()
            .map(|s| s.name.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        progress_value: None,
    })
}

/// `<progress> P %</progress>` with two decimals.
pub fn format_progress_tag(value: f64) -> String {
    format!("<progress> {:.2} %</progress>", value * 100.0)
}

/// Remaining-actions reasoning followed by the progress tag.
pub fn gen_progress(
    ann: &EpisodeAnnotations,
    labels: &ProgressLabels,
    t: usize,
    config: &SamplingConfig,
) -> Result<VqaSample> {
    config.check()?;
    ann.check_frame(t)?;
    let value = *labels.values.get(t).ok_or(VqaError::MissingLabels(t))?;
    let remaining = ann.segmentation.remaining_at(t);
    let mut target = String::new();
    if remaining.is_empty() {
        target.push_str("Remaining atomic actions: none.\n");
    } else {
        target.push_str("Remaining atomic actions:\n");
        for (i, r) in remaining.iter().enumerate() {
            target.push_str(&format!("{}. {r}\n", i + 1));
        }
    }
    target.push_str(&format_progress_tag(value));
    let refs = ann.window(t, config);
    Ok(VqaSample {
        family: TaskFamily::Progress,
        instruction: ann.episode.instruction.clone(),
        prompt: format!(
            "{}\n{}",
            image_prefix(&refs),
            render(PROGRESS_TEMPLATE, &ann.episode.instruction)
        ),
        visual_refs: refs,
        target,
        progress_value: Some(value),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedProgress {
    /// Fraction in [0, 1].
    pub value: f64,
    /// The raw percentage was outside [0, 100].
    pub clamped: bool,
}

fn progress_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<progress>\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*%?\s*</progress>")
            .expect("valid regex")
    })
}

/// Parses the last `<progress>` tag as a percentage and returns a fraction.
pub fn parse_progress_tag(text: &str) -> Result<ParsedProgress> {
    let caps = progress_regex()
        .captures_iter(text)
        .last()
        .ok_or(VqaError::TagNotFound)?;
    let pct: f64 = caps[1].parse().map_err(|_| VqaError::TagNotFound)?;
    let clamped = !(0.0..=100.0).contains(&pct);
    if clamped {
        log::warn!("progress value {pct} outside [0, 100], clamping");
    }
    Ok(ParsedProgress {
        value: pct.clamp(0.0, 100.0) / 100.0,
        clamped,
    })
}

/// Evenly spaced query frames `floor(j * T / n)`, deduplicated.
pub fn query_frames(num_frames: usize, density: usize) -> Vec<usize> {
    let n = density.min(num_frames).max(1);
    let mut out: Vec<usize> = (0..n).map(|j| j * num_frames / n).collect();
    out.dedup();
    out
}
