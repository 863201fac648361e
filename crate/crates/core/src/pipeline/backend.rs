//! Annotator backend interface and the deterministic mock backend.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::annotation::{CompletionState, EpisodeRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Retries exhausted or the backend is down for this request.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    /// Worth retrying at the pipeline level.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("unsupported request: {0}")]
    Unsupported(String),
}

/// One frame handed to a backend. Image bytes are PNG-encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_id: usize,
    pub image: Option<Arc<Vec<u8>>>,
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanRequest<'a> {
    pub episode: &'a EpisodeRef,
    pub prompt: &'a str,
    pub frames: &'a [FrameInput],
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub episode: &'a EpisodeRef,
    pub prompt: &'a str,
    pub plan: &'a [String],
    pub frames: &'a [FrameInput],
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct ReasonRequest<'a> {
    pub episode: &'a EpisodeRef,
    pub prompt: &'a str,
    pub frame: &'a FrameInput,
    pub state: CompletionState,
    pub remaining: &'a [String],
    pub attempt: u32,
}

/// A model (or stand-in) answering the three annotation stages. Every call
/// must depend only on its request.
pub trait AnnotatorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn plan(&self, req: &PlanRequest<'_>) -> Result<String, BackendError>;
    fn segment(&self, req: &SegmentRequest<'_>) -> Result<String, BackendError>;
    fn reason(&self, req: &ReasonRequest<'_>) -> Result<String, BackendError>;
}

/// Injected per-episode misbehaviour of the mock backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Segmentation answer is not JSON.
    Garbage,
    /// Every call fails as unavailable.
    Unavailable,
    /// Reasoning answers are empty.
    EmptyReasoning,
    /// The first `failures` attempts of every call fail transiently.
    Transient { failures: u32 },
}

/// Feature layout the mock reads: subtask ordinal (0 between subtasks)
/// and within-subtask phase in [0, 1].
pub const MARKER_DIM: usize = 0;
pub const PHASE_DIM: usize = 1;
/// Phase from which the mock reports a subtask as completed even when it is
/// the last thing seen.
pub const COMPLETE_PHASE: f64 = 0.75;

/// Template-driven backend over synthetic scenes: plans come from the
/// instruction, boundaries from the feature markers, reasoning from the
/// requested state with seeded phrasing.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    seed: u64,
    faults: BTreeMap<String, Fault>,
}

const OBSERVATIONS: [&str; 4] = [
    "Image shows the robot arm near the objects on the table.",
    "Image shows the gripper above the target object.",
    "Image shows the workspace with the manipulated object in view.",
    "Image shows the robot arm moving across the scene.",
];

pub fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in *part {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Plan steps encoded in a synthetic instruction (`a, then b, then c`).
pub fn instruction_steps(instruction: &str) -> Vec<String> {
    instruction
        .split(", then ")
        .map(|s| capitalize(s.trim().trim_end_matches('.')))
        .filter(|s| !s.is_empty())
        .collect()
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            faults: BTreeMap::new(),
        }
    }

    pub fn with_fault(mut self, episode_id: impl Into<String>, fault: Fault) -> Self {
        self.faults.insert(episode_id.into(), fault);
        self
    }

    fn fault(&self, episode: &EpisodeRef, attempt: u32) -> Result<Option<Fault>, BackendError> {
        match self.faults.get(&episode.episode_id) {
            Some(Fault::Unavailable) => Err(BackendError::Unavailable("injected outage".into())),
            Some(Fault::Transient { failures }) if attempt < *failures => Err(
                BackendError::Transient(format!("injected failure on attempt {attempt}")),
            ),
            other => Ok(other.copied()),
        }
    }

    fn rng(&self, episode: &EpisodeRef, frame: usize) -> ChaCha8Rng {
        let id = episode.trajectory_id();
        ChaCha8Rng::seed_from_u64(fnv1a(&[
            &self.seed.to_le_bytes(),
            id.as_bytes(),
            &frame.to_le_bytes(),
        ]))
    }
}

impl AnnotatorBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn plan(&self, req: &PlanRequest<'_>) -> Result<String, BackendError> {
        self.fault(req.episode, req.attempt)?;
        Ok(instruction_steps(&req.episode.instruction)
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<String, BackendError> {
        if self.fault(req.episode, req.attempt)? == Some(Fault::Garbage) {
            return Ok("The video shows a robot. I am not sure where the subtasks begin.".into());
        }
        let k = req.plan.len();
        let with_features = req
            .frames
            .iter()
            .all(|f| f.features.as_ref().is_some_and(|v| v.len() > PHASE_DIM));
        let mut subtasks = Vec::with_capacity(k);
        let mut all_done = true;
        for (i, name) in req.plan.iter().enumerate() {
            let ordinal = (i + 1) as f64;
            let (start, complete) = if with_features {
                let rows: Vec<&Vec<f64>> = req
                    .frames
                    .iter()
                    .map(|f| f.features.as_ref().expect("checked"))
                    .collect();
                let hits: Vec<usize> = (0..rows.len())
                    .filter(|&j| (rows[j][MARKER_DIM] - ordinal).abs() < 0.5)
                    .collect();
                match (hits.first(), hits.last()) {
                    (Some(&first), Some(&last)) => {
                        let max_phase = hits
                            .iter()
                            .map(|&j| rows[j][PHASE_DIM])
                            .fold(f64::MIN, f64::max);
                        // Moving on to something else also means this step ended.
                        let done = max_phase >= COMPLETE_PHASE || last + 1 < rows.len();
                        (
                            Some(req.frames[first].frame_id),
                            done.then_some(req.frames[last].frame_id),
                        )
                    }
                    _ => (None, None),
                }
            } else {
                // No scene signal: split the sampled frames evenly.
                let n = req.frames.len();
                let a = i * n / k.max(1);
                let b = ((i + 1) * n / k.max(1)).max(a + 1) - 1;
                match (
                    req.frames.get(a),
                    req.frames.get(b.min(n.saturating_sub(1))),
                ) {
                    (Some(fa), Some(fb)) => (Some(fa.frame_id), Some(fb.frame_id)),
                    _ => (None, None),
                }
            };
            all_done &= complete.is_some();
            let notes = match (start, complete) {
                (None, _) => "not present".to_string(),
                (Some(_), None) => "started but not finished".to_string(),
                (Some(_), Some(_)) => String::new(),
            };
            subtasks.push(json!({
                "id": i + 1,
                "notes": notes,
                "start_frame": start,
                "complete_frame": complete,
                "name": name,
            }));
        }
        let body = json!({
            "task": req.episode.instruction,
            "subtasks": subtasks,
            "overall_notes": if all_done { "" } else { "task not completed" },
        });
        Ok(serde_json::to_string_pretty(&body).expect("json"))
    }

    fn reason(&self, req: &ReasonRequest<'_>) -> Result<String, BackendError> {
        if self.fault(req.episode, req.attempt)? == Some(Fault::EmptyReasoning) {
            return Ok(String::new());
        }
        let mut rng = self.rng(req.episode, req.frame.frame_id);
        let obs = OBSERVATIONS[rng.gen_range(0..OBSERVATIONS.len())];
        let task = &req.episode.instruction;
        Ok(match req.state {
            CompletionState::Finished => {
                format!("{obs} This task is finished because every step of '{task}' has been carried out.")
            }
            CompletionState::Unfinished => {
                let steps: Vec<String> = req.remaining.iter().map(|s| lower_first(s)).collect();
                format!(
                    "{obs} This task is not finished because {} step(s) remain. The robot should {}.",
                    steps.len(),
                    steps.join(", then ")
                )
            }
            CompletionState::GivenUp => {
                let next = req
                    .remaining
                    .first()
                    .map(|s| lower_first(s))
                    .unwrap_or_default();
                format!("{obs} This task is not finished because the robot stopped before it could {next}.")
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse::{parse_plan, parse_segmentation};

    fn episode(id: &str) -> EpisodeRef {
        EpisodeRef {
            dataset_name: "ds".into(),
            episode_id: id.into(),
            camera_key: "cam".into(),
            num_frames: 6,
            instruction: "grasp the red block, then place the red block onto the plate".into(),
        }
    }

    fn frame(t: usize, marker: f64, phase: f64) -> FrameInput {
        FrameInput {
            frame_id: t,
            image: None,
            features: Some(vec![marker, phase]),
        }
    }

    #[test]
    fn plan_round_trips_through_parser() {
        let ep = episode("e");
        let text = MockBackend::new(0)
            .plan(&PlanRequest {
                episode: &ep,
                prompt: "",
                frames: &[],
                attempt: 0,
            })
            .unwrap();
        assert_eq!(
            text,
            "1. Grasp the red block\n2. Place the red block onto the plate"
        );
        assert_eq!(parse_plan(&text).unwrap().steps.len(), 2);
    }

    #[test]
    fn segment_reads_markers() {
        let ep = episode("e");
        let frames = vec![
            frame(0, 1.0, 0.0),
            frame(1, 1.0, 0.5),
            frame(2, 1.0, 1.0),
            frame(3, 2.0, 0.2),
            frame(4, 2.0, 0.4),
            frame(5, 2.0, 0.4),
        ];
        let plan = instruction_steps(&ep.instruction);
        let text = MockBackend::new(0)
            .segment(&SegmentRequest {
                episode: &ep,
                prompt: "",
                plan: &plan,
                frames: &frames,
                attempt: 0,
            })
            .unwrap();
        let seg = parse_segmentation(&text).unwrap();
        assert_eq!(seg.subtasks[0].span(), Some((0, 2)));
        assert_eq!(seg.subtasks[1].start_frame, Some(3));
        assert_eq!(seg.subtasks[1].complete_frame, None);
        assert_eq!(seg.overall_notes, "task not completed");
    }

    #[test]
    fn reasoning_is_seeded() {
        let ep = episode("e");
        let f = frame(3, 1.0, 0.5);
        let remaining = vec!["Place the red block onto the plate".to_string()];
        let req = ReasonRequest {
            episode: &ep,
            prompt: "",
            frame: &f,
            state: CompletionState::Unfinished,
            remaining: &remaining,
            attempt: 0,
        };
        let a = MockBackend::new(5).reason(&req).unwrap();
        assert_eq!(a, MockBackend::new(5).reason(&req).unwrap());
        assert!(a.contains("place the red block onto the plate"));
    }

    #[test]
    fn faults() {
        let ep = episode("bad");
        let m = MockBackend::new(0).with_fault("bad", Fault::Transient { failures: 2 });
        let req = |attempt| PlanRequest {
            episode: &ep,
            prompt: "",
            frames: &[],
            attempt,
        };
        assert!(matches!(m.plan(&req(0)), Err(BackendError::Transient(_))));
        assert!(matches!(m.plan(&req(1)), Err(BackendError::Transient(_))));
        assert!(m.plan(&req(2)).is_ok());
        let down = MockBackend::new(0).with_fault("bad", Fault::Unavailable);
        assert!(matches!(
            down.plan(&req(0)),
            Err(BackendError::Unavailable(_))
        ));
        let other = episode("fine");
        assert!(down
            .plan(&PlanRequest {
                episode: &other,
                prompt: "",
                frames: &[],
                attempt: 0
            })
            .is_ok());
    }
}
