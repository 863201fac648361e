//! Annotation domain types, the JSONL record schema, and the post-processing
//! that turns segment-level annotator output into dense per-frame records.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Advisory word budget for segment notes.
pub const NOTES_WORD_LIMIT: usize = 60;
/// Advisory word budget for `overall_notes`.
pub const OVERALL_NOTES_WORD_LIMIT: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("segmentation has no planned subtasks")]
    EmptyPlan,
    #[error("duplicate subtask id {0}")]
    DuplicateId(u32),
    #[error("subtask {id}: start_frame {start} is after complete_frame {complete}")]
    InvertedSpan { id: u32, start: i64, complete: i64 },
    #[error("subtask {id}: complete_frame {complete} given without a start_frame")]
    MissingStart { id: u32, complete: i64 },
    #[error("subtask {id}: {field} = {value} outside [0, {max}]")]
    BoundaryOutOfRange {
        id: u32,
        field: &'static str,
        value: i64,
        max: usize,
    },
    #[error("subtasks {first} and {second} overlap")]
    OverlapError { first: u32, second: u32 },
    #[error("segmentation must be validated first: {0}")]
    UnvalidatedInput(String),
    #[error("line {line}: schema violation on `{field}`: {message}")]
    SchemaViolation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;

/// Identity of one camera stream of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpisodeRef {
    pub dataset_name: String,
    pub episode_id: String,
    pub camera_key: String,
    pub num_frames: usize,
    pub instruction: String,
}

impl EpisodeRef {
    /// `dataset/episode/camera`, used as trajectory id across the toolkit.
    pub fn trajectory_id(&self) -> String {
        format!(
            "{}/{}/{}",
            self.dataset_name, self.episode_id, self.camera_key
        )
    }

    pub fn check(&self) -> Result<()> {
        for (field, value) in [
            ("dataset_name", &self.dataset_name),
            ("episode_id", &self.episode_id),
            ("camera_key", &self.camera_key),
        ] {
            if value.is_empty() {
                return Err(schema(0, field, "must be non-empty"));
            }
        }
        if self.num_frames == 0 {
            return Err(schema(0, "num_frames", "must be >= 1"));
        }
        Ok(())
    }
}

/// One planned atomic action and its (possibly missing) temporal span.
///
/// Boundaries are signed so that out-of-range annotator output can be
/// reported instead of failing to parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSegment {
    pub id: u32,
    #[serde(default)]
    pub notes: String,
    pub start_frame: Option<i64>,
    pub complete_frame: Option<i64>,
    pub name: String,
}

impl SubtaskSegment {
    pub fn new(
        id: u32,
        name: impl Into<String>,
        start: Option<i64>,
        complete: Option<i64>,
    ) -> Self {
        Self {
            id,
            notes: String::new(),
            start_frame: start,
            complete_frame: complete,
            name: name.into(),
        }
    }

    /// Inclusive frame span when both boundaries are present.
    pub fn span(&self) -> Option<(usize, usize)> {
        match (self.start_frame, self.complete_frame) {
            (Some(s), Some(e)) if s >= 0 && e >= s => Some((s as usize, e as usize)),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.span().is_some()
    }

    /// Started but never completed.
    pub fn is_unfinished(&self) -> bool {
        self.start_frame.is_some() && self.complete_frame.is_none()
    }

    pub fn is_absent(&self) -> bool {
        self.start_frame.is_none() && self.complete_frame.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub task: String,
    pub subtasks: Vec<SubtaskSegment>,
    #[serde(default)]
    pub overall_notes: String,
}

impl SegmentationResult {
    /// Segments with both boundaries, in stored order.
    pub fn valid_segments(&self) -> impl Iterator<Item = &SubtaskSegment> {
        self.subtasks.iter().filter(|s| s.is_valid())
    }

    pub fn is_completed(&self) -> bool {
        self.subtasks.iter().all(|s| s.is_valid())
    }

    /// Planned subtasks still outstanding at frame `t`, in plan (id) order.
    pub fn remaining_at(&self, t: usize) -> Vec<String> {
        let mut pending: Vec<&SubtaskSegment> = self
            .subtasks
            .iter()
            .filter(|s| match s.complete_frame {
                Some(e) => e > t as i64,
                None => true,
            })
            .collect();
        pending.sort_by_key(|s| s.id);
        pending.into_iter().map(|s| s.name.clone()).collect()
    }

    /// Completion state of the whole task as seen at frame `t`.
    pub fn completion_at(&self, t: usize) -> CompletionState {
        let outstanding: Vec<&SubtaskSegment> = self
            .subtasks
            .iter()
            .filter(|s| match s.complete_frame {
                Some(e) => e > t as i64,
                None => true,
            })
            .collect();
        if outstanding.is_empty() {
            CompletionState::Finished
        } else if outstanding.iter().all(|s| s.complete_frame.is_none()) {
            // Nothing left that will ever complete.
            CompletionState::GivenUp
        } else {
            CompletionState::Unfinished
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionState {
    Unfinished,
    Finished,
    GivenUp,
}

impl fmt::Display for CompletionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompletionState::Unfinished => "unfinished",
            CompletionState::Finished => "finished",
            CompletionState::GivenUp => "given_up",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningSource {
    Keyframe,
    Propagated,
}

/// Normalized 2D box; coordinates are fractions of the image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingBox {
    pub label: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl GroundingBox {
    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x_min)
            && unit(self.y_min)
            && unit(self.x_max)
            && unit(self.y_max)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }
}

/// One frame of procedural supervision; the JSONL unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub episode: EpisodeRef,
    pub frame_id: usize,
    pub subtask_id: Option<u32>,
    pub subtask_name: Option<String>,
    pub reasoning: String,
    pub reasoning_source: ReasoningSource,
    pub completion: CompletionState,
    pub remaining_subtasks: Vec<String>,
    pub grounding_boxes: Vec<GroundingBox>,
    pub progress: Option<f64>,
    /// Keys not known to this schema, carried through untouched.
    pub extra: Map<String, Value>,
}

impl AnnotationRecord {
    pub fn sort_key(&self) -> (&str, &str, usize, &str) {
        (
            &self.episode.dataset_name,
            &self.episode.episode_id,
            self.frame_id,
            &self.episode.camera_key,
        )
    }

    pub fn trajectory_id(&self) -> String {
        self.episode.trajectory_id()
    }
}

// Wire layout: flat object, required keys first.
#[derive(Serialize, Deserialize)]
struct WireRecord {
    dataset_name: String,
    episode_id: String,
    camera_key: String,
    frame_id: usize,
    subtask_id: Option<u32>,
    subtask_name: Option<String>,
    reasoning: String,
    reasoning_source: ReasoningSource,
    completion: CompletionState,
    remaining_subtasks: Vec<String>,
    grounding_boxes: Vec<GroundingBox>,
    progress: Option<f64>,
    num_frames: usize,
    instruction: String,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

const REQUIRED_KEYS: [&str; 14] = [
    "dataset_name",
    "episode_id",
    "camera_key",
    "frame_id",
    "subtask_id",
    "subtask_name",
    "reasoning",
    "reasoning_source",
    "completion",
    "remaining_subtasks",
    "grounding_boxes",
    "progress",
    "num_frames",
    "instruction",
];

fn schema(line: usize, field: &str, message: impl Into<String>) -> AnnotationError {
    AnnotationError::SchemaViolation {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Checks the per-record invariants that do not need other records.
pub fn check_record(rec: &AnnotationRecord, line: usize) -> Result<()> {
    rec.episode.check().map_err(|e| match e {
        AnnotationError::SchemaViolation { field, message, .. } => {
            AnnotationError::SchemaViolation {
                line,
                field,
                message,
            }
        }
        other => other,
    })?;
    if rec.frame_id >= rec.episode.num_frames {
        return Err(schema(
            line,
            "frame_id",
            format!("{} >= num_frames {}", rec.frame_id, rec.episode.num_frames),
        ));
    }
    if let Some(p) = rec.progress {
        if !(0.0..=1.0).contains(&p) {
            return Err(schema(line, "progress", format!("{p} outside [0, 1]")));
        }
    }
    if let Some(b) = rec.grounding_boxes.iter().find(|b| !b.is_valid()) {
        return Err(schema(
            line,
            "grounding_boxes",
            format!("invalid box `{}`", b.label),
        ));
    }
    Ok(())
}

/// Cross-record check: propagated reasoning must have a keyframe source
/// with the same subtask in the same episode.
pub fn check_episode_consistency(records: &[AnnotationRecord]) -> Result<()> {
    let mut keyframe_subtasks: BTreeMap<String, Vec<Option<u32>>> = BTreeMap::new();
    for r in records {
        if r.reasoning_source == ReasoningSource::Keyframe {
            keyframe_subtasks
                .entry(r.trajectory_id())
                .or_default()
                .push(r.subtask_id);
        }
    }
    for (i, r) in records.iter().enumerate() {
        if r.reasoning_source == ReasoningSource::Propagated {
            let ok = keyframe_subtasks
                .get(&r.trajectory_id())
                .is_some_and(|ids| ids.contains(&r.subtask_id));
            if !ok {
                return Err(schema(
                    i + 1,
                    "reasoning_source",
                    "propagated record without a keyframe in the same subtask",
                ));
            }
        }
    }
    Ok(())
}

pub fn record_to_value(rec: &AnnotationRecord) -> Value {
    let wire = WireRecord {
        dataset_name: rec.episode.dataset_name.clone(),
        episode_id: rec.episode.episode_id.clone(),
        camera_key: rec.episode.camera_key.clone(),
        frame_id: rec.frame_id,
        subtask_id: rec.subtask_id,
        subtask_name: rec.subtask_name.clone(),
        reasoning: rec.reasoning.clone(),
        reasoning_source: rec.reasoning_source,
        completion: rec.completion,
        remaining_subtasks: rec.remaining_subtasks.clone(),
        grounding_boxes: rec.grounding_boxes.clone(),
        progress: rec.progress,
        num_frames: rec.episode.num_frames,
        instruction: rec.episode.instruction.clone(),
        extra: rec.extra.clone(),
    };
    serde_json::to_value(wire).expect("record serializes")
}

/// Parses and validates one JSON object as a record; `line` is 1-based.
pub fn record_from_value(value: Value, line: usize) -> Result<AnnotationRecord> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema(line, "<record>", "expected a JSON object"))?;
    if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !obj.contains_key(**k)) {
        return Err(schema(line, missing, "missing required key"));
    }
    // Deserialize field by field so errors name the offending key.
    for key in REQUIRED_KEYS {
        let probe = obj[key].clone();
        let res: std::result::Result<(), serde_json::Error> = match key {
            "frame_id" | "num_frames" => serde_json::from_value::<usize>(probe).map(drop),
            "subtask_id" => serde_json::from_value::<Option<u32>>(probe).map(drop),
            "subtask_name" => serde_json::from_value::<Option<String>>(probe).map(drop),
            "reasoning_source" => serde_json::from_value::<ReasoningSource>(probe).map(drop),
            "completion" => serde_json::from_value::<CompletionState>(probe).map(drop),
            "remaining_subtasks" => serde_json::from_value::<Vec<String>>(probe).map(drop),
            "grounding_boxes" => serde_json::from_value::<Vec<GroundingBox>>(probe).map(drop),
            "progress" => serde_json::from_value::<Option<f64>>(probe).map(drop),
            _ => serde_json::from_value::<String>(probe).map(drop),
        };
        res.map_err(|e| schema(line, key, e.to_string()))?;
    }
    let wire: WireRecord =
        serde_json::from_value(value).map_err(|e| schema(line, "<record>", e.to_string()))?;
    let rec = AnnotationRecord {
        episode: EpisodeRef {
            dataset_name: wire.dataset_name,
            episode_id: wire.episode_id,
            camera_key: wire.camera_key,
            num_frames: wire.num_frames,
            instruction: wire.instruction,
        },
        frame_id: wire.frame_id,
        subtask_id: wire.subtask_id,
        subtask_name: wire.subtask_name,
        reasoning: wire.reasoning,
        reasoning_source: wire.reasoning_source,
        completion: wire.completion,
        remaining_subtasks: wire.remaining_subtasks,
        grounding_boxes: wire.grounding_boxes,
        progress: wire.progress,
        extra: wire.extra,
    };
    check_record(&rec, line)?;
    Ok(rec)
}

/// Writes one record per line. Callers serialize access to `out`.
pub fn write_jsonl<W: Write>(mut out: W, records: &[AnnotationRecord]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(&record_to_value(rec))
            .map_err(|e| AnnotationError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| AnnotationError::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| AnnotationError::Io(e.to_string()))
}

/// Reads records, skipping blank lines.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| AnnotationError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| schema(line_no, "<json>", e.to_string()))?;
        out.push(record_from_value(value, line_no)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidationPolicy {
    Strict,
    #[default]
    AutoTrim,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Repair {
    Clamped {
        id: u32,
        field: &'static str,
        from: i64,
        to: i64,
    },
    /// End pulled back to just before the next segment's start.
    Trimmed { id: u32, old_end: i64, new_end: i64 },
    /// Shares its start with an earlier segment; boundaries removed.
    Dropped { id: u32 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub repairs: Vec<Repair>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.repairs.is_empty() && self.warnings.is_empty()
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Checks temporal consistency of annotator segments against the episode
/// length, repairing what `policy` allows and reporting every repair.
pub fn validate_segmentation(
    seg: &SegmentationResult,
    num_frames: usize,
    policy: ValidationPolicy,
) -> Result<(SegmentationResult, ValidationReport)> {
    if seg.subtasks.is_empty() {
        return Err(AnnotationError::EmptyPlan);
    }
    let mut report = ValidationReport::default();
    let mut seen = std::collections::BTreeSet::new();
    for s in &seg.subtasks {
        if !seen.insert(s.id) {
            return Err(AnnotationError::DuplicateId(s.id));
        }
    }

    let max = num_frames.saturating_sub(1);
    let mut subtasks = seg.subtasks.clone();
    for s in &mut subtasks {
        if let (Some(a), Some(b)) = (s.start_frame, s.complete_frame) {
            if a > b {
                return Err(AnnotationError::InvertedSpan {
                    id: s.id,
                    start: a,
                    complete: b,
                });
            }
        }
        if let (None, Some(b)) = (s.start_frame, s.complete_frame) {
            return Err(AnnotationError::MissingStart {
                id: s.id,
                complete: b,
            });
        }
        for (field, slot) in [
            ("start_frame", &mut s.start_frame),
            ("complete_frame", &mut s.complete_frame),
        ] {
            if let Some(v) = *slot {
                if v < 0 || v > max as i64 {
                    if policy == ValidationPolicy::Strict {
                        return Err(AnnotationError::BoundaryOutOfRange {
                            id: s.id,
                            field,
                            value: v,
                            max,
                        });
                    }
                    let to = v.clamp(0, max as i64);
                    report.repairs.push(Repair::Clamped {
                        id: s.id,
                        field,
                        from: v,
                        to,
                    });
                    *slot = Some(to);
                }
            }
        }
        if word_count(&s.notes) > NOTES_WORD_LIMIT {
            report.warnings.push(format!(
                "subtask {}: notes exceed {NOTES_WORD_LIMIT} words",
                s.id
            ));
        }
    }
    if word_count(&seg.overall_notes) > OVERALL_NOTES_WORD_LIMIT {
        report.warnings.push(format!(
            "overall_notes exceed {OVERALL_NOTES_WORD_LIMIT} words"
        ));
    }

    // Started segments first by start, then absent ones; id breaks ties.
    subtasks.sort_by_key(|s| (s.start_frame.is_none(), s.start_frame, s.id));

    // Overlaps: the earlier-starting segment keeps its start and yields its
    // tail; a later segment sharing the same start is dropped.
    let mut prev: Option<usize> = None;
    for i in 0..subtasks.len() {
        let (Some(start), Some(_)) = (subtasks[i].start_frame, subtasks[i].complete_frame) else {
            continue;
        };
        if let Some(p) = prev {
            let (p_start, p_end) = (
                subtasks[p].start_frame.expect("kept segment"),
                subtasks[p].complete_frame.expect("kept segment"),
            );
            if start <= p_end {
                if policy == ValidationPolicy::Strict {
                    return Err(AnnotationError::OverlapError {
                        first: subtasks[p].id,
                        second: subtasks[i].id,
                    });
                }
                if start == p_start {
                    report.repairs.push(Repair::Dropped { id: subtasks[i].id });
                    subtasks[i].start_frame = None;
                    subtasks[i].complete_frame = None;
                    continue;
                }
                report.repairs.push(Repair::Trimmed {
                    id: subtasks[p].id,
                    old_end: p_end,
                    new_end: start - 1,
                });
                subtasks[p].complete_frame = Some(start - 1);
            }
        }
        prev = Some(i);
    }
    subtasks.sort_by_key(|s| (s.start_frame.is_none(), s.start_frame, s.id));

    Ok((
        SegmentationResult {
            task: seg.task.clone(),
            subtasks,
            overall_notes: seg.overall_notes.clone(),
        },
        report,
    ))
}

/// Maps every frame to the id of the valid segment containing it.
pub fn expand_segments_to_frames(
    seg: &SegmentationResult,
    num_frames: usize,
) -> Result<Vec<Option<u32>>> {
    let mut out = vec![None; num_frames];
    for s in seg.valid_segments() {
        let (a, b) = s.span().expect("valid segment has a span");
        if b >= num_frames {
            return Err(AnnotationError::UnvalidatedInput(format!(
                "subtask {} ends at {b}, beyond {num_frames} frames",
                s.id
            )));
        }
        for slot in &mut out[a..=b] {
            if let Some(other) = slot {
                return Err(AnnotationError::UnvalidatedInput(format!(
                    "subtasks {other} and {} overlap",
                    s.id
                )));
            }
            *slot = Some(s.id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PropagationReport {
    /// Frames inside a subtask span that has no keyframe.
    pub frames_without_keyframe: Vec<usize>,
    /// Frames outside every valid span.
    pub unassigned_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub records: Vec<AnnotationRecord>,
    pub report: PropagationReport,
}

/// Produces one record per frame. Non-keyframes copy the reasoning of the
/// nearest keyframe inside the same contiguous subtask span (ties go to the
/// earlier keyframe); reasoning never crosses span boundaries.
pub fn propagate_keyframe_reasoning(
    episode: &EpisodeRef,
    seg: &SegmentationResult,
    keyframes: &[AnnotationRecord],
    assignment: &[Option<u32>],
) -> Propagation {
    let n = assignment.len();
    let mut by_frame: BTreeMap<usize, &AnnotationRecord> = BTreeMap::new();
    for k in keyframes {
        if k.frame_id < n {
            by_frame.insert(k.frame_id, k);
        }
    }
    let names: BTreeMap<u32, &str> = seg
        .subtasks
        .iter()
        .map(|s| (s.id, s.name.as_str()))
        .collect();

    let mut report = PropagationReport::default();
    let mut records = Vec::with_capacity(n);

    let mut run_start = 0;
    while run_start < n {
        let id = assignment[run_start];
        let mut run_end = run_start;
        while run_end + 1 < n && assignment[run_end + 1] == id {
            run_end += 1;
        }
        let run_keys: Vec<usize> = by_frame
            .range(run_start..=run_end)
            .map(|(f, _)| *f)
            .collect();

        for t in run_start..=run_end {
            if let Some(k) = by_frame.get(&t) {
                let mut rec = (*k).clone();
                rec.subtask_id = id;
                rec.subtask_name = id.and_then(|i| names.get(&i).map(|s| s.to_string()));
                rec.reasoning_source = ReasoningSource::Keyframe;
                records.push(rec);
                continue;
            }
            if id.is_none() {
                report.unassigned_frames += 1;
                records.push(blank_record(episode, seg, t, None, None));
                continue;
            }
            let nearest = run_keys.iter().copied().min_by_key(|&f| (f.abs_diff(t), f));
            match nearest {
                Some(f) => {
                    let src = by_frame[&f];
                    records.push(AnnotationRecord {
                        episode: episode.clone(),
                        frame_id: t,
                        subtask_id: id,
                        subtask_name: id.and_then(|i| names.get(&i).map(|s| s.to_string())),
                        reasoning: src.reasoning.clone(),
                        reasoning_source: ReasoningSource::Propagated,
                        completion: src.completion,
                        remaining_subtasks: src.remaining_subtasks.clone(),
                        grounding_boxes: Vec::new(),
                        progress: None,
                        extra: Map::new(),
                    });
                }
                None => {
                    report.frames_without_keyframe.push(t);
                    let name = id.and_then(|i| names.get(&i).map(|s| s.to_string()));
                    records.push(blank_record(episode, seg, t, id, name));
                }
            }
        }
        run_start = run_end + 1;
    }
    if report.unassigned_frames > 0 || !report.frames_without_keyframe.is_empty() {
        log::debug!(
            "{}: {} unassigned frames, {} frames without keyframe reasoning",
            episode.trajectory_id(),
            report.unassigned_frames,
            report.frames_without_keyframe.len()
        );
    }
    Propagation { records, report }
}

fn blank_record(
    episode: &EpisodeRef,
    seg: &SegmentationResult,
    t: usize,
    subtask_id: Option<u32>,
    subtask_name: Option<String>,
) -> AnnotationRecord {
    // Empty reasoning has no source to propagate from; it is tagged as a
    // keyframe slot and listed in the propagation report.
    AnnotationRecord {
        episode: episode.clone(),
        frame_id: t,
        subtask_id,
        subtask_name,
        reasoning: String::new(),
        reasoning_source: ReasoningSource::Keyframe,
        completion: seg.completion_at(t),
        remaining_subtasks: seg.remaining_at(t),
        grounding_boxes: Vec::new(),
        progress: None,
        extra: Map::new(),
    }
}

/// Rebuilds the segmentation of one trajectory from its dense records:
/// spans from the per-frame subtask ids, outstanding planned subtasks from
/// the last frame's `remaining_subtasks`.
pub fn segmentation_from_records(records: &[AnnotationRecord]) -> Result<SegmentationResult> {
    let first = records
        .first()
        .ok_or_else(|| AnnotationError::UnvalidatedInput("no records".into()))?;
    let mut spans: BTreeMap<u32, (usize, usize, String)> = BTreeMap::new();
    for r in records {
        if let Some(id) = r.subtask_id {
            let name = r.subtask_name.clone().unwrap_or_default();
            spans
                .entry(id)
                .and_modify(|e| {
                    e.0 = e.0.min(r.frame_id);
                    e.1 = e.1.max(r.frame_id);
                })
                .or_insert((r.frame_id, r.frame_id, name));
        }
    }
    let last = records
        .iter()
        .max_by_key(|r| r.frame_id)
        .expect("non-empty");
    let mut subtasks: Vec<SubtaskSegment> = spans
        .iter()
        .map(|(id, (a, b, name))| {
            SubtaskSegment::new(*id, name.clone(), Some(*a as i64), Some(*b as i64))
        })
        .collect();
    let mut next_id = spans.keys().max().copied().unwrap_or(0) + 1;
    for name in &last.remaining_subtasks {
        if subtasks.iter().any(|s| &s.name == name) {
            continue;
        }
        subtasks.push(SubtaskSegment::new(next_id, name.clone(), None, None));
        next_id += 1;
    }
    let seg = SegmentationResult {
        task: first.episode.instruction.clone(),
        subtasks,
        overall_notes: String::new(),
    };
    let (seg, _) = validate_segmentation(&seg, first.episode.num_frames, ValidationPolicy::Strict)?;
    Ok(seg)
}

/// Groups records by trajectory id, each group sorted by frame.
pub fn group_by_trajectory(
    records: &[AnnotationRecord],
) -> BTreeMap<String, Vec<AnnotationRecord>> {
    let mut out: BTreeMap<String, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.trajectory_id()).or_default().push(r.clone());
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.frame_id);
    }
    out
}
