//! Four-stage annotation pipeline: reader, preprocessor, annotator and
//! consumer, connected by bounded queues.

pub mod backend;
pub mod parse;
pub mod prompts;
pub mod remote;
pub mod source;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::{Deserialize, Serialize};
use serde_json::Map;
use thiserror::Error;

use crate::annotation::{
    expand_segments_to_frames, propagate_keyframe_reasoning, validate_segmentation, word_count,
    AnnotationRecord, EpisodeRef, ReasoningSource, SegmentationResult, ValidationPolicy,
};
use crate::progress::{frame_diffs, pixel_features, DiffMetric, VisualSignal};

use backend::{
    fnv1a, AnnotatorBackend, BackendError, FrameInput, PlanRequest, ReasonRequest, SegmentRequest,
};
use parse::{parse_plan, parse_segmentation, ParseError};
use source::{load_episode, EpisodeSpec, LoadedEpisode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_base: Duration,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_millis(50),
        }
    }
}

/// Simulated per-item latency, uniform in `[min, max]` and fixed per episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delay {
    pub min: Duration,
    pub max: Duration,
}

impl Delay {
    pub fn fixed(d: Duration) -> Self {
        Self { min: d, max: d }
    }

    pub fn millis(min: u64, max: u64) -> Self {
        Self {
            min: Duration::from_millis(min),
            max: Duration::from_millis(max),
        }
    }

    fn for_key(&self, key: u64) -> Duration {
        if self.max <= self.min {
            return self.min;
        }
        let span = (self.max - self.min).as_nanos() as u64;
        self.min + Duration::from_nanos(key % (span + 1))
    }

    fn apply(&self, key: u64) {
        let d = self.for_key(key);
        if !d.is_zero() {
            thread::sleep(d);
        }
    }
}

/// Extra latency per stage, for profiling and back-pressure tests.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageDelays {
    pub read: Delay,
    pub preprocess: Delay,
    pub annotate: Delay,
    pub consume: Delay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub queue_capacity: usize,
    pub preprocessor_workers: usize,
    /// Annotator workers, i.e. episodes in flight at the backend.
    pub annotator_concurrency: usize,
    /// Keyframe threshold as a fraction of the largest per-step diff.
    pub dedup_threshold: f64,
    pub retry: RetryConfig,
    /// Frames shown to the planner.
    pub plan_frames: usize,
    /// Frames shown to the segmenter.
    pub segment_frames: usize,
    pub diff_metric: DiffMetric,
    pub delays: StageDelays,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 64,
            preprocessor_workers: 4,
            annotator_concurrency: 8,
            dedup_threshold: 0.05,
            retry: RetryConfig::default(),
            plan_frames: 8,
            segment_frames: 64,
            diff_metric: DiffMetric::L2,
            delays: StageDelays::default(),
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        let counts = [
            ("queue_capacity", self.queue_capacity),
            ("preprocessor_workers", self.preprocessor_workers),
            ("annotator_concurrency", self.annotator_concurrency),
            ("retry.max_attempts", self.retry.max_attempts as usize),
            ("plan_frames", self.plan_frames),
            ("segment_frames", self.segment_frames),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(PipelineError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(PipelineError::Config(format!(
                "dedup_threshold must be in [0, 1], got {}",
                self.dedup_threshold
            )));
        }
        Ok(())
    }
}

/// Keyframes from per-step diffs: frame 0, then every frame where the diff
/// accumulated since the previous keyframe reaches `threshold * max(diffs)`,
/// then the last frame.
pub fn dedup_keyframes(diffs: &[f64], threshold: f64) -> Vec<usize> {
    let num_frames = diffs.len() + 1;
    let max = diffs.iter().copied().fold(0.0, f64::max);
    let cut = threshold * max;
    let mut out = vec![0];
    let mut acc = 0.0;
    for t in 1..num_frames {
        acc += diffs[t - 1];
        if acc > 0.0 && acc >= cut {
            out.push(t);
            acc = 0.0;
        }
    }
    if *out.last().expect("non-empty") != num_frames - 1 {
        out.push(num_frames - 1);
    }
    out
}

/// Endpoint-inclusive, evenly spaced sample of at most `n` frame ids.
pub fn sample_frame_ids(num_frames: usize, n: usize) -> Vec<usize> {
    if num_frames <= n {
        return (0..num_frames).collect();
    }
    if n == 1 {
        return vec![num_frames - 1];
    }
    let mut out: Vec<usize> = (0..n)
        .map(|j| ((j * (num_frames - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// An episode routed out of the run, with whatever raw output caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub dataset_name: String,
    pub episode_id: String,
    pub camera_key: String,
    pub stage: String,
    pub error: String,
    pub message: String,
    pub raw_response: Option<String>,
}

impl QuarantineEntry {
    fn new(
        episode: &EpisodeRef,
        stage: &str,
        error: &str,
        message: impl Into<String>,
        raw: Option<String>,
    ) -> Self {
        Self {
            dataset_name: episode.dataset_name.clone(),
            episode_id: episode.episode_id.clone(),
            camera_key: episode.camera_key.clone(),
            stage: stage.to_string(),
            error: error.to_string(),
            message: message.into(),
            raw_response: raw,
        }
    }

    pub fn trajectory_id(&self) -> String {
        format!(
            "{}/{}/{}",
            self.dataset_name, self.episode_id, self.camera_key
        )
    }
}

/// Busy seconds per stage, summed over that stage's workers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageBusy {
    pub read: f64,
    pub preprocess: f64,
    pub annotate: f64,
    pub consume: f64,
}

impl StageBusy {
    pub fn total(&self) -> f64 {
        self.read + self.preprocess + self.annotate + self.consume
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub episodes_in: usize,
    pub episodes_out: usize,
    pub quarantined: usize,
    pub frames_out: usize,
    pub keyframes: usize,
    pub backend_calls: u64,
    pub retries: u64,
    /// Times the reader found the first queue full and had to block.
    pub reader_blocked: u64,
    pub per_stage_busy_time: StageBusy,
    pub wall_time: f64,
    /// Output frames per second of wall time.
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Sorted by (dataset_name, episode_id, frame_id, camera_key).
    pub records: Vec<AnnotationRecord>,
    /// Sorted by trajectory id.
    pub quarantine: Vec<QuarantineEntry>,
    pub report: PipelineReport,
}

struct Prepared {
    episode: EpisodeRef,
    frames: Vec<FrameInput>,
    plan_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    keyframes: Vec<usize>,
    plan_prompt: String,
}

struct Annotated {
    episode: EpisodeRef,
    segmentation: SegmentationResult,
    keyframe_records: Vec<AnnotationRecord>,
}

type Item<T> = Result<T, QuarantineEntry>;

#[derive(Default)]
struct Counters {
    busy: [AtomicU64; 4],
    calls: AtomicU64,
    retries: AtomicU64,
    reader_blocked: AtomicU64,
}

impl Counters {
    fn add_busy(&self, stage: usize, since: Instant) {
        self.busy[stage].fetch_add(since.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }

    fn busy_secs(&self, stage: usize) -> f64 {
        self.busy[stage].load(Ordering::Relaxed) as f64 * 1e-9
    }
}

fn episode_key(episode: &EpisodeRef) -> u64 {
    fnv1a(&[episode.trajectory_id().as_bytes()])
}

fn preprocess(loaded: LoadedEpisode, config: &PipelineConfig) -> Item<Prepared> {
    let episode = loaded.episode;
    let fail =
        |msg: String| QuarantineEntry::new(&episode, "preprocess", "InvalidEpisode", msg, None);
    if episode.num_frames == 0 {
        return Err(fail("episode has no frames".into()));
    }
    let rows = match (&loaded.features, &loaded.images) {
        (Some(rows), _) => rows.clone(),
        (None, Some(imgs)) => {
            let mut rows = Vec::with_capacity(imgs.len());
            for (t, img) in imgs.iter().enumerate() {
                rows.push(pixel_features(img).map_err(|e| fail(format!("frame {t}: {e}")))?);
            }
            rows
        }
        (None, None) => return Err(fail("episode has neither images nor features".into())),
    };
    let diffs = frame_diffs(&VisualSignal::Features(rows), config.diff_metric)
        .map_err(|e| fail(e.to_string()))?;
    let frames = (0..episode.num_frames)
        .map(|t| FrameInput {
            frame_id: t,
            image: loaded.images.as_ref().map(|imgs| Arc::clone(&imgs[t])),
            features: loaded.features.as_ref().map(|rows| rows[t].clone()),
        })
        .collect();
    Ok(Prepared {
        plan_prompt: prompts::render_plan_prompt(&episode.instruction),
        plan_ids: sample_frame_ids(episode.num_frames, config.plan_frames),
        segment_ids: sample_frame_ids(episode.num_frames, config.segment_frames),
        keyframes: dedup_keyframes(&diffs, config.dedup_threshold),
        frames,
        episode,
    })
}

enum CallFailure {
    Backend(BackendError),
    Empty,
}

/// Calls the backend, retrying transient errors and empty answers.
fn call_with_retry(
    retry: &RetryConfig,
    counters: &Counters,
    mut call: impl FnMut(u32) -> Result<String, BackendError>,
) -> Result<String, CallFailure> {
    let mut last = CallFailure::Empty;
    for attempt in 0..retry.max_attempts {
        if attempt > 0 {
            counters.retries.fetch_add(1, Ordering::Relaxed);
            thread::sleep(retry.backoff_base * 2u32.saturating_pow(attempt - 1));
        }
        counters.calls.fetch_add(1, Ordering::Relaxed);
        match call(attempt) {
            Ok(text) if !text.trim().is_empty() => return Ok(text),
            Ok(_) => last = CallFailure::Empty,
            Err(BackendError::Transient(msg)) => {
                last = CallFailure::Backend(BackendError::Transient(msg))
            }
            Err(e) => return Err(CallFailure::Backend(e)),
        }
    }
    Err(match last {
        CallFailure::Backend(BackendError::Transient(msg)) => CallFailure::Backend(
            BackendError::Unavailable(format!("retries exhausted: {msg}")),
        ),
        other => other,
    })
}

fn call_failure(episode: &EpisodeRef, stage: &str, f: CallFailure) -> QuarantineEntry {
    match f {
        CallFailure::Empty => QuarantineEntry::new(
            episode,
            stage,
            "EmptyResponse",
            "backend returned empty text",
            None,
        ),
        CallFailure::Backend(e) => {
            let kind = match e {
                BackendError::Auth(_) => "AuthError",
                BackendError::Unsupported(_) => "Unsupported",
                _ => "BackendUnavailable",
            };
            QuarantineEntry::new(episode, stage, kind, e.to_string(), None)
        }
    }
}

fn parse_failure(episode: &EpisodeRef, stage: &str, e: ParseError, raw: String) -> QuarantineEntry {
    let kind = match e {
        ParseError::Malformed(_) => "ParseError",
        ParseError::SchemaViolation { .. } => "SchemaViolation",
    };
    QuarantineEntry::new(episode, stage, kind, e.to_string(), Some(raw))
}

fn annotate(
    p: Prepared,
    backend: &dyn AnnotatorBackend,
    config: &PipelineConfig,
    counters: &Counters,
) -> Item<Annotated> {
    let episode = &p.episode;
    let pick = |ids: &[usize]| ids.iter().map(|&t| p.frames[t].clone()).collect::<Vec<_>>();

    let plan_frames = pick(&p.plan_ids);
    let raw = call_with_retry(&config.retry, counters, |attempt| {
        backend.plan(&PlanRequest {
            episode,
            prompt: &p.plan_prompt,
            frames: &plan_frames,
            attempt,
        })
    })
    .map_err(|f| call_failure(episode, "plan", f))?;
    let plan = parse_plan(&raw).map_err(|e| parse_failure(episode, "plan", e, raw.clone()))?;
    for w in &plan.warnings {
        log::warn!("{}: plan: {w}", episode.trajectory_id());
    }

    // The segmentation prompt needs the plan, so it is rendered here rather
    // than in the preprocessor.
    let seg_prompt = prompts::render_segmentation_prompt(&episode.instruction, &plan.steps);
    let seg_frames = pick(&p.segment_ids);
    let raw = call_with_retry(&config.retry, counters, |attempt| {
        backend.segment(&SegmentRequest {
            episode,
            prompt: &seg_prompt,
            plan: &plan.steps,
            frames: &seg_frames,
            attempt,
        })
    })
    .map_err(|f| call_failure(episode, "segment", f))?;
    let parsed =
        parse_segmentation(&raw).map_err(|e| parse_failure(episode, "segment", e, raw.clone()))?;
    for s in &parsed.subtasks {
        if !plan.steps.contains(&s.name) {
            log::warn!(
                "{}: subtask {} name `{}` not in plan",
                episode.trajectory_id(),
                s.id,
                s.name
            );
        }
    }
    let (segmentation, report) =
        validate_segmentation(&parsed, episode.num_frames, ValidationPolicy::AutoTrim).map_err(
            |e| {
                QuarantineEntry::new(
                    episode,
                    "segment",
                    "ValidationError",
                    e.to_string(),
                    Some(raw.clone()),
                )
            },
        )?;
    for r in &report.repairs {
        log::info!("{}: repaired {r:?}", episode.trajectory_id());
    }
    for w in &report.warnings {
        log::warn!("{}: {w}", episode.trajectory_id());
    }

    // Every valid span gets at least one reasoned frame.
    let mut keyframes = p.keyframes.clone();
    for s in segmentation.valid_segments() {
        let (a, b) = s.span().expect("valid");
        if !keyframes.iter().any(|&k| a <= k && k <= b) {
            keyframes.push(a);
        }
    }
    keyframes.sort_unstable();
    keyframes.dedup();

    let assignment = expand_segments_to_frames(&segmentation, episode.num_frames).map_err(|e| {
        QuarantineEntry::new(
            episode,
            "segment",
            "ValidationError",
            e.to_string(),
            Some(raw.clone()),
        )
    })?;
    let names: std::collections::BTreeMap<u32, &str> = segmentation
        .subtasks
        .iter()
        .map(|s| (s.id, s.name.as_str()))
        .collect();
    let mut keyframe_records = Vec::with_capacity(keyframes.len());
    for &t in &keyframes {
        let state = segmentation.completion_at(t);
        let remaining = segmentation.remaining_at(t);
        let prompt = prompts::render_reasoning_prompt(state, &episode.instruction, &remaining);
        let text = call_with_retry(&config.retry, counters, |attempt| {
            backend.reason(&ReasonRequest {
                episode,
                prompt: &prompt,
                frame: &p.frames[t],
                state,
                remaining: &remaining,
                attempt,
            })
        })
        .map_err(|f| call_failure(episode, "reason", f))?;
        let limit = prompts::reasoning_word_limit(state);
        if word_count(&text) > limit {
            log::warn!(
                "{}: frame {t} reasoning exceeds {limit} words",
                episode.trajectory_id()
            );
        }
        let subtask_id = assignment[t];
        keyframe_records.push(AnnotationRecord {
            episode: episode.clone(),
            frame_id: t,
            subtask_id,
            subtask_name: subtask_id.and_then(|id| names.get(&id).map(|s| s.to_string())),
            reasoning: text.trim().to_string(),
            reasoning_source: ReasoningSource::Keyframe,
            completion: state,
            remaining_subtasks: remaining,
            grounding_boxes: Vec::new(),
            progress: None,
            extra: Map::new(),
        });
    }
    Ok(Annotated {
        episode: p.episode,
        segmentation,
        keyframe_records,
    })
}

fn consume(a: Annotated) -> Item<Vec<AnnotationRecord>> {
    let assignment =
        expand_segments_to_frames(&a.segmentation, a.episode.num_frames).map_err(|e| {
            QuarantineEntry::new(
                &a.episode,
                "consume",
                "ValidationError",
                e.to_string(),
                None,
            )
        })?;
    let mut prop = propagate_keyframe_reasoning(
        &a.episode,
        &a.segmentation,
        &a.keyframe_records,
        &assignment,
    );
    for r in &mut prop.records {
        r.grounding_boxes.retain(|b| b.is_valid());
    }
    Ok(prop.records)
}

fn send_all<T>(tx: &Sender<T>, item: T) {
    // Receivers outlive senders inside the scope; a closed channel means a
    // downstream worker panicked, which the scope re-raises.
    let _ = tx.send(item);
}

/// Runs every episode through the four stages and returns the sorted
/// records, the quarantine list and a report. Blocks until done.
pub fn run_pipeline<I>(
    source: I,
    backend: &dyn AnnotatorBackend,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = EpisodeSpec>,
    I::IntoIter: Send,
{
    config.check()?;
    let started = Instant::now();
    let counters = Counters::default();
    let (read_tx, read_rx) = bounded::<Item<LoadedEpisode>>(config.queue_capacity);
    let (prep_tx, prep_rx) = bounded::<Item<Prepared>>(config.queue_capacity);
    let (ann_tx, ann_rx) = bounded::<Item<Annotated>>(config.queue_capacity);
    let source = source.into_iter();

    let (episodes_in, records, mut quarantine, keyframes) = thread::scope(|scope| {
        let counters = &counters;
        let reader = scope.spawn(move || {
            let mut n = 0usize;
            for spec in source {
                n += 1;
                let t0 = Instant::now();
                config.delays.read.apply(episode_key(&spec.episode));
                let item = load_episode(&spec).map_err(|msg| {
                    QuarantineEntry::new(&spec.episode, "read", "InvalidEpisode", msg, None)
                });
                counters.add_busy(0, t0);
                match read_tx.try_send(item) {
                    Ok(()) => {}
                    Err(TrySendError::Full(item)) => {
                        counters.reader_blocked.fetch_add(1, Ordering::Relaxed);
                        send_all(&read_tx, item);
                    }
                    Err(TrySendError::Disconnected(_)) => break,
                }
            }
            n
        });

        for _ in 0..config.preprocessor_workers {
            let (rx, tx): (Receiver<Item<LoadedEpisode>>, Sender<Item<Prepared>>) =
                (read_rx.clone(), prep_tx.clone());
            scope.spawn(move || {
                for item in rx {
                    let t0 = Instant::now();
                    let out = item.and_then(|loaded| {
                        config.delays.preprocess.apply(episode_key(&loaded.episode));
                        preprocess(loaded, config)
                    });
                    counters.add_busy(1, t0);
                    send_all(&tx, out);
                }
            });
        }
        drop(read_rx);
        drop(prep_tx);

        for _ in 0..config.annotator_concurrency {
            let (rx, tx) = (prep_rx.clone(), ann_tx.clone());
            scope.spawn(move || {
                for item in rx {
                    let t0 = Instant::now();
                    let out = item.and_then(|p| {
                        config.delays.annotate.apply(episode_key(&p.episode));
                        annotate(p, backend, config, counters)
                    });
                    counters.add_busy(2, t0);
                    send_all(&tx, out);
                }
            });
        }
        drop(prep_rx);
        drop(ann_tx);

        let mut records = Vec::new();
        let mut quarantine = Vec::new();
        let mut keyframes = 0usize;
        for item in ann_rx {
            let t0 = Instant::now();
            match item {
                Ok(a) => {
                    config.delays.consume.apply(episode_key(&a.episode));
                    keyframes += a.keyframe_records.len();
                    match consume(a) {
                        Ok(recs) => records.push(recs),
                        Err(q) => quarantine.push(q),
                    }
                }
                Err(q) => quarantine.push(q),
            }
            counters.add_busy(3, t0);
        }
        let n = reader.join().expect("reader thread panicked");
        (n, records, quarantine, keyframes)
    });

    let episodes_out = records.len();
    let mut records: Vec<AnnotationRecord> = records.into_iter().flatten().collect();
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    quarantine.sort_by_key(QuarantineEntry::trajectory_id);
    for q in &quarantine {
        log::warn!(
            "quarantined {} at {}: {}",
            q.trajectory_id(),
            q.stage,
            q.message
        );
    }
    assert_eq!(
        episodes_out + quarantine.len(),
        episodes_in,
        "pipeline lost or duplicated episodes"
    );

    let wall_time = started.elapsed().as_secs_f64();
    let report = PipelineReport {
        episodes_in,
        episodes_out,
        quarantined: quarantine.len(),
        frames_out: records.len(),
        keyframes,
        backend_calls: counters.calls.load(Ordering::Relaxed),
        retries: counters.retries.load(Ordering::Relaxed),
        reader_blocked: counters.reader_blocked.load(Ordering::Relaxed),
        per_stage_busy_time: StageBusy {
            read: counters.busy_secs(0),
            preprocess: counters.busy_secs(1),
            annotate: counters.busy_secs(2),
            consume: counters.busy_secs(3),
        },
        wall_time,
        throughput: if wall_time > 0.0 {
            records.len() as f64 / wall_time
        } else {
            0.0
        },
    };
    Ok(PipelineOutput {
        records,
        quarantine,
        report,
    })
}
