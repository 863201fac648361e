//! Procedure-defined progress targets.
//!
//! Each valid subtask gets a duration-proportional budget clipped around the
//! equal-subtask prior; inside a subtask the budget is spread over the steps
//! in proportion to the per-step visual change (plus a stabilizer).
//!
//! Discretization: step `t` (between frames `t-1` and `t`) belongs to
//! segment `k` iff `s_k < t <= e_k`; every other step is a gap step and adds
//! nothing. Durations are counted in frames, `e_k - s_k + 1`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{SegmentationResult, SubtaskSegment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgressError {
    #[error("feature rows have inconsistent dimension: row {row} has {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("no valid subtasks")]
    NoValidSubtasks,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("subtask {0} spans a single frame and has no steps to carry its budget")]
    EmptySegment(u32),
    #[error("subtask {0} has zero visual change and epsilon = 0")]
    DegenerateSegmentSignal(u32),
    #[error("trajectory of length {0} is too short")]
    DegenerateLength(usize),
    #[error("segments overlap or are unsorted; validate first")]
    UnvalidatedInput,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T, E = ProgressError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMetric {
    L1,
    #[default]
    L2,
}

impl std::str::FromStr for DiffMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l1" => Ok(DiffMetric::L1),
            "l2" => Ok(DiffMetric::L2),
            other => Err(format!("unknown diff metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Added to every in-segment step magnitude.
    pub epsilon: f64,
    pub diff_metric: DiffMetric,
}

impl Default for ProgressConfig {
    fn default() -> Self {
        Self {
            clip_lo: 0.75,
            clip_hi: 1.25,
            epsilon: 1e-6,
            diff_metric: DiffMetric::L2,
        }
    }
}

impl ProgressConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.clip_lo > 0.0 && self.clip_lo <= self.clip_hi) {
            return Err(ProgressError::Config(format!(
                "need 0 < clip_lo <= clip_hi, got ({}, {})",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(ProgressError::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-frame features or precomputed per-step change magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualSignal {
    Features(Vec<Vec<f64>>),
    Magnitudes(Vec<f64>),
}

impl VisualSignal {
    pub fn num_frames(&self) -> usize {
        match self {
            VisualSignal::Features(rows) => rows.len(),
            VisualSignal::Magnitudes(d) => d.len() + 1,
        }
    }
}

/// Per-step change magnitudes `d_t = ||phi_t - phi_{t-1}||`, `t = 1..T-1`.
pub fn frame_diffs(signal: &VisualSignal, metric: DiffMetric) -> Result<Vec<f64>> {
    match signal {
        VisualSignal::Magnitudes(d) => {
            if let Some(bad) = d.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(ProgressError::InvalidSignal(format!(
                    "magnitude {bad} is not finite and non-negative"
                )));
            }
            Ok(d.clone())
        }
        VisualSignal::Features(rows) => {
            let Some(first) = rows.first() else {
                return Err(ProgressError::DegenerateLength(0));
            };
            let dim = first.len();
            if dim == 0 {
                return Err(ProgressError::DimensionMismatch {
                    row: 0,
                    expected: 1,
                    got: 0,
                });
            }
            if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
                return Err(ProgressError::DimensionMismatch {
                    row,
                    expected: dim,
                    got: r.len(),
                });
            }
            Ok(rows
                .windows(2)
                .map(|w| {
                    let pairs = w[1].iter().zip(&w[0]);
                    match metric {
                        DiffMetric::L1 => pairs.map(|(a, b)| (a - b).abs()).sum(),
                        DiffMetric::L2 => pairs.map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    }
                })
                .collect())
        }
    }
}

fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Valid spans of `segments` as `(id, start, end)`, checked sorted and disjoint.
fn valid_spans(segments: &[SubtaskSegment], num_frames: usize) -> Result<Vec<(u32, usize, usize)>> {
    let mut spans: Vec<(u32, usize, usize)> = segments
        .iter()
        .filter_map(|s| s.span().map(|(a, b)| (s.id, a, b)))
        .collect();
    spans.sort_by_key(|&(id, a, _)| (a, id));
    for w in spans.windows(2) {
        if w[1].1 <= w[0].2 {
            return Err(ProgressError::UnvalidatedInput);
        }
    }
    if let Some(&(id, _, b)) = spans.iter().find(|&&(_, _, b)| b >= num_frames) {
        return Err(ProgressError::LengthMismatch(format!(
            "subtask {id} ends at frame {b} but the trajectory has {num_frames} frames"
        )));
    }
    Ok(spans)
}

/// Budget `w_k = clip(K * dur_k / T, clip_lo, clip_hi)` for every valid segment.
pub fn subtask_weights(
    segments: &[SubtaskSegment],
    num_frames: usize,
    config: &ProgressConfig,
) -> Result<BTreeMap<u32, f64>> {
    config.check()?;
    let spans = valid_spans(segments, num_frames)?;
    if spans.is_empty() {
        return Err(ProgressError::NoValidSubtasks);
    }
    let k = spans.len() as f64;
    let t = num_frames as f64;
    Ok(spans
        .iter()
        .map(|&(id, a, b)| {
            let dur = (b - a + 1) as f64;
            (id, clip(k * dur / t, config.clip_lo, config.clip_hi))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressLabels {
    pub values: Vec<f64>,
    /// Every planned subtask has both boundaries.
    pub completed: bool,
    pub config: ProgressConfig,
    pub per_subtask_budget: BTreeMap<u32, f64>,
}

/// Planned subtasks without both boundaries each add this weight to the
/// denominator, so unfinished trajectories never reach 1.
pub const UNFINISHED_SUBTASK_WEIGHT: f64 = 1.0;

/// Per-frame progress labels for one trajectory of `diffs.len() + 1` frames.
pub fn progress_labels(
    segmentation: &SegmentationResult,
    diffs: &[f64],
    config: &ProgressConfig,
) -> Result<ProgressLabels> {
    config.check()?;
    let num_frames = diffs.len() + 1;
    if let Some(bad) = diffs.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(ProgressError::InvalidSignal(format!(
            "magnitude {bad} is not finite and non-negative"
        )));
    }
    let spans = valid_spans(&segmentation.subtasks, num_frames)?;
    let weights = subtask_weights(&segmentation.subtasks, num_frames, config)?;
    let outstanding = segmentation
        .subtasks
        .iter()
        .filter(|s| !s.is_valid())
        .count();

    let mut increments = vec![0.0; num_frames];
    for &(id, a, b) in &spans {
        if a == b {
            return Err(ProgressError::EmptySegment(id));
        }
        // steps a+1..=b use diffs[a..b]
        let steps = &diffs[a..b];
        let mass: f64 = steps.iter().map(|d| d + config.epsilon).sum();
        if mass <= 0.0 {
            return Err(ProgressError::DegenerateSegmentSignal(id));
        }
        let w = weights[&id];
        for (t, d) in (a + 1..=b).zip(steps) {
            increments[t] = w * (d + config.epsilon) / mass;
        }
    }

    let total = weights.values().sum::<f64>() + outstanding as f64 * UNFINISHED_SUBTASK_WEIGHT;
    let mut values = Vec::with_capacity(num_frames);
    let mut acc = 0.0;
    for inc in &increments {
        acc += inc;
        values.push(acc / total);
    }
    let completed = outstanding == 0;
    if completed {
        // Prefix sums may overshoot 1 by rounding; clamping keeps the
        // sequence monotone and the end exact.
        debug_assert!((values[num_frames - 1] - 1.0).abs() < 1e-9);
        for v in &mut values {
            *v = v.min(1.0);
        }
    }
    Ok(ProgressLabels {
        values,
        completed,
        config: config.clone(),
        per_subtask_budget: weights,
    })
}

/// `values[t] = t / (T - 1)`: the elapsed-time baseline.
pub fn time_interp_baseline(num_frames: usize) -> Result<ProgressLabels> {
    if num_frames < 2 {
        return Err(ProgressError::DegenerateLength(num_frames));
    }
    let denom = (num_frames - 1) as f64;
    Ok(ProgressLabels {
        values: (0..num_frames).map(|t| t as f64 / denom).collect(),
        completed: true,
        config: ProgressConfig::default(),
        per_subtask_budget: BTreeMap::new(),
    })
}

/// Magic prefix of the binary feature-matrix format.
pub const FEATURE_MAGIC: &[u8; 8] = b"PRGFEAT1";

/// Writes `T x d` features: magic, `T` and `d` as little-endian u64, then
/// row-major little-endian f32 values.
pub fn write_features<W: Write>(mut out: W, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    let io = |e: std::io::Error| ProgressError::Io(e.to_string());
    out.write_all(FEATURE_MAGIC).map_err(io)?;
    out.write_all(&(rows.len() as u64).to_le_bytes())
        .map_err(io)?;
    out.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
    for (row, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(ProgressError::DimensionMismatch {
                row,
                expected: dim,
                got: r.len(),
            });
        }
        for v in r {
            out.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_features<R: Read>(mut input: R) -> Result<Vec<Vec<f64>>> {
    let io = |e: std::io::Error| ProgressError::Io(e.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != FEATURE_MAGIC {
        return Err(ProgressError::InvalidSignal(
            "bad feature-file magic".into(),
        ));
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word).map_err(io)?;
    let rows = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word).map_err(io)?;
    let dim = u64::from_le_bytes(word) as usize;
    let mut buf = vec![0u8; rows * dim * 4];
    input.read_exact(&mut buf).map_err(io)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(if dim == 0 {
        vec![Vec::new(); rows]
    } else {
        values.chunks(dim).map(<[f64]>::to_vec).collect()
    })
}

pub fn load_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path)
        .map_err(|e| ProgressError::Io(format!("{}: {e}", path.display())))?;
    read_features(std::io::BufReader::new(file))
}

/// Reads a one-column CSV of magnitudes; a non-numeric first line is a header.
pub fn read_magnitudes_csv<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ProgressError::Io(e.to_string()))?;
        let Some(field) = rec.get(0) else { continue };
        match field.trim().parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(ProgressError::InvalidSignal(format!(
                    "row {}: `{field}` is not a number",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Side length of the default pixel feature grid.
pub const PIXEL_FEATURE_SIDE: u32 = 16;

/// Default pixel features: the image downscaled to a small grayscale grid,
/// intensities in [0, 1].
pub fn pixel_features(image_bytes: &[u8]) -> Result<Vec<f64>> {
    let img = image::load_from_memory(image_bytes)
        .map_err(|e| ProgressError::InvalidSignal(format!("image decode: {e}")))?;
    let small = img
        .resize_exact(
            PIXEL_FEATURE_SIDE,
            PIXEL_FEATURE_SIDE,
            image::imageops::FilterType::Triangle,
        )
        .to_luma8();
    Ok(small.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
}
