//! Line-oriented files exchanged between subcommands: segment lists,
//! per-frame progress values and failure cutoffs.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationRecord, SegmentationResult, SubtaskSegment};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("trajectory `{0}`: {1}")]
    Trajectory(String, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// One action segment, in the same keys as segmentation VQA targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub action_description: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Segment list of one trajectory; one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySegments {
    pub trajectory_id: String,
    pub num_frames: usize,
    pub segments: Vec<SegmentEntry>,
}

impl TrajectorySegments {
    /// Valid segments of `seg`, ordered by start frame.
    pub fn from_segmentation(
        trajectory_id: impl Into<String>,
        num_frames: usize,
        seg: &SegmentationResult,
    ) -> Self {
        let mut valid: Vec<&SubtaskSegment> = seg.valid_segments().collect();
        valid.sort_by_key(|s| s.start_frame);
        Self {
            trajectory_id: trajectory_id.into(),
            num_frames,
            segments: valid
                .iter()
                .map(|s| {
                    let (a, b) = s.span().expect("valid");
                    SegmentEntry {
                        action_description: s.name.clone(),
                        start_frame: a,
                        end_frame: b,
                    }
                })
                .collect(),
        }
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .map(|s| (s.start_frame, s.end_frame))
            .collect()
    }
}

fn parse_lines<T, R>(input: R) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FormatError::Line {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_lines<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_segments_jsonl<R: BufRead>(input: R) -> Result<Vec<TrajectorySegments>> {
    parse_lines(input)
}

pub fn write_segments_jsonl<W: Write>(out: W, items: &[TrajectorySegments]) -> Result<()> {
    write_lines(out, items)
}

/// `{trajectory_id, frame_id, progress}` per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub trajectory_id: String,
    pub frame_id: usize,
    pub progress: f64,
}

/// Groups points per trajectory into dense series; every frame from 0 to
/// the largest id must be present exactly once.
pub fn collect_series(points: &[ProgressPoint]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut by_traj: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for p in points {
        if by_traj
            .entry(p.trajectory_id.clone())
            .or_default()
            .insert(p.frame_id, p.progress)
            .is_some()
        {
            return Err(FormatError::Trajectory(
                p.trajectory_id.clone(),
                format!("frame {} repeated", p.frame_id),
            ));
        }
    }
    let mut out = BTreeMap::new();
    for (id, frames) in by_traj {
        let n = frames.len();
        if frames.keys().next_back().copied() != Some(n - 1) {
            return Err(FormatError::Trajectory(
                id,
                "frame ids are not contiguous from 0".into(),
            ));
        }
        out.insert(id, frames.into_values().collect());
    }
    Ok(out)
}

/// Reads either progress points or annotation records (using their
/// `progress` field) into dense per-trajectory series. Annotation records
/// without a label are skipped.
pub fn read_progress_series<R: BufRead>(input: R) -> Result<BTreeMap<String, Vec<f64>>> {
    let values: Vec<serde_json::Value> = parse_lines(input)?;
    let mut points = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        let line = i + 1;
        let point = if v.get("dataset_name").is_some() {
            let rec: AnnotationRecord =
                crate::annotation::record_from_value(v, line).map_err(|e| FormatError::Line {
                    line,
                    message: e.to_string(),
                })?;
            let Some(progress) = rec.progress else {
                continue;
            };
            ProgressPoint {
                trajectory_id: rec.trajectory_id(),
                frame_id: rec.frame_id,
                progress,
            }
        } else {
            serde_json::from_value(v).map_err(|e| FormatError::Line {
                line,
                message: e.to_string(),
            })?
        };
        points.push(point);
    }
    collect_series(&points)
}

pub fn write_progress_jsonl<W: Write>(out: W, series: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let points: Vec<ProgressPoint> = series
        .iter()
        .flat_map(|(id, values)| {
            values.iter().enumerate().map(|(t, &p)| ProgressPoint {
                trajectory_id: id.clone(),
                frame_id: t,
                progress: p,
            })
        })
        .collect();
    write_lines(out, &points)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CutoffRow {
    trajectory_id: String,
    t_cut: usize,
}

/// `trajectory_id,t_cut` with a header row.
pub fn read_cutoffs_csv<R: Read>(input: R) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: CutoffRow = row?;
        out.insert(row.trajectory_id, row.t_cut);
    }
    Ok(out)
}

pub fn write_cutoffs_csv<W: Write>(out: W, cutoffs: &BTreeMap<String, usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, &t_cut) in cutoffs {
        w.serialize(CutoffRow {
            trajectory_id: id.clone(),
            t_cut,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_round_trip() {
        let item = TrajectorySegments {
            trajectory_id: "a/b/c".into(),
            num_frames: 10,
            segments: vec![SegmentEntry {
                action_description: "Grasp the cup".into(),
                start_frame: 0,
                end_frame: 4,
            }],
        };
        let mut buf = Vec::new();
        write_segments_jsonl(&mut buf, std::slice::from_ref(&item)).unwrap();
        assert_eq!(read_segments_jsonl(buf.as_slice()).unwrap(), vec![item]);
    }

    #[test]
    fn progress_round_trip_and_gaps() {
        let mut series = BTreeMap::new();
        series.insert("x".to_string(), vec![0.0, 0.5, 1.0]);
        let mut buf = Vec::new();
        write_progress_jsonl(&mut buf, &series).unwrap();
        assert_eq!(read_progress_series(buf.as_slice()).unwrap(), series);
        let gap = "{\"trajectory_id\":\"x\",\"frame_id\":0,\"progress\":0}\n{\"trajectory_id\":\"x\",\"frame_id\":2,\"progress\":1}\n";
        assert!(read_progress_series(gap.as_bytes()).is_err());
    }

    #[test]
    fn cutoffs_round_trip() {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), 12);
        let mut buf = Vec::new();
        write_cutoffs_csv(&mut buf, &c).unwrap();
        assert!(buf.starts_with(b"trajectory_id,t_cut\n"));
        assert_eq!(read_cutoffs_csv(buf.as_slice()).unwrap(), c);
    }
}
