#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use procprog::annotation::{
    expand_segments_to_frames, propagate_keyframe_reasoning, write_jsonl, AnnotationRecord,
    EpisodeRef, SegmentationResult, SubtaskSegment,
};

pub fn procprog(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_procprog"))
        .args(args)
        .arg("--log-level")
        .arg("warn")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// Last stderr line parsed as the error JSON.
pub fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON on stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

pub fn episode(id: &str, num_frames: usize) -> EpisodeRef {
    EpisodeRef {
        dataset_name: "fix".into(),
        episode_id: id.into(),
        camera_key: "front".into(),
        num_frames,
        instruction: "Pick up the cup, then place the cup".into(),
    }
}

/// Dense records for `spans` (valid subtasks) plus `absent` planned names.
pub fn records(
    ep: &EpisodeRef,
    spans: &[(usize, usize)],
    absent: &[&str],
) -> Vec<AnnotationRecord> {
    let mut subtasks: Vec<SubtaskSegment> = spans
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            SubtaskSegment::new(
                i as u32 + 1,
                format!("Step {}", i + 1),
                Some(a as i64),
                Some(b as i64),
            )
        })
        .collect();
    for (j, name) in absent.iter().enumerate() {
        subtasks.push(SubtaskSegment::new(
            (spans.len() + j) as u32 + 1,
            *name,
            None,
            None,
        ));
    }
    let seg = SegmentationResult {
        task: ep.instruction.clone(),
        subtasks,
        overall_notes: String::new(),
    };
    let assignment = expand_segments_to_frames(&seg, ep.num_frames).unwrap();
    propagate_keyframe_reasoning(ep, &seg, &[], &assignment).records
}

pub fn write_records(path: &Path, recs: &[AnnotationRecord]) {
    let mut f = std::fs::File::create(path).unwrap();
    write_jsonl(&mut f, recs).unwrap();
}

pub fn write_points(path: &Path, series: &[(&str, Vec<f64>)]) {
    let mut text = String::new();
    for (id, values) in series {
        for (t, v) in values.iter().enumerate() {
            text +=
                &serde_json::json!({"trajectory_id": id, "frame_id": t, "progress": v}).to_string();
            text.push('\n');
        }
    }
    std::fs::write(path, text).unwrap();
}
