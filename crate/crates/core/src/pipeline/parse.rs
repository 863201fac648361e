//! Parsing of plan and segmentation responses.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use crate::annotation::{SegmentationResult, SubtaskSegment};

/// Leading verbs accepted by the plan template.
pub const PLAN_VERBS: [&str; 9] = [
    "Grasp", "Place", "Push", "Tilt", "Hang", "Press", "Open", "Close", "Rotate",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("parse error: {0}")]
    Malformed(String),
    #[error("schema violation on `{field}`: {message}")]
    SchemaViolation { field: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    pub steps: Vec<String>,
    pub warnings: Vec<String>,
}

fn list_item() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*$").expect("valid regex"))
}

/// Parses a numbered-list plan. Prose before or after the list is dropped
/// with a warning; duplicate indices and empty items are errors.
pub fn parse_plan(text: &str) -> Result<TaskPlan, ParseError> {
    let mut steps = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut expected = 1u64;
    let mut in_list = false;
    let mut ended = false;
    let mut dropped_before = 0;
    let mut dropped_after = 0;

    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("```") {
            continue;
        }
        let item = if ended {
            None
        } else {
            list_item().captures(line)
        };
        match item {
            Some(caps) => {
                in_list = true;
                let index: u64 = caps[1]
                    .parse()
                    .map_err(|_| ParseError::Malformed(format!("bad index in `{trimmed}`")))?;
                if !seen.insert(index) {
                    return Err(ParseError::Malformed(format!("duplicate index {index}")));
                }
                if index != expected {
                    warnings.push(format!(
                        "index {index} out of sequence (expected {expected})"
                    ));
                }
                expected = index + 1;
                let step = caps[2].to_string();
                if step.is_empty() {
                    return Err(ParseError::Malformed(format!(
                        "item {index} has no description"
                    )));
                }
                let verb = step.split_whitespace().next().unwrap_or("");
                if !PLAN_VERBS.contains(&verb) {
                    warnings.push(format!(
                        "item {index} does not start with a known action verb: `{step}`"
                    ));
                }
                steps.push(step);
            }
            None if in_list => {
                ended = true;
                dropped_after += 1;
            }
            None => dropped_before += 1,
        }
    }
    if steps.is_empty() {
        return Err(ParseError::Malformed("no numbered items".into()));
    }
    if dropped_before > 0 {
        warnings.push(format!(
            "discarded {dropped_before} line(s) before the list"
        ));
    }
    if dropped_after > 0 {
        warnings.push(format!("discarded {dropped_after} line(s) after the list"));
    }
    Ok(TaskPlan { steps, warnings })
}

/// Outermost `{ ... }` of `text`, ignoring any code fence around it.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> ParseError {
    ParseError::SchemaViolation {
        field: field.into(),
        message: message.into(),
    }
}

fn frame_field(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    at: &str,
) -> Result<Option<i64>, ParseError> {
    match obj.get(key) {
        None => Err(violation(format!("{at}.{key}"), "missing")),
        Some(Value::Null) => Ok(None),
        Some(v) => v.as_i64().map(Some).ok_or_else(|| {
            violation(
                format!("{at}.{key}"),
                format!("expected integer or null, got {v}"),
            )
        }),
    }
}

/// Parses the segmentation JSON payload. Boundaries are not validated here.
pub fn parse_segmentation(text: &str) -> Result<SegmentationResult, ParseError> {
    let body = extract_json_object(text)
        .ok_or_else(|| ParseError::Malformed("no JSON object found".into()))?;
    let value: Value = serde_json::from_str(body)
        .map_err(|e| ParseError::Malformed(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ParseError::Malformed("payload is not an object".into()))?;
    let task = obj
        .get("task")
        .and_then(Value::as_str)
        .ok_or_else(|| violation("task", "missing or not a string"))?
        .to_string();
    let items = obj
        .get("subtasks")
        .and_then(Value::as_array)
        .ok_or_else(|| violation("subtasks", "missing or not a list"))?;
    let mut subtasks = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let at = format!("subtasks[{i}]");
        let o = item
            .as_object()
            .ok_or_else(|| violation(&at, "not an object"))?;
        let id = o
            .get("id")
            .and_then(Value::as_u64)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| {
                violation(format!("{at}.id"), "missing or not a non-negative integer")
            })?;
        let name = o
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| violation(format!("{at}.name"), "missing or not a string"))?;
        let notes = match o.get("notes") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => {
                return Err(violation(
                    format!("{at}.notes"),
                    format!("expected string, got {v}"),
                ))
            }
        };
        let mut seg = SubtaskSegment::new(
            id,
            name,
            frame_field(o, "start_frame", &at)?,
            frame_field(o, "complete_frame", &at)?,
        );
        seg.notes = notes;
        subtasks.push(seg);
    }
    let overall_notes = match obj.get("overall_notes") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(v) => {
            return Err(violation(
                "overall_notes",
                format!("expected string, got {v}"),
            ))
        }
    };
    Ok(SegmentationResult {
        task,
        subtasks,
        overall_notes,
    })
}
