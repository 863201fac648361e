//! One-shot adaptation splits and horizon-based advantage labels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("task `{0}` has no successful trajectory")]
    MissingSuccess(String),
    #[error("task `{0}` has no trajectory with failure type `{1}`")]
    MissingFailureType(String, String),
    #[error("trajectory `{0}`: failure_type must be set iff outcome is failure")]
    InconsistentTag(String),
    #[error("duplicate trajectory id `{0}`")]
    DuplicateId(String),
    #[error("task `{0}` has no samples")]
    EmptyTask(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tag file: {0}")]
    Parse(String),
}

pub type Result<T, E = SplitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryTag {
    pub trajectory_id: String,
    pub task: String,
    pub outcome: Outcome,
    pub failure_type: Option<String>,
}

impl TrajectoryTag {
    pub fn check(&self) -> Result<()> {
        let has_type = self.failure_type.as_deref().is_some_and(|s| !s.is_empty());
        if has_type != (self.outcome == Outcome::Failure) {
            return Err(SplitError::InconsistentTag(self.trajectory_id.clone()));
        }
        Ok(())
    }
}

/// Reads `trajectory_id,task,outcome,failure_type` rows (header required).
pub fn read_tags_csv<R: Read>(input: R) -> Result<Vec<TrajectoryTag>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize::<(String, String, Outcome, Option<String>)>() {
        let (trajectory_id, task, outcome, failure_type) =
            row.map_err(|e| SplitError::Parse(e.to_string()))?;
        let tag = TrajectoryTag {
            trajectory_id,
            task,
            outcome,
            failure_type: failure_type.filter(|s| !s.is_empty()),
        };
        tag.check()?;
        out.push(tag);
    }
    Ok(out)
}

pub fn write_tags_csv<W: std::io::Write>(out: W, tags: &[TrajectoryTag]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trajectory_id", "task", "outcome", "failure_type"])
        .map_err(|e| SplitError::Parse(e.to_string()))?;
    for t in tags {
        let outcome = match t.outcome {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
        };
        w.write_record([
            t.trajectory_id.as_str(),
            t.task.as_str(),
            outcome,
            t.failure_type.as_deref().unwrap_or(""),
        ])
        .map_err(|e| SplitError::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| SplitError::Parse(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// One success per task.
    Succ,
    /// One success per task plus one trajectory per task and failure type.
    SuccFail,
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "succ" => Ok(SplitMode::Succ),
            "succ_fail" | "succ-fail" => Ok(SplitMode::SuccFail),
            other => Err(format!("unknown split mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Builds a one-shot train set; everything else is test. Both id lists are
/// sorted. `required_failure_types` lists types every task must cover in
/// `SuccFail` mode beyond those observed in the data.
pub fn build_oneshot_splits(
    tags: &[TrajectoryTag],
    mode: SplitMode,
    seed: u64,
    required_failure_types: &[String],
) -> Result<Split> {
    let mut seen = BTreeSet::new();
    // task -> (successes, failure type -> ids)
    let mut by_task: BTreeMap<&str, (Vec<&str>, BTreeMap<&str, Vec<&str>>)> = BTreeMap::new();
    for t in tags {
        t.check()?;
        if !seen.insert(t.trajectory_id.as_str()) {
            return Err(SplitError::DuplicateId(t.trajectory_id.clone()));
        }
        let entry = by_task.entry(t.task.as_str()).or_default();
        match t.outcome {
            Outcome::Success => entry.0.push(&t.trajectory_id),
            Outcome::Failure => entry
                .1
                .entry(t.failure_type.as_deref().expect("checked"))
                .or_default()
                .push(&t.trajectory_id),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeSet::new();
    for (task, (successes, failures)) in &mut by_task {
        successes.sort_unstable();
        let pick = successes
            .choose(&mut rng)
            .ok_or_else(|| SplitError::MissingSuccess(task.to_string()))?;
        train.insert(pick.to_string());
        if mode == SplitMode::SuccFail {
            for ty in required_failure_types {
                if !failures.contains_key(ty.as_str()) {
                    return Err(SplitError::MissingFailureType(task.to_string(), ty.clone()));
                }
            }
            for (ty, ids) in failures.iter_mut() {
                ids.sort_unstable();
                let pick = ids.choose(&mut rng).ok_or_else(|| {
                    SplitError::MissingFailureType(task.to_string(), ty.to_string())
                })?;
                train.insert(pick.to_string());
            }
        }
    }
    let test = seen
        .iter()
        .filter(|id| !train.contains(**id))
        .map(|s| s.to_string())
        .collect();
    Ok(Split {
        train: train.into_iter().collect(),
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub horizon: usize,
    pub top_fraction: f64,
    pub cut: AdvantageCut,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            top_fraction: 0.3,
            cut: AdvantageCut::PerSample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageCut {
    /// Rank every (trajectory, step) sample within the task.
    PerSample,
    /// Rank trajectories by mean advantage; all steps inherit the label.
    PerTrajectory,
}

/// Reward-model progress for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub trajectory_id: String,
    pub task: String,
    pub progress: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageLabel {
    pub trajectory_id: String,
    pub t: usize,
    pub advantage: f64,
    pub label: AdvantageClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageClass {
    Positive,
    Negative,
}

/// `p(min(t + H, T - 1)) - p(t)`.
pub fn forward_advantages(progress: &[f64], horizon: usize) -> Vec<f64> {
    let last = progress.len().saturating_sub(1);
    (0..progress.len())
        .map(|t| progress[(t + horizon).min(last)] - progress[t])
        .collect()
}

/// `ceil(fraction * n)`, robust to `fraction * n` landing a hair above an
/// integer in floating point.
pub fn positive_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    let count = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (count as usize).min(n)
}

/// Labels the top `top_fraction` of samples (by advantage) within each task
/// as positive; ties at the cut go to the earlier `(trajectory_id, t)`.
/// Output is ordered by `(task, trajectory_id, t)`.
pub fn rft_advantage_labels(
    trajectories: &[ScoredTrajectory],
    config: &AdvantageConfig,
) -> Result<Vec<AdvantageLabel>> {
    if config.horizon == 0 || !(config.top_fraction > 0.0 && config.top_fraction <= 1.0) {
        return Err(SplitError::Config(format!(
            "need horizon >= 1 and 0 < top_fraction <= 1, got {} and {}",
            config.horizon, config.top_fraction
        )));
    }
    let mut by_task: BTreeMap<&str, Vec<&ScoredTrajectory>> = BTreeMap::new();
    for tr in trajectories {
        by_task.entry(tr.task.as_str()).or_default().push(tr);
    }
    let mut out = Vec::new();
    for (task, mut trajs) in by_task {
        trajs.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
        let mut samples: Vec<AdvantageLabel> = Vec::new();
        for tr in &trajs {
            for (t, advantage) in forward_advantages(&tr.progress, config.horizon)
                .into_iter()
                .enumerate()
            {
                samples.push(AdvantageLabel {
                    trajectory_id: tr.trajectory_id.clone(),
                    t,
                    advantage,
                    label: AdvantageClass::Negative,
                });
            }
        }
        if samples.is_empty() {
            return Err(SplitError::EmptyTask(task.to_string()));
        }
        match config.cut {
            AdvantageCut::PerSample => {
                let mut order: Vec<usize> = (0..samples.len()).collect();
                order.sort_by(|&a, &b| {
                    let (x, y) = (&samples[a], &samples[b]);
                    y.advantage
                        .total_cmp(&x.advantage)
                        .then_with(|| x.trajectory_id.cmp(&y.trajectory_id))
                        .then(x.t.cmp(&y.t))
                });
                for &i in order
                    .iter()
                    .take(positive_count(config.top_fraction, samples.len()))
                {
                    samples[i].label = AdvantageClass::Positive;
                }
            }
            AdvantageCut::PerTrajectory => {
                let mut means: Vec<(&str, f64)> = trajs
                    .iter()
                    .filter(|tr| !tr.progress.is_empty())
                    .map(|tr| {
                        let adv = forward_advantages(&tr.progress, config.horizon);
                        (
                            tr.trajectory_id.as_str(),
                            adv.iter().sum::<f64>() / adv.len() as f64,
                        )
                    })
                    .collect();
                means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
                let winners: BTreeSet<&str> = means
                    .iter()
                    .take(positive_count(config.top_fraction, means.len()))
                    .map(|m| m.0)
                    .collect();
                for s in &mut samples {
                    if winners.contains(s.trajectory_id.as_str()) {
                        s.label = AdvantageClass::Positive;
                    }
                }
            }
        }
        out.extend(samples);
    }
    Ok(out)
}
