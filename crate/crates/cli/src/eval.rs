use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde_json::{json, Map, Value};

use procprog::formats::{
    read_cutoffs_csv, read_progress_series, read_segments_jsonl, TrajectorySegments,
};
use procprog::metrics::{
    bf1, epr, kendall_tau, mae_fail, mcc, mmae, progress_mae, success_labels, voc, BoundarySet,
    EprConfig, MetricError, ProgressSeries, BOUNDARY_TOLERANCE,
};
use procprog::splits::{read_tags_csv, Outcome};

use crate::util::{fatal, open, print_json, split_list, write_json, SCHEMA_VERSION};

const METRICS: [&str; 8] = ["voc", "kt", "epr", "mcc", "mae", "mae_fail", "bf1", "mmae"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Reference {
    /// Ground-truth progress labels from --gt.
    Labels,
    /// Frame order.
    Order,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Predicted progress: point JSONL or labeled annotation JSONL.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth progress in the same formats.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Comma-separated metrics: voc, kt, epr, mcc, mae, mae_fail, bf1, mmae.
    #[arg(long, default_value = "voc,kt,epr,mcc,mae")]
    metrics: String,
    /// Reference series for voc and kt.
    #[arg(long, value_enum, default_value = "labels")]
    reference: Reference,
    /// EPR occupancy threshold.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 4096)]
    k_max: usize,
    /// Success threshold on final-frame progress for mcc.
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// Tags CSV; when given, mcc ground truth comes from trajectory outcomes.
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Failure cutoffs CSV for mae_fail.
    #[arg(long)]
    cutoffs: Option<PathBuf>,
    /// Predicted segments JSONL for bf1 and mmae.
    #[arg(long)]
    pred_segments: Option<PathBuf>,
    /// Ground-truth segments JSONL for bf1 and mmae.
    #[arg(long)]
    gt_segments: Option<PathBuf>,
    /// Boundary tolerance as a fraction of sequence length.
    #[arg(long, default_value_t = BOUNDARY_TOLERANCE)]
    tol: f64,
    /// Count the sequence start and end as boundaries.
    #[arg(long)]
    include_endpoints: bool,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn need<'a>(path: &'a Option<PathBuf>, flag: &str, metric: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| fatal("UsageError", format!("metric `{metric}` needs {flag}")))
}

fn load_series(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    read_progress_series(open(path)?)
        .map_err(|e| fatal("ParseError", format!("{}: {e}", path.display())))
}

fn load_segments(path: &Path) -> Result<BTreeMap<String, TrajectorySegments>> {
    let items = read_segments_jsonl(open(path)?)
        .map_err(|e| fatal("ParseError", format!("{}: {e}", path.display())))?;
    Ok(items
        .into_iter()
        .map(|s| (s.trajectory_id.clone(), s))
        .collect())
}

fn check_alignment<A, B>(
    what: &str,
    left: &BTreeMap<String, A>,
    right: &BTreeMap<String, B>,
) -> Result<()> {
    let only_left: Vec<&String> = left.keys().filter(|k| !right.contains_key(*k)).collect();
    let only_right: Vec<&String> = right.keys().filter(|k| !left.contains_key(*k)).collect();
    if only_left.is_empty() && only_right.is_empty() {
        return Ok(());
    }
    Err(fatal(
        "AlignmentError",
        format!(
            "{what}: ids only in predictions: {only_left:?}; ids only in reference: {only_right:?}"
        ),
    ))
}

fn metric_err(id: &str, e: MetricError) -> anyhow::Error {
    fatal("MetricError", format!("{id}: {e}"))
}

/// Mean of a per-trajectory correlation, skipping degenerate trajectories.
fn correlation(
    series: &[ProgressSeries],
    f: fn(&ProgressSeries) -> procprog::metrics::Result<f64>,
) -> Result<Value> {
    let mut per = Map::new();
    let mut skipped = Vec::new();
    for s in series {
        match f(s) {
            Ok(v) => {
                per.insert(s.trajectory_id.clone(), json!(v));
            }
            Err(MetricError::DegenerateVariance(_) | MetricError::TooShort) => {
                skipped.push(s.trajectory_id.clone())
            }
            Err(e) => return Err(metric_err(&s.trajectory_id, e)),
        }
    }
    let mean = (!per.is_empty())
        .then(|| per.values().filter_map(Value::as_f64).sum::<f64>() / per.len() as f64);
    Ok(json!({"mean": mean, "count": per.len(), "skipped": skipped, "per_trajectory": per}))
}

pub fn eval(args: EvalArgs) -> Result<u8> {
    let mut metrics = Vec::new();
    for m in split_list(&args.metrics) {
        if !METRICS.contains(&m.as_str()) {
            return Err(fatal(
                "UsageError",
                format!("unknown metric `{m}`; known: {}", METRICS.join(", ")),
            ));
        }
        if !metrics.contains(&m) {
            metrics.push(m);
        }
    }
    let needs_pred = metrics
        .iter()
        .any(|m| !matches!(m.as_str(), "bf1" | "mmae"));
    let pred = match &args.pred {
        Some(p) if needs_pred => load_series(p)?,
        None if needs_pred => return Err(fatal("UsageError", "progress metrics need --pred")),
        _ => BTreeMap::new(),
    };
    let gt = match &args.gt {
        Some(p) => {
            let gt = load_series(p)?;
            check_alignment("progress", &pred, &gt)?;
            for (id, g) in &gt {
                if g.len() != pred[id].len() {
                    return Err(fatal(
                        "AlignmentError",
                        format!(
                            "{id}: {} predicted frames vs {} reference frames",
                            pred[id].len(),
                            g.len()
                        ),
                    ));
                }
            }
            Some(gt)
        }
        None => None,
    };
    let clamped: Vec<&String> = pred
        .iter()
        .filter(|(_, v)| v.iter().any(|p| !(0.0..=1.0).contains(p)))
        .map(|(id, _)| id)
        .collect();
    if !clamped.is_empty() {
        log::warn!("predictions outside [0, 1] were clamped for {clamped:?}");
    }

    let against_labels = |metric: &str| -> Result<Vec<ProgressSeries>> {
        let gt = gt
            .as_ref()
            .ok_or_else(|| fatal("UsageError", format!("metric `{metric}` needs --gt")))?;
        pred.iter()
            .map(|(id, p)| {
                ProgressSeries::new(id.clone(), p.clone(), gt[id].clone())
                    .map_err(|e| metric_err(id, e))
            })
            .collect()
    };
    let ranked = |metric: &str| -> Result<Vec<ProgressSeries>> {
        match args.reference {
            Reference::Labels => against_labels(metric),
            Reference::Order => Ok(pred
                .iter()
                .map(|(id, p)| ProgressSeries::against_order(id.clone(), p.clone()))
                .collect()),
        }
    };

    let mut report = Map::new();
    let mut boundary: Option<(Value, Value)> = None;
    for m in &metrics {
        let value = match m.as_str() {
            "voc" => correlation(&ranked(m)?, voc)?,
            "kt" => correlation(&ranked(m)?, kendall_tau)?,
            "epr" => {
                let cfg = EprConfig {
                    tau: args.tau,
                    k_max: args.k_max,
                };
                let all: Vec<f64> = pred.values().flatten().copied().collect();
                let pooled = epr(&all, &cfg).map_err(|e| metric_err("pooled", e))?;
                let mut per = Map::new();
                for (id, p) in &pred {
                    per.insert(
                        id.clone(),
                        json!(epr(p, &cfg).map_err(|e| metric_err(id, e))?),
                    );
                }
                let mean =
                    per.values().filter_map(Value::as_f64).sum::<f64>() / per.len().max(1) as f64;
                json!({"value": pooled, "per_trajectory_mean": mean, "per_trajectory": per})
            }
            "mcc" => {
                let last = |v: &Vec<f64>| v.last().copied().unwrap_or(0.0);
                let ids: Vec<&String> = pred.keys().collect();
                let p: Vec<f64> = ids.iter().map(|id| last(&pred[*id])).collect();
                let g: Vec<bool> = match (&args.tags, &gt) {
                    (Some(path), _) => {
                        let tags = read_tags_csv(open(path)?)
                            .map_err(|e| fatal("ParseError", e.to_string()))?;
                        let outcomes: BTreeMap<String, bool> = tags
                            .into_iter()
                            .map(|t| (t.trajectory_id, t.outcome == Outcome::Success))
                            .collect();
                        check_alignment("mcc tags", &pred, &outcomes)?;
                        ids.iter().map(|id| outcomes[*id]).collect()
                    }
                    (None, Some(gt)) => success_labels(
                        &ids.iter().map(|id| last(&gt[*id])).collect::<Vec<_>>(),
                        args.threshold,
                    ),
                    (None, None) => {
                        return Err(fatal("UsageError", "metric `mcc` needs --gt or --tags"))
                    }
                };
                let r = mcc(&success_labels(&p, args.threshold), &g)
                    .map_err(|e| metric_err("mcc", e))?;
                serde_json::to_value(r)?
            }
            "mae" => {
                let series = against_labels(m)?;
                let mut per = Map::new();
                for s in &series {
                    per.insert(
                        s.trajectory_id.clone(),
                        json!(progress_mae(s).map_err(|e| metric_err(&s.trajectory_id, e))?),
                    );
                }
                let mean =
                    per.values().filter_map(Value::as_f64).sum::<f64>() / per.len().max(1) as f64;
                json!({"mean": mean, "per_trajectory": per})
            }
            "mae_fail" => {
                let path = need(&args.cutoffs, "--cutoffs", m)?;
                let cutoffs = read_cutoffs_csv(open(path)?)
                    .map_err(|e| fatal("ParseError", e.to_string()))?;
                let missing: Vec<&String> = cutoffs
                    .keys()
                    .filter(|id| !pred.contains_key(*id))
                    .collect();
                if !missing.is_empty() {
                    return Err(fatal(
                        "AlignmentError",
                        format!("cutoffs without predictions: {missing:?}"),
                    ));
                }
                let series: Vec<ProgressSeries> = cutoffs
                    .iter()
                    .map(|(id, &cut)| {
                        let mut s = ProgressSeries::against_order(id.clone(), pred[id].clone());
                        s.cutoff = Some(cut);
                        s
                    })
                    .collect();
                serde_json::to_value(mae_fail(&series).map_err(|e| metric_err("mae_fail", e))?)?
            }
            "bf1" | "mmae" => {
                if boundary.is_none() {
                    boundary = Some(boundary_metrics(&args)?);
                }
                let (b, mm) = boundary.as_ref().expect("computed");
                if m == "bf1" {
                    b.clone()
                } else {
                    mm.clone()
                }
            }
            _ => unreachable!("checked above"),
        };
        report.insert(m.clone(), value);
    }

    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "trajectories": if needs_pred { pred.len() } else { boundary.as_ref().map_or(0, |(b, _)| b["per_trajectory"].as_object().map_or(0, |o| o.len())) },
        "clamped": clamped,
        "metrics": report,
    });
    match &args.out {
        Some(path) => write_json(path, &out)?,
        None => print_json(&out)?,
    }
    Ok(0)
}

/// Micro-averaged BF1 and pooled mMAE over aligned segment files.
fn boundary_metrics(args: &EvalArgs) -> Result<(Value, Value)> {
    let pred = load_segments(need(&args.pred_segments, "--pred-segments", "bf1")?)?;
    let gt = load_segments(need(&args.gt_segments, "--gt-segments", "bf1")?)?;
    check_alignment("segments", &pred, &gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut per = Map::new();
    let mut matched = Vec::new();
    let mut nearest = Vec::new();
    let mut undefined = BTreeSet::new();
    for (id, g) in &gt {
        let p = &pred[id];
        if p.num_frames != g.num_frames {
            return Err(fatal(
                "AlignmentError",
                format!("{id}: {} vs {} frames", p.num_frames, g.num_frames),
            ));
        }
        let pb = BoundarySet::from_spans(&p.spans(), p.num_frames, args.include_endpoints);
        let gb = BoundarySet::from_spans(&g.spans(), g.num_frames, args.include_endpoints);
        let r = bf1(&pb, &gb, args.tol);
        tp += r.true_positives;
        fp += r.false_positives;
        fn_ += r.false_negatives;
        let mm = mmae(&r.matches, &pb, &gb);
        matched.extend(r.matches.iter().map(|m| (m.pred - m.gt).abs()));
        match mm.nearest_mae {
            Some(v) => nearest.push(v),
            None => {
                undefined.insert(id.clone());
            }
        }
        per.insert(
            id.clone(),
            json!({"f1": r.f1, "precision": r.precision, "recall": r.recall}),
        );
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean_f1 =
        per.values().filter_map(|v| v["f1"].as_f64()).sum::<f64>() / per.len().max(1) as f64;
    let bf1_value = json!({
        "f1": f1,
        "precision": precision,
        "recall": recall,
        "mean_f1": mean_f1,
        "true_positives": tp,
        "false_positives": fp,
        "false_negatives": fn_,
        "tolerance": args.tol,
        "per_trajectory": per,
    });
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mmae_value = json!({
        "matched_mae": mean(&matched),
        "matched_pairs": matched.len(),
        "nearest_mae": mean(&nearest),
        "nearest_undefined": undefined,
    });
    Ok((bf1_value, mmae_value))
}
