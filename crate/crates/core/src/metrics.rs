//! Evaluation metrics for segmentation and progress prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series needs at least two points")]
    TooShort,
    #[error("degenerate variance: all {0} values are equal")]
    DegenerateVariance(&'static str),
    #[error("no predictions")]
    EmptyPredictions,
    #[error("trajectory `{0}` has no failure cutoff")]
    MissingCutoff(String),
    #[error("no trajectories to time")]
    EmptyTrajectories,
    #[error("sample keys differ between models `{0}` and `{1}`")]
    KeyMismatch(String, String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Default boundary tolerance: 5% of the sequence length.
pub const BOUNDARY_TOLERANCE: f64 = 0.05;

// Absorbs representation error when distances sit exactly on the tolerance.
const TOL_SLACK: f64 = 1e-9;

/// Deduplicated, ascending boundary positions normalized to [0, 1].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundarySet {
    pub positions: Vec<f64>,
    pub source_length: usize,
}

impl BoundarySet {
    pub fn from_positions(mut positions: Vec<f64>, source_length: usize) -> Self {
        positions.retain(|p| p.is_finite());
        for p in &mut positions {
            *p = p.clamp(0.0, 1.0);
        }
        positions.sort_by(f64::total_cmp);
        positions.dedup();
        Self {
            positions,
            source_length,
        }
    }

    /// Boundaries of inclusive frame spans: each segment contributes its start
    /// frame and the frame after its end (the transition out of it). Positions
    /// are `frame / (T - 1)`; endpoints 0 and 1 are dropped unless requested.
    pub fn from_spans(
        spans: &[(usize, usize)],
        num_frames: usize,
        include_endpoints: bool,
    ) -> Self {
        let last = num_frames.saturating_sub(1);
        let mut frames = BTreeSet::new();
        for &(a, b) in spans {
            frames.insert(a.min(last));
            frames.insert((b + 1).min(last));
        }
        if !include_endpoints {
            frames.remove(&0);
            frames.remove(&last);
        }
        let denom = last.max(1) as f64;
        Self {
            positions: frames.into_iter().map(|f| f as f64 / denom).collect(),
            source_length: num_frames,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMatch {
    pub gt: f64,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bf1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub matches: Vec<BoundaryMatch>,
}

/// Greedy matching: ground-truth boundaries in ascending order each take the
/// nearest still-unmatched prediction within `tol` (ties go to the smaller
/// prediction). Returns indices `(gt, pred)`.
pub fn greedy_boundary_matching(pred: &[f64], gt: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut used = vec![false; pred.len()];
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| gt[a].total_cmp(&gt[b]));
    for gi in order {
        let g = gt[gi];
        let best = pred
            .iter()
            .enumerate()
            .filter(|(pi, p)| !used[*pi] && (*p - g).abs() <= tol + TOL_SLACK)
            .min_by(|(_, a), (_, b)| {
                (*a - g)
                    .abs()
                    .total_cmp(&(*b - g).abs())
                    .then(a.total_cmp(b))
            });
        if let Some((pi, _)) = best {
            used[pi] = true;
            out.push((gi, pi));
        }
    }
    out
}

/// Boundary F1 with each boundary matched at most once.
pub fn bf1(pred: &BoundarySet, gt: &BoundarySet, tol: f64) -> Bf1Report {
    let pairs = greedy_boundary_matching(&pred.positions, &gt.positions, tol);
    let tp = pairs.len();
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    let (precision, recall, f1) = if pred.is_empty() && gt.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        let p = if pred.is_empty() {
            0.0
        } else {
            tp as f64 / pred.len() as f64
        };
        let r = if gt.is_empty() {
            0.0
        } else {
            tp as f64 / gt.len() as f64
        };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        (p, r, f)
    };
    Bf1Report {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        matches: pairs
            .into_iter()
            .map(|(g, p)| BoundaryMatch {
                gt: gt.positions[g],
                pred: pred.positions[p],
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmaeReport {
    /// Mean |pred - gt| over matched pairs; `None` when nothing matched.
    pub matched_mae: Option<f64>,
    /// Mean distance from each gt boundary to its nearest prediction,
    /// without a tolerance; `None` when either set is empty.
    pub nearest_mae: Option<f64>,
}

impl MmaeReport {
    pub fn matched_undefined(&self) -> bool {
        self.matched_mae.is_none()
    }
}

pub fn mmae(matches: &[BoundaryMatch], pred: &BoundarySet, gt: &BoundarySet) -> MmaeReport {
    let matched_mae = (!matches.is_empty())
        .then(|| matches.iter().map(|m| (m.pred - m.gt).abs()).sum::<f64>() / matches.len() as f64);
    let nearest_mae = (!pred.is_empty() && !gt.is_empty()).then(|| {
        gt.positions
            .iter()
            .map(|g| {
                pred.positions
                    .iter()
                    .map(|p| (p - g).abs())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / gt.len() as f64
    });
    MmaeReport {
        matched_mae,
        nearest_mae,
    }
}

/// Predictions of one trajectory against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressSeries {
    pub trajectory_id: String,
    pub predictions: Vec<f64>,
    /// Reference progress labels, or frame-order ranks.
    pub ground_truth: Vec<f64>,
    /// Annotated failure onset, failed trajectories only.
    pub cutoff: Option<usize>,
    /// Set when some prediction fell outside [0, 1] and was clamped.
    pub clamped: bool,
}

impl ProgressSeries {
    pub fn new(
        trajectory_id: impl Into<String>,
        predictions: Vec<f64>,
        ground_truth: Vec<f64>,
    ) -> Result<Self> {
        if predictions.len() != ground_truth.len() {
            return Err(MetricError::LengthMismatch(
                predictions.len(),
                ground_truth.len(),
            ));
        }
        let clamped = predictions.iter().any(|p| !(0.0..=1.0).contains(p));
        Ok(Self {
            trajectory_id: trajectory_id.into(),
            predictions: predictions.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
            ground_truth,
            cutoff: None,
            clamped,
        })
    }

    /// Reference is the frame order itself.
    pub fn against_order(trajectory_id: impl Into<String>, predictions: Vec<f64>) -> Self {
        let order = (0..predictions.len()).map(|i| i as f64).collect();
        Self::new(trajectory_id, predictions, order).expect("equal lengths")
    }
}

/// 1-based ranks, ties receive the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(series: &ProgressSeries) -> Result<()> {
    let (p, g) = (&series.predictions, &series.ground_truth);
    if p.len() != g.len() {
        return Err(MetricError::LengthMismatch(p.len(), g.len()));
    }
    if p.len() < 2 {
        return Err(MetricError::TooShort);
    }
    if p.iter().all(|v| *v == p[0]) {
        return Err(MetricError::DegenerateVariance("prediction"));
    }
    if g.iter().all(|v| *v == g[0]) {
        return Err(MetricError::DegenerateVariance("reference"));
    }
    Ok(())
}

/// Value-order correlation: Spearman's rho with average ranks for ties.
pub fn voc(series: &ProgressSeries) -> Result<f64> {
    check_pair(series)?;
    let rp = average_ranks(&series.predictions);
    let rg = average_ranks(&series.ground_truth);
    pearson(&rp, &rg).ok_or(MetricError::DegenerateVariance("rank"))
}

/// Kendall's tau-b.
pub fn kendall_tau(series: &ProgressSeries) -> Result<f64> {
    check_pair(series)?;
    let (x, y) = (&series.predictions, &series.ground_truth);
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => ties_x += 1,
                (_, 0) => ties_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + ties_x) as f64)
        * ((concordant + discordant + ties_y) as f64))
        .sqrt();
    if denom == 0.0 {
        return Err(MetricError::DegenerateVariance("pair"));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EprConfig {
    pub tau: f64,
    pub k_max: usize,
}

impl Default for EprConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k_max: 4096,
        }
    }
}

/// Bin of `p` at width `1/k`; `p = 1` falls into the top bin.
pub fn epr_bin(p: f64, k: usize) -> usize {
    ((p * k as f64).floor() as usize).min(k - 1)
}

/// Effective progress resolution: `log2(k*)` where `k*` is the largest
/// `k <= k_max` whose bin width `1/k` times the number of occupied bins is
/// at least `tau`.
pub fn epr(predictions: &[f64], config: &EprConfig) -> Result<f64> {
    if !(config.tau > 0.0 && config.tau <= 1.0) || config.k_max == 0 {
        return Err(MetricError::Config(format!(
            "need 0 < tau <= 1 and k_max >= 1, got tau={} k_max={}",
            config.tau, config.k_max
        )));
    }
    if predictions.is_empty() {
        return Err(MetricError::EmptyPredictions);
    }
    let clamped: Vec<f64> = predictions.iter().map(|p| p.clamp(0.0, 1.0)).collect();
    let mut distinct = clamped.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best = 1;
    let mut bins = BTreeSet::new();
    for k in 1..=config.k_max {
        // occupancy <= distinct count, so beyond this k nothing can pass
        if (distinct.len() as f64) < config.tau * k as f64 {
            break;
        }
        bins.clear();
        bins.extend(distinct.iter().map(|&p| epr_bin(p, k)));
        if bins.len() as f64 / k as f64 >= config.tau {
            best = k;
        }
    }
    Ok((best as f64).log2())
}

pub fn success_labels(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v >= threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    pub value: f64,
    /// A confusion-matrix margin was empty; the value is reported as 0.
    pub degenerate: bool,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Matthews correlation coefficient.
pub fn mcc(pred: &[bool], gt: &[bool]) -> Result<MccReport> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let denom = ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
    let (value, degenerate) = if denom == 0.0 {
        (0.0, true)
    } else {
        ((tpf * tnf - fpf * fnf) / denom, false)
    };
    Ok(MccReport {
        value,
        degenerate,
        tp,
        tn,
        fp,
        fn_,
    })
}

/// Earliest frame reaching the maximum prediction.
pub fn turning_point(predictions: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (t, &p) in predictions.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((t, p));
        }
    }
    best.map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeFailReport {
    /// Mean |t* - t_cut| in frames.
    pub mae: f64,
    /// Mean |t* - t_cut| / T.
    pub normalized_mae: f64,
    pub turning_points: BTreeMap<String, usize>,
}

pub fn mae_fail(series: &[ProgressSeries]) -> Result<MaeFailReport> {
    if series.is_empty() {
        return Err(MetricError::EmptyPredictions);
    }
    let mut turning_points = BTreeMap::new();
    let (mut total, mut total_norm) = (0.0, 0.0);
    for s in series {
        let cut = s
            .cutoff
            .ok_or_else(|| MetricError::MissingCutoff(s.trajectory_id.clone()))?;
        let t_star = turning_point(&s.predictions).ok_or(MetricError::EmptyPredictions)?;
        let err = t_star.abs_diff(cut) as f64;
        total += err;
        total_norm += err / s.predictions.len() as f64;
        turning_points.insert(s.trajectory_id.clone(), t_star);
    }
    let n = series.len() as f64;
    Ok(MaeFailReport {
        mae: total / n,
        normalized_mae: total_norm / n,
        turning_points,
    })
}

/// Element-wise mean absolute error between predictions and reference.
pub fn progress_mae(series: &ProgressSeries) -> Result<f64> {
    let (p, g) = (&series.predictions, &series.ground_truth);
    if p.len() != g.len() {
        return Err(MetricError::LengthMismatch(p.len(), g.len()));
    }
    if p.is_empty() {
        return Err(MetricError::EmptyPredictions);
    }
    Ok(p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Mean wall-clock seconds per trajectory. The first trajectory is run once
/// as warm-up and not counted. Runs serially on the calling thread.
pub fn latency_harness<T, F>(mut evaluator: F, trajectories: &[T]) -> Result<f64>
where
    F: FnMut(&T),
{
    let first = trajectories.first().ok_or(MetricError::EmptyTrajectories)?;
    evaluator(first);
    let mut total = Duration::ZERO;
    for t in trajectories {
        let start = Instant::now();
        evaluator(t);
        total += start.elapsed();
    }
    Ok(total.as_secs_f64() / trajectories.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleResponse {
    pub code: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub sample_key: String,
    pub responses: Vec<BundleResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub seed: u64,
    /// Anonymous code -> model name.
    pub codes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalBundle {
    pub entries: Vec<BundleEntry>,
    pub key: AnswerKey,
}

impl HumanEvalBundle {
    /// Restores `model -> sample -> response` from the bundle and its key.
    pub fn deanonymize(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for e in &self.entries {
            for r in &e.responses {
                out.entry(self.key.codes[&r.code].clone())
                    .or_default()
                    .insert(e.sample_key.clone(), r.response.clone());
            }
        }
        out
    }
}

/// Anonymizes model outputs for blind comparison: models get random codes
/// and each sample's response order is shuffled, both from `seed`.
pub fn human_eval_export(
    model_outputs: &BTreeMap<String, BTreeMap<String, String>>,
    seed: u64,
) -> Result<HumanEvalBundle> {
    let mut models = model_outputs.iter();
    let Some((first_name, first)) = models.next() else {
        return Ok(HumanEvalBundle {
            entries: Vec::new(),
            key: AnswerKey {
                seed,
                codes: BTreeMap::new(),
            },
        });
    };
    let keys: Vec<&String> = first.keys().collect();
    for (name, outputs) in models {
        if !outputs.keys().eq(keys.iter().copied()) {
            return Err(MetricError::KeyMismatch(first_name.clone(), name.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = BTreeMap::new();
    let mut code_of = BTreeMap::new();
    for name in model_outputs.keys() {
        let code = loop {
            let c = format!("system-{:04x}", rng.gen::<u16>());
            if !codes.contains_key(&c) {
                break c;
            }
        };
        codes.insert(code.clone(), name.clone());
        code_of.insert(name.clone(), code);
    }
    let entries = keys
        .iter()
        .map(|k| {
            let mut responses: Vec<BundleResponse> = model_outputs
                .iter()
                .map(|(name, outs)| BundleResponse {
                    code: code_of[name].clone(),
                    response: outs[*k].clone(),
                })
                .collect();
            responses.shuffle(&mut rng);
            BundleEntry {
                sample_key: (*k).clone(),
                responses,
            }
        })
        .collect();
    Ok(HumanEvalBundle {
        entries,
        key: AnswerKey { seed, codes },
    })
}
