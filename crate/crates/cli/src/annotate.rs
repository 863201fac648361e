use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde_json::json;

use procprog::annotation::write_jsonl;
use procprog::pipeline::backend::{AnnotatorBackend, BackendError, MockBackend};
use procprog::pipeline::remote::{RemoteBackend, RemoteConfig};
use procprog::pipeline::source::scan_corpus;
use procprog::pipeline::{
    run_pipeline, Delay, PipelineConfig, PipelineOutput, RetryConfig, StageDelays,
};
use procprog::progress::DiffMetric;
use procprog::synth::{generate, write_corpus, SynthConfig};

use crate::util::{
    create, fatal, parse_range, print_json, write_json, EXIT_PARTIAL, SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Args)]
pub struct PipelineFlags {
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Seed of the mock backend.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    queue_capacity: usize,
    #[arg(long, default_value_t = 4)]
    preprocessor_workers: usize,
    /// Episodes in flight at the backend.
    #[arg(long, default_value_t = 8)]
    annotator_concurrency: usize,
    /// Keyframe threshold as a fraction of the largest frame difference.
    #[arg(long, default_value_t = 0.05)]
    dedup_threshold: f64,
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
    #[arg(long, default_value_t = 50)]
    backoff_ms: u64,
    #[arg(long, default_value_t = 8)]
    plan_frames: usize,
    #[arg(long, default_value_t = 64)]
    segment_frames: usize,
    #[arg(long, default_value = "l2")]
    diff_metric: DiffMetric,
    /// Remote request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Extra reader latency in ms, `N` or `MIN-MAX`.
    #[arg(long, value_parser = parse_delay, value_name = "MS")]
    read_delay_ms: Option<Delay>,
    #[arg(long, value_parser = parse_delay, value_name = "MS")]
    preprocess_delay_ms: Option<Delay>,
    #[arg(long, value_parser = parse_delay, value_name = "MS")]
    annotate_delay_ms: Option<Delay>,
    #[arg(long, value_parser = parse_delay, value_name = "MS")]
    consume_delay_ms: Option<Delay>,
}

fn parse_delay(s: &str) -> std::result::Result<Delay, String> {
    let (a, b) = parse_range(s)?;
    Ok(Delay::millis(a as u64, b as u64))
}

impl PipelineFlags {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            queue_capacity: self.queue_capacity,
            preprocessor_workers: self.preprocessor_workers,
            annotator_concurrency: self.annotator_concurrency,
            dedup_threshold: self.dedup_threshold,
            retry: RetryConfig {
                max_attempts: self.max_attempts,
                backoff_base: Duration::from_millis(self.backoff_ms),
            },
            plan_frames: self.plan_frames,
            segment_frames: self.segment_frames,
            diff_metric: self.diff_metric,
            delays: StageDelays {
                read: self.read_delay_ms.unwrap_or_default(),
                preprocess: self.preprocess_delay_ms.unwrap_or_default(),
                annotate: self.annotate_delay_ms.unwrap_or_default(),
                consume: self.consume_delay_ms.unwrap_or_default(),
            },
        }
    }

    fn backend(&self) -> Result<Box<dyn AnnotatorBackend>> {
        match self.backend {
            BackendKind::Mock => Ok(Box::new(MockBackend::new(self.seed))),
            BackendKind::Remote => {
                let mut cfg = RemoteConfig::from_env().map_err(backend_fatal)?;
                cfg.timeout = Duration::from_secs(self.timeout_secs);
                cfg.max_attempts = self.max_attempts;
                cfg.max_in_flight = self.annotator_concurrency;
                Ok(Box::new(RemoteBackend::new(cfg).map_err(backend_fatal)?))
            }
        }
    }

    fn run(&self, input: &Path) -> Result<PipelineOutput> {
        let config = self.config();
        config
            .check()
            .map_err(|e| fatal("ConfigError", e.to_string()))?;
        let specs = scan_corpus(input).map_err(|e| fatal("InputError", e))?;
        let backend = self.backend()?;
        log::info!(
            "annotating {} episodes with backend {}",
            specs.len(),
            backend.name()
        );
        run_pipeline(specs, backend.as_ref(), &config)
            .map_err(|e| fatal("ConfigError", e.to_string()))
    }
}

fn backend_fatal(e: BackendError) -> anyhow::Error {
    match e {
        BackendError::Auth(m) => fatal("AuthError", m),
        other => fatal("BackendUnavailable", other.to_string()),
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AnnotateArgs {
    /// Corpus root laid out as `<dataset>/<episode>/<camera>/`.
    #[arg(long)]
    input: PathBuf,
    /// Annotation JSONL output.
    #[arg(long)]
    out: PathBuf,
    /// Quarantine JSONL; defaults to `<out>.quarantine.jsonl`.
    #[arg(long)]
    quarantine: Option<PathBuf>,
    /// Run report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

pub fn annotate(args: AnnotateArgs) -> Result<u8> {
    let output = args.pipeline.run(&args.input)?;
    let mut w = create(&args.out)?;
    write_jsonl(&mut w, &output.records)?;
    w.flush()?;

    let qpath = args.quarantine.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".quarantine.jsonl");
        PathBuf::from(p)
    });
    let mut q = create(&qpath)?;
    for entry in &output.quarantine {
        serde_json::to_writer(&mut q, entry)?;
        q.write_all(b"\n")?;
    }
    q.flush()?;

    let r = &output.report;
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({"schema_version": SCHEMA_VERSION, "command": "annotate", "report": r}),
        )?;
    }
    for e in &output.quarantine {
        log::warn!(
            "quarantined {} at {}: {} {}",
            e.trajectory_id(),
            e.stage,
            e.error,
            e.message
        );
    }
    print_json(&json!({
        "episodes_in": r.episodes_in,
        "episodes_out": r.episodes_out,
        "quarantined": r.quarantined,
        "frames_out": r.frames_out,
        "retries": r.retries,
    }))?;
    Ok(if r.quarantined > 0 { EXIT_PARTIAL } else { 0 })
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ProfileArgs {
    #[arg(long)]
    input: PathBuf,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

pub fn profile(args: ProfileArgs) -> Result<u8> {
    let output = args.pipeline.run(&args.input)?;
    let r = &output.report;
    let busy = r.per_stage_busy_time;
    let overlap = if r.wall_time > 0.0 {
        busy.total() / r.wall_time
    } else {
        0.0
    };
    let value = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "profile",
        "report": r,
        "busy_total": busy.total(),
        "overlap_ratio": overlap,
    });
    if let Some(path) = &args.out {
        write_json(path, &value)?;
    }
    print_json(&value)?;
    Ok(0)
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Output corpus root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 3)]
    tasks: usize,
    /// Subtasks per task, `MIN-MAX`.
    #[arg(long, default_value = "2-5", value_parser = parse_range)]
    subtasks_range: (usize, usize),
    /// Frames per episode, `MIN-MAX`.
    #[arg(long, default_value = "12-40", value_parser = parse_range)]
    frames_range: (usize, usize),
    #[arg(long, default_value_t = 0.3)]
    failure_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    gap_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write PNG frames.
    #[arg(long)]
    images: bool,
}

pub fn synth_corpus(args: SynthArgs) -> Result<u8> {
    let cfg = SynthConfig {
        episodes: args.episodes,
        num_tasks: args.tasks,
        subtasks_min: args.subtasks_range.0,
        subtasks_max: args.subtasks_range.1,
        frames_min: args.frames_range.0,
        frames_max: args.frames_range.1,
        failure_rate: args.failure_rate,
        gap_rate: args.gap_rate,
        seed: args.seed,
        ..Default::default()
    };
    let episodes = generate(&cfg).map_err(|e| fatal("ConfigError", e))?;
    write_corpus(&args.out, &episodes, args.images)
        .map_err(|e| fatal("OutputError", e.to_string()))?;
    let failures = episodes.iter().filter(|e| e.t_cut.is_some()).count();
    print_json(&json!({
        "episodes": episodes.len(),
        "failures": failures,
        "frames": episodes.iter().map(|e| e.episode.num_frames).sum::<usize>(),
        "out": args.out.display().to_string(),
    }))?;
    Ok(0)
}
