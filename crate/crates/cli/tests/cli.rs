mod common;

use std::fs;
use std::path::Path;

use common::*;
use procprog::annotation::read_jsonl;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn read_progress(path: &Path) -> Vec<Option<f64>> {
    let recs = read_jsonl(std::io::BufReader::new(fs::File::open(path).unwrap())).unwrap();
    recs.iter().map(|r| r.progress).collect()
}

fn write_diffs(path: &Path, diffs: &[f64]) {
    let text: String = diffs.iter().map(|d| format!("{d}\n")).collect();
    fs::write(path, format!("magnitude\n{text}")).unwrap();
}

const SPANS_A: [(usize, usize); 3] = [(0, 4), (5, 14), (15, 29)];

/// Double-loop labels for completed spans tiling `0..T`.
fn oracle_labels(spans: &[(usize, usize)], diffs: &[f64], lo: f64, hi: f64, eps: f64) -> Vec<f64> {
    let t_len = diffs.len() + 1;
    let k = spans.len() as f64;
    let w: Vec<f64> = spans
        .iter()
        .map(|&(a, b)| (k * (b - a + 1) as f64 / t_len as f64).clamp(lo, hi))
        .collect();
    let total: f64 = w.iter().sum();
    (0..t_len)
        .map(|t| {
            let mut acc = 0.0;
            for (i, &(a, b)) in spans.iter().enumerate() {
                let mass: f64 = (a + 1..=b).map(|u| diffs[u - 1] + eps).sum();
                for u in a + 1..=b.min(t) {
                    acc += w[i] * (diffs[u - 1] + eps) / mass;
                }
            }
            (acc / total).min(1.0)
        })
        .collect()
}

#[test]
fn label_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let ep = episode("a", 30);
    write_records(&dir.path().join("ann.jsonl"), &records(&ep, &SPANS_A, &[]));
    let diffs: Vec<f64> = (1..30).map(|t| 1.0 + (t % 3) as f64 * 0.5).collect();
    write_diffs(&dir.path().join("d.csv"), &diffs);
    let out = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "d.csv",
            "--out",
            "lab.jsonl",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let got = read_progress(&dir.path().join("lab.jsonl"));
    let want = oracle_labels(&SPANS_A, &diffs, 0.75, 1.25, 1e-6);
    for (g, w) in got.iter().zip(&want) {
        assert!((g.unwrap() - w).abs() < 1e-9, "{g:?} vs {w}");
    }
}

#[test]
fn label_clip_one_gives_thirds() {
    let dir = tempfile::tempdir().unwrap();
    write_records(
        &dir.path().join("ann.jsonl"),
        &records(&episode("a", 30), &SPANS_A, &[]),
    );
    write_diffs(&dir.path().join("d.csv"), &[1.0; 29]);
    let out = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "d.csv",
            "--clip",
            "1",
            "1",
            "--out",
            "lab.jsonl",
        ],
    );
    assert!(out.status.success());
    let got = read_progress(&dir.path().join("lab.jsonl"));
    assert!((got[4].unwrap() - 1.0 / 3.0).abs() < 1e-9);
    assert!((got[14].unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert!((got[29].unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn label_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_records(
        &dir.path().join("ann.jsonl"),
        &records(&episode("a", 30), &SPANS_A, &[]),
    );
    let out = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "nope.csv",
            "--out",
            "lab.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "InputError");

    let out = procprog(
        dir.path(),
        &["label", "--annotations", "ann.jsonl", "--out", "lab.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));

    write_diffs(&dir.path().join("d.csv"), &[1.0; 29]);
    let ok = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "d.csv",
            "--out",
            "lab.jsonl",
        ],
    );
    assert!(ok.status.success());
    let again = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "lab.jsonl",
            "--diffs",
            "d.csv",
            "--out",
            "x.jsonl",
        ],
    );
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(stderr_json(&again)["error"], "RefuseOverwrite");
    let forced = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "lab.jsonl",
            "--diffs",
            "d.csv",
            "--out",
            "x.jsonl",
            "--force",
        ],
    );
    assert!(forced.status.success());

    write_diffs(&dir.path().join("short.csv"), &[1.0; 10]);
    let out = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "short.csv",
            "--out",
            "y.jsonl",
        ],
    );
    assert_eq!(stderr_json(&out)["error"], "LengthMismatch");
}

#[test]
fn label_without_valid_subtasks_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    write_records(
        &dir.path().join("ann.jsonl"),
        &records(&episode("a", 10), &[], &["Pick up the cup"]),
    );
    write_diffs(&dir.path().join("d.csv"), &[1.0; 9]);
    let out = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "d.csv",
            "--out",
            "lab.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(read_progress(&dir.path().join("lab.jsonl"))
        .iter()
        .all(Option::is_none));
}

/// Trajectory A: three completed spans; B: one span and one absent subtask.
fn two_trajectories(dir: &Path) {
    let a = records(&episode("a", 30), &SPANS_A, &[]);
    let b = records(&episode("b", 20), &[(2, 9)], &["Place the cup"]);
    write_records(&dir.join("ann.jsonl"), &[a, b].concat());
}

fn label_dir_of_diffs(dir: &Path) {
    for (id, n) in [("a", 30), ("b", 20)] {
        let cam = dir.join("diffs").join("fix").join(id).join("front");
        fs::create_dir_all(&cam).unwrap();
        write_diffs(&cam.join("diffs.csv"), &vec![1.0; n - 1]);
    }
}

#[test]
fn gen_vqa_counts_follow_density() {
    let dir = tempfile::tempdir().unwrap();
    two_trajectories(dir.path());
    label_dir_of_diffs(dir.path());
    let out = procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "diffs",
            "--out",
            "lab.jsonl",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = procprog(
        dir.path(),
        &[
            "gen-vqa",
            "--annotations",
            "lab.jsonl",
            "--density",
            "4",
            "--out",
            "vqa.jsonl",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // A queries 0,7,15,22 (next starts at 5 and 15); B queries 0,5,10,15 (start 2).
    let counts = &stdout_json(&out)["counts"];
    assert_eq!(
        counts,
        &serde_json::json!({"a1": 2, "a2": 2, "b1": 3, "b2": 3, "c": 8})
    );
    let lines = fs::read_to_string(dir.path().join("vqa.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 18);

    let again = procprog(
        dir.path(),
        &[
            "gen-vqa",
            "--annotations",
            "lab.jsonl",
            "--density",
            "4",
            "--out",
            "vqa2.jsonl",
        ],
    );
    assert!(again.status.success());
    assert_eq!(
        fs::read(dir.path().join("vqa.jsonl")).unwrap(),
        fs::read(dir.path().join("vqa2.jsonl")).unwrap()
    );
}

#[test]
fn gen_vqa_errors() {
    let dir = tempfile::tempdir().unwrap();
    two_trajectories(dir.path());
    let out = procprog(
        dir.path(),
        &[
            "gen-vqa",
            "--annotations",
            "ann.jsonl",
            "--families",
            "c",
            "--out",
            "v.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "MissingLabels");
    let out = procprog(
        dir.path(),
        &[
            "gen-vqa",
            "--annotations",
            "ann.jsonl",
            "--families",
            "a1,x9",
            "--out",
            "v.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "UnknownFamily");
    let out = procprog(
        dir.path(),
        &[
            "gen-vqa",
            "--annotations",
            "ann.jsonl",
            "--families",
            "a1,b2",
            "--out",
            "v.jsonl",
        ],
    );
    assert!(out.status.success());
}

#[test]
fn eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    two_trajectories(dir.path());
    label_dir_of_diffs(dir.path());
    procprog(
        dir.path(),
        &[
            "label",
            "--annotations",
            "ann.jsonl",
            "--diffs",
            "diffs",
            "--out",
            "lab.jsonl",
        ],
    );
    let out = procprog(
        dir.path(),
        &[
            "eval",
            "--pred",
            "lab.jsonl",
            "--gt",
            "lab.jsonl",
            "--metrics",
            "voc,kt,mcc,mae",
            "--out",
            "r.json",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["metrics"]["voc"]["mean"], 1.0);
    assert_eq!(r["metrics"]["kt"]["mean"], 1.0);
    assert_eq!(r["metrics"]["mcc"]["value"], 1.0);
    assert_eq!(r["metrics"]["mae"]["mean"], 0.0);
}

#[test]
fn eval_four_anchor_epr() {
    let dir = tempfile::tempdir().unwrap();
    write_points(
        &dir.path().join("p.jsonl"),
        &[("x", vec![0.25, 0.5, 0.75, 1.0])],
    );
    let out = procprog(
        dir.path(),
        &[
            "eval",
            "--pred",
            "p.jsonl",
            "--metrics",
            "epr",
            "--tau",
            "0.5",
        ],
    );
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["metrics"]["epr"]["value"], 3.0);
}

#[test]
fn eval_shuffled_predictions_have_small_voc() {
    let dir = tempfile::tempdir().unwrap();
    let gt: Vec<f64> = (0..400).map(|i| i as f64 / 399.0).collect();
    let mut pred = gt.clone();
    pred.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
    write_points(&dir.path().join("p.jsonl"), &[("x", pred)]);
    write_points(&dir.path().join("g.jsonl"), &[("x", gt)]);
    let out = procprog(
        dir.path(),
        &[
            "eval",
            "--pred",
            "p.jsonl",
            "--gt",
            "g.jsonl",
            "--metrics",
            "voc",
        ],
    );
    assert!(out.status.success());
    let v = stdout_json(&out)["metrics"]["voc"]["mean"]
        .as_f64()
        .unwrap();
    // null sd of Spearman rho at n = 400 is 1/sqrt(399) ~ 0.05
    assert!(v.abs() < 0.2, "voc {v}");
}

#[test]
fn eval_alignment_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_points(
        &dir.path().join("p.jsonl"),
        &[("x", vec![0.0, 1.0]), ("y", vec![0.0, 1.0])],
    );
    write_points(
        &dir.path().join("g.jsonl"),
        &[("x", vec![0.0, 1.0]), ("z", vec![0.0, 1.0])],
    );
    let out = procprog(
        dir.path(),
        &[
            "eval",
            "--pred",
            "p.jsonl",
            "--gt",
            "g.jsonl",
            "--metrics",
            "voc",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "AlignmentError");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("\"y\"") && msg.contains("\"z\""), "{msg}");

    let out = procprog(
        dir.path(),
        &["eval", "--pred", "p.jsonl", "--metrics", "mae"],
    );
    assert_eq!(out.status.code(), Some(1));
    let out = procprog(
        dir.path(),
        &["eval", "--pred", "p.jsonl", "--metrics", "bogus"],
    );
    assert_eq!(stderr_json(&out)["error"], "UsageError");
}

#[test]
fn eval_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    // T = 101: boundary e+1 = 30 and 60 normalize to 0.30 and 0.60.
    let gt = r#"{"trajectory_id":"x","num_frames":101,"segments":[{"action_description":"a","start_frame":0,"end_frame":29},{"action_description":"b","start_frame":30,"end_frame":59},{"action_description":"c","start_frame":60,"end_frame":100}]}"#;
    let pred = r#"{"trajectory_id":"x","num_frames":101,"segments":[{"action_description":"a","start_frame":0,"end_frame":31},{"action_description":"b","start_frame":32,"end_frame":79},{"action_description":"c","start_frame":80,"end_frame":100}]}"#;
    fs::write(dir.path().join("g.jsonl"), format!("{gt}\n")).unwrap();
    fs::write(dir.path().join("p.jsonl"), format!("{pred}\n")).unwrap();
    let out = procprog(
        dir.path(),
        &[
            "eval",
            "--pred-segments",
            "p.jsonl",
            "--gt-segments",
            "g.jsonl",
            "--metrics",
            "bf1,mmae",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = stdout_json(&out);
    assert!((r["metrics"]["bf1"]["f1"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((r["metrics"]["mmae"]["matched_mae"].as_f64().unwrap() - 0.02).abs() < 1e-12);
}

#[test]
fn synth_corpus_is_seed_stable() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["c1", "c2"] {
        let out = procprog(
            dir.path(),
            &[
                "synth-corpus",
                "--out",
                name,
                "--episodes",
                "20",
                "--seed",
                "7",
                "--images",
            ],
        );
        assert!(out.status.success());
    }
    let files = |root: &Path| {
        let mut v: Vec<_> = walk(root)
            .into_iter()
            .map(|p| {
                (
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        v.sort();
        v
    };
    let (a, b) = (files(&dir.path().join("c1")), files(&dir.path().join("c2")));
    assert!(a.len() > 20);
    assert_eq!(a, b);
}

fn walk(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn annotate_errors_and_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = procprog(
        dir.path(),
        &["annotate", "--input", "missing", "--out", "a.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "InputError");

    procprog(
        dir.path(),
        &[
            "synth-corpus",
            "--out",
            "corpus",
            "--episodes",
            "4",
            "--seed",
            "1",
        ],
    );
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_procprog"))
        .args([
            "annotate",
            "--input",
            "corpus",
            "--out",
            "a.jsonl",
            "--backend",
            "remote",
        ])
        .env_remove("ANNOTATOR_TOKEN")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "AuthError");

    let out = procprog(
        dir.path(),
        &[
            "annotate", "--input", "corpus", "--out", "a.jsonl", "--report", "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["episodes_out"], 4);

    fs::remove_file(dir.path().join("corpus/synth/ep_00002/front/features.bin")).unwrap();
    let out = procprog(
        dir.path(),
        &["annotate", "--input", "corpus", "--out", "b.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    let q = fs::read_to_string(dir.path().join("b.jsonl.quarantine.jsonl")).unwrap();
    assert_eq!(q.lines().count(), 1);
    assert!(q.contains("ep_00002"));
}

#[test]
fn profile_reports_overlap() {
    let dir = tempfile::tempdir().unwrap();
    procprog(
        dir.path(),
        &[
            "synth-corpus",
            "--out",
            "corpus",
            "--episodes",
            "24",
            "--seed",
            "2",
        ],
    );
    let out = procprog(
        dir.path(),
        &[
            "profile",
            "--input",
            "corpus",
            "--read-delay-ms",
            "5",
            "--preprocess-delay-ms",
            "10",
            "--annotate-delay-ms",
            "20",
            "--consume-delay-ms",
            "5",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = stdout_json(&out);
    let busy = r["busy_total"].as_f64().unwrap();
    let wall = r["report"]["wall_time"].as_f64().unwrap();
    assert!(busy >= wall, "busy {busy} wall {wall}");
}

#[test]
fn split_and_rft_label() {
    let dir = tempfile::tempdir().unwrap();
    let mut tags = String::from("trajectory_id,task,outcome,failure_type\n");
    for task in ["t0", "t1", "t2"] {
        for i in 0..3 {
            tags += &format!("{task}/s{i},{task},success,\n");
        }
        for ft in ["stall", "regress"] {
            for i in 0..2 {
                tags += &format!("{task}/{ft}{i},{task},failure,{ft}\n");
            }
        }
    }
    fs::write(dir.path().join("tags.csv"), &tags).unwrap();
    for (mode, train) in [("succ", 3), ("succ_fail", 9)] {
        let out = procprog(
            dir.path(),
            &["split", "--tags", "tags.csv", "--mode", mode, "--seed", "4"],
        );
        assert!(out.status.success());
        let r = stdout_json(&out);
        assert_eq!(r["train"].as_array().unwrap().len(), train);
        assert_eq!(
            r["train"].as_array().unwrap().len() + r["test"].as_array().unwrap().len(),
            21
        );
        let again = procprog(
            dir.path(),
            &["split", "--tags", "tags.csv", "--mode", mode, "--seed", "4"],
        );
        assert_eq!(out.stdout, again.stdout);
    }

    let series: Vec<(String, Vec<f64>)> = tags
        .lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            let id = l.split(',').next().unwrap().to_string();
            (id, (0..10).map(|t| (t * (i + 1)) as f64 / 300.0).collect())
        })
        .collect();
    let refs: Vec<(&str, Vec<f64>)> = series
        .iter()
        .map(|(a, b)| (a.as_str(), b.clone()))
        .collect();
    write_points(&dir.path().join("p.jsonl"), &refs);
    let out = procprog(
        dir.path(),
        &[
            "rft-label",
            "--progress",
            "p.jsonl",
            "--tags",
            "tags.csv",
            "--horizon",
            "3",
            "--out",
            "l.jsonl",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // 7 trajectories x 10 steps per task -> ceil(0.3 * 70) = 21 per task
    assert_eq!(stdout_json(&out)["positive"], 63);
}

#[test]
fn config_file_with_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.conf"),
        "# synth\nepisodes = 3\nseed = 5\n",
    )
    .unwrap();
    let out = procprog(
        dir.path(),
        &[
            "--config",
            "run.conf",
            "synth-corpus",
            "--out",
            "c",
            "--episodes",
            "2",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout_json(&out)["episodes"], 2);
    let out = procprog(
        dir.path(),
        &["synth-corpus", "--config", "run.conf", "--out", "d"],
    );
    assert_eq!(stdout_json(&out)["episodes"], 3);
    let out = procprog(
        dir.path(),
        &["synth-corpus", "--config", "missing.conf", "--out", "e"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "ConfigError");
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = procprog(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "annotate",
        "label",
        "gen-vqa",
        "eval",
        "split",
        "rft-label",
        "profile",
        "synth-corpus",
        "baseline",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let out = procprog(dir.path(), &["label", "--annotations"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "UsageError");
}

#[test]
fn resolved_config_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_procprog"))
        .args([
            "synth-corpus",
            "--out",
            "c",
            "--episodes",
            "2",
            "--seed",
            "9",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("resolved config") && err.contains("seed: 9"),
        "{err}"
    );
}
