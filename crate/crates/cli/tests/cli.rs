//! End-to-end binary tests: drive the full pipeline on a miniature scenario
//! and check the documented exit codes (0 success, 2 usage, 3 missing
//! prerequisite, 4 runtime failure).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyvid")).args(args).output().expect("spawn tinyvid")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

#[test]
fn corpus_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["--identities", "4", "--videos-per-identity", "2", "--heldout", "1", "--seed", "9"];
    let out_a = ok(&[&["gen-corpus", "--out", &s(&a)], &args[..]].concat());
    let out_b = ok(&[&["gen-corpus", "--out", &s(&b)], &args[..]].concat());
    assert_eq!(out_a, out_b, "stdout (with checksum) must match");
    assert!(out_a.contains("checksum"));
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap(),
        "manifests must be byte-identical"
    );
}

#[test]
fn flags_override_config_files_which_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("corpus.json");
    fs::write(&cfg, "{\"identities\": 4, \"videos_per_identity\": 1, \"heldout\": 1, \"seed\": 3}")
        .unwrap();
    let from_file = ok(&["gen-corpus", "--out", &s(&dir.path().join("f")), "--config", &s(&cfg)]);
    assert!(from_file.contains("4 identities"), "file value should apply: {from_file}");
    let from_flag = ok(&[
        "gen-corpus",
        "--out",
        &s(&dir.path().join("g")),
        "--config",
        &s(&cfg),
        "--identities",
        "3",
    ]);
    assert!(from_flag.contains("3 identities"), "flag should win: {from_flag}");
}

#[test]
fn usage_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let (unknown_flag, _) = code(&["gen-corpus", "--out", &s(&dir.path().join("x")), "--bogus"]);
    assert_eq!(unknown_flag, 2);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"identitees\": 3}").unwrap();
    let (bad_key, stderr) =
        code(&["gen-corpus", "--out", &s(&dir.path().join("y")), "--config", &s(&cfg)]);
    assert_eq!(bad_key, 2, "unknown config key must be a usage error: {stderr}");
    assert!(stderr.contains("identitees"));
}

#[test]
fn personalize_without_a_pretrained_denoiser_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&[
        "gen-corpus", "--out", &s(&corpus),
        "--identities", "3", "--videos-per-identity", "1", "--heldout", "1", "--seed", "5",
    ]);
    let missing = dir.path().join("nowhere").join("denoiser.tvt");
    let (exit, stderr) = code(&[
        "personalize",
        "--denoiser", &s(&missing),
        "--rewards", &s(&dir.path().join("rewards.tvt")),
        "--corpus", &s(&corpus),
        "--out", &s(&dir.path().join("run")),
    ]);
    assert_eq!(exit, 3, "missing denoiser must be a dependency error: {stderr}");
    assert!(stderr.contains("missing artifact"), "stderr: {stderr}");
    assert!(stderr.contains("denoiser.tvt"), "names the missing file: {stderr}");
}

#[test]
fn export_of_an_empty_run_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("empty-run");
    fs::create_dir_all(&run_dir).unwrap();
    let out = run(&[
        "export",
        "--run", &s(&run_dir),
        "--format", "gif",
        "--out", &s(&dir.path().join("media")),
    ]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "stderr: {stderr}");
    assert!(!dir.path().join("media").exists(), "no files for an empty run");
}

/// The whole pipeline as a user would script it, on a miniature scenario.
#[test]
fn full_pipeline_produces_reports_media_and_resumable_runs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let pre = dir.path().join("pre");
    let rew = dir.path().join("rew");
    let run_a = dir.path().join("reward-run");
    let run_b = dir.path().join("baseline-run");

    ok(&[
        "gen-corpus", "--out", &s(&corpus),
        "--identities", "6", "--videos-per-identity", "4", "--heldout", "2", "--seed", "9",
    ]);
    let pre_out = ok(&[
        "pretrain", "--corpus", &s(&corpus), "--out", &s(&pre),
        "--iterations", "2", "--seed", "7",
    ]);
    assert!(pre_out.contains("pretrained 2 iterations"));
    ok(&["fit-rewards", "--corpus", &s(&corpus), "--out", &s(&rew), "--seed", "8"]);

    let denoiser = pre.join("denoiser.tvt");
    let rewards = rew.join("rewards.tvt");
    let fast = [
        "--iterations", "2", "--sampler-steps", "4", "--m-frames", "2",
        "--k-references", "2", "--eval-clips", "2", "--checkpoint-every", "1",
    ];
    ok(&[
        &[
            "personalize",
            "--denoiser", &s(&denoiser),
            "--rewards", &s(&rewards),
            "--corpus", &s(&corpus),
            "--identity", "0",
            "--out", &s(&run_a),
        ],
        &fast[..],
    ]
    .concat());
    ok(&[
        &[
            "baseline",
            "--denoiser", &s(&denoiser),
            "--corpus", &s(&corpus),
            "--identity", "0",
            "--out", &s(&run_b),
        ],
        &fast[..],
    ]
    .concat());

    // The run directory is self-describing and carries every artifact.
    for file in ["manifest.json", "config.json", "adapter.tvt", "loss.jsonl", "refs.tvt"] {
        assert!(run_a.join(file).is_file(), "missing {file}");
    }
    let snapshot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_a.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["train"]["iterations"], 2);
    assert_eq!(snapshot["command"], "personalize");
    let loss_lines = fs::read_to_string(run_a.join("loss.jsonl")).unwrap().lines().count();
    assert_eq!(loss_lines, 2);
    assert!(run_a.join("checkpoints").join("step_000002.tvt").is_file());
    assert!(run_a.join("videos").join("clip_01.tvt").is_file());

    // Evaluation: one table, one row per run, reports written when asked.
    let eval_out = dir.path().join("eval");
    let table = ok(&[
        "evaluate",
        "--runs", &format!("{},{}", s(&run_a), s(&run_b)),
        "--rewards", &s(&rewards),
        "--corpus", &s(&corpus),
        "--out", &s(&eval_out),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two rows:\n{table}");
    assert!(lines[0].starts_with("run,face_sim"));
    assert!(lines[1].starts_with("reward-run,"));
    assert!(lines[2].starts_with("baseline-run,"));
    assert!(eval_out.join("report.csv").is_file());
    assert!(eval_out.join("report.json").is_file());

    // Evaluating a directory without clips is a dependency error.
    let empty = dir.path().join("no-clips");
    fs::create_dir_all(&empty).unwrap();
    let (exit, stderr) = code(&[
        "evaluate",
        "--runs", &s(&empty),
        "--rewards", &s(&rewards),
        "--corpus", &s(&corpus),
    ]);
    assert_eq!(exit, 3, "stderr: {stderr}");

    // Media export: one file per clip, deterministic bytes on re-export.
    let gif_a = dir.path().join("gif-a");
    let gif_b = dir.path().join("gif-b");
    ok(&["export", "--run", &s(&run_a), "--format", "gif", "--out", &s(&gif_a)]);
    ok(&["export", "--run", &s(&run_a), "--format", "gif", "--out", &s(&gif_b)]);
    assert!(gif_a.join("clip_00.gif").is_file() && gif_a.join("clip_01.gif").is_file());
    assert_eq!(
        fs::read(gif_a.join("clip_00.gif")).unwrap(),
        fs::read(gif_b.join("clip_00.gif")).unwrap()
    );
    let grid = dir.path().join("grid");
    ok(&["export", "--run", &s(&run_a), "--format", "png-grid", "--out", &s(&grid)]);
    assert!(grid.join("clip_00.png").is_file());

    // Resume picks up from the newest checkpoint and extends the history.
    ok(&[
        "personalize",
        "--denoiser", &s(&denoiser),
        "--rewards", &s(&rewards),
        "--corpus", &s(&corpus),
        "--identity", "0",
        "--out", &s(&run_a),
        "--resume",
        "--iterations", "4",
    ]);
    let loss_lines = fs::read_to_string(run_a.join("loss.jsonl")).unwrap().lines().count();
    assert_eq!(loss_lines, 4, "resume must append the new steps");
    assert!(run_a.join("checkpoints").join("step_000004.tvt").is_file());
}
