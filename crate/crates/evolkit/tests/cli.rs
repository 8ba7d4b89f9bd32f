mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evolkit::config::SelectionMode;
use evolkit::harness::Executor;
use evolkit::journal::{JournalWriter, Recorder};
use evolkit::manifest::save_trajectory;
use evolkit_core::{evolve, render_plan, retrace_trajectory, KnowledgeRecord};

fn evolkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evolkit"))
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Saves the drag-plan trajectory of `repeat` as `run<repeat>.json`.
fn trajectory(dir: &Path, repeat: usize) -> PathBuf {
    let task = &common::tasks(1)[0];
    let exec = common::executor()
        .execute(task, &common::drag_plan(), repeat)
        .unwrap();
    save_trajectory(&exec.trajectory, dir, &format!("run{repeat}.json")).unwrap()
}

#[test]
fn ingest_retrace_evolve_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("plan.md"), render_plan(&common::drag_plan())).unwrap();
    let task = common::tasks(1).remove(0);
    let o = evolkit(
        d,
        &[
            "--store",
            "kb",
            "store",
            "ingest",
            task.task_id.as_str(),
            "--instruction",
            common::INSTRUCTION,
            "--plan",
            "plan.md",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("{}: v1", task.task_id));

    // Record the model answers in-process; the CLI replays them.
    let manifest = trajectory(d, 0);
    let traj = evolkit::manifest::load_trajectory(&manifest, 15).unwrap();
    let model = Recorder::new(
        common::ScriptModel::default(),
        JournalWriter::open(&d.join("fx.jsonl")).unwrap(),
    );
    let stages = common::stages();
    let seq = retrace_trajectory(&traj, &model, &stages.retrace).unwrap();
    let v1 = KnowledgeRecord::web_search(
        task.task_id.clone(),
        common::INSTRUCTION,
        common::drag_plan(),
        "web-search",
    );
    evolve(&v1, &seq, &traj.producer_model, &model, &stages.critique).unwrap();

    let o = evolkit(
        d,
        &[
            "--fixture",
            "fx.jsonl",
            "retrace",
            "run0.json",
            "-o",
            "actions.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(
        stdout(&o).starts_with("Step 0:\n- Double-clicked the essay file"),
        "{}",
        stdout(&o)
    );
    assert!(d.join("actions.json").exists());

    let o = evolkit(
        d,
        &[
            "--store",
            "kb",
            "--fixture",
            "fx.jsonl",
            "evolve",
            task.task_id.as_str(),
            "--trajectory",
            "run0.json",
            "-o",
            "critique.txt",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("v1 -> v2"), "{}", stdout(&o));
    assert!(
        stdout(&o).contains("\"change\":\"modified\""),
        "{}",
        stdout(&o)
    );
    assert!(fs::read_to_string(d.join("critique.txt"))
        .unwrap()
        .contains("Press Ctrl+A"));

    let o = evolkit(
        d,
        &["--store", "kb", "store", "history", task.task_id.as_str()],
    );
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2, "{lines:?}");
    assert!(lines[0].starts_with("v1 WebSearch producer=web-search parent=-"));
    assert!(lines[1].starts_with("v2 Evolved producer=scripted parent=v1"));

    let o = evolkit(d, &["--store", "kb", "store", "export"]);
    let exported: Vec<KnowledgeRecord> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(exported.len(), 1);
    assert_eq!(exported[0].version, 2);
}

#[test]
fn run_evolve_matches_in_process_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tasks = common::tasks(4);
    let (fixture, recorded) = common::record_fixture(d, &tasks, SelectionMode::Random);
    common::seeded_store(&d.join("kb"), &tasks);
    fs::write(
        d.join("tasks.json"),
        serde_json::to_string_pretty(&tasks).unwrap(),
    )
    .unwrap();
    fs::write(
        d.join("evolkit.toml"),
        format!(
            "store = \"kb\"\nworkers = 2\nseed = 7\n\n[gateway]\nfixtures = [{:?}]\n\n[executor]\nrules = [{{ keyword = \"drag\", success = false }}, {{ keyword = \"Ctrl+A\", success = true }}]\n",
            fixture.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let o = evolkit(
        d,
        &[
            "--config",
            "evolkit.toml",
            "run",
            "--tasks",
            "tasks.json",
            "--evolve",
            "-o",
            "report.json",
            "--markdown",
            "report.md",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(d.join("report.json")).unwrap(),
        recorded.to_json()
    );
    let md = fs::read_to_string(d.join("report.md")).unwrap();
    assert!(md.contains("Std convention: sample."), "{md}");
    assert!(
        md.contains("| After evolution | 100.00 | 100.00 | 0.00 | 100.00 |"),
        "{md}"
    );

    let o = evolkit(d, &["stats", "report.json"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("std convention: sample\n"));

    // Benchmark only: knowledge is now v2 everywhere.
    let o = evolkit(
        d,
        &["--config", "evolkit.toml", "run", "--tasks", "tasks.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["aggregate"]["overall"]["avg"], 100.0);
}

#[test]
fn stats_reports_convention() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("r.json"), "[28.1, 28.5, 28.6]").unwrap();
    let o = evolkit(d, &["stats", "r.json"]);
    assert_eq!(
        stdout(&o),
        "std convention: sample\nn=3 min=28.10 max=28.60 std=0.26 avg=28.40\n"
    );
    let o = evolkit(d, &["--std", "population", "stats", "r.json"]);
    assert_eq!(
        stdout(&o),
        "std convention: population\nn=3 min=28.10 max=28.60 std=0.22 avg=28.40\n"
    );
}

#[test]
fn random_select_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for r in 0..2 {
        trajectory(d, r);
    }
    fs::write(d.join("plan.md"), render_plan(&common::drag_plan())).unwrap();
    let args = [
        "--seed",
        "3",
        "select",
        "run0.json",
        "run1.json",
        "--instruction",
        "x",
        "--plan",
        "plan.md",
    ];
    let a = evolkit(d, &args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(stdout(&a).ends_with("(random)\n"));
    assert_eq!(stdout(&a), stdout(&evolkit(d, &args)));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = trajectory(d, 0);
    fs::write(d.join("plan.md"), render_plan(&common::drag_plan())).unwrap();
    fs::write(d.join("empty.jsonl"), "").unwrap();

    assert_eq!(code(&evolkit(d, &[])), 2);
    fs::write(d.join("bad.toml"), "wokers = 3\n").unwrap();
    assert_eq!(
        code(&evolkit(d, &["--config", "bad.toml", "store", "freeze"])),
        2
    );
    assert_eq!(code(&evolkit(d, &["--workers", "0", "store", "freeze"])), 2);
    assert_eq!(
        code(&evolkit(d, &["retrace", "run0.json"])),
        2,
        "replay needs a fixture"
    );

    let o = evolkit(d, &["--fixture", "empty.jsonl", "retrace", "run0.json"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("no fixture entry"));

    fs::write(d.join("rates.txt"), "1 2 three").unwrap();
    assert_eq!(code(&evolkit(d, &["stats", "rates.txt"])), 4);
    assert_eq!(code(&evolkit(d, &["stats", "missing.txt"])), 3);

    let o = evolkit(
        d,
        &[
            "--store",
            "kb",
            "--fixture",
            "empty.jsonl",
            "evolve",
            "nobody",
            "--trajectory",
            "run0.json",
        ],
    );
    assert_eq!(code(&o), 6, "{}", stderr(&o));

    let o = evolkit(
        d,
        &[
            "--selection",
            "completion",
            "--fixture",
            "empty.jsonl",
            "select",
            "run0.json",
            "run0.json",
            "--instruction",
            "x",
            "--plan",
            "plan.md",
        ],
    );
    assert_eq!(code(&o), 7, "{}", stderr(&o));

    // Remove one screenshot the manifest names.
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let shot = m["steps"][1]["post"].as_str().unwrap();
    fs::remove_file(d.join(shot)).unwrap();
    let o = evolkit(d, &["--fixture", "empty.jsonl", "retrace", "run0.json"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(shot), "{}", stderr(&o));
}
