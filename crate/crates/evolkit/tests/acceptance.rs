//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p evolkit --test acceptance`.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use evolkit::config::SelectionMode;
use evolkit::store::{escape_task, record_hash, KnowledgeStore};
use evolkit_core::prompts::RETRACE;
use evolkit_core::{
    compute_ssr, lint_critique, parse_critique_output, parse_retrace_output, render_critique,
    run_stats, select_random, shard_ranges, KnowledgeRecord, Provenance, RetraceOutcome, SsrRecord,
    StdConvention, TaskId,
};

const RETRACE_BUDGET: Duration = Duration::from_secs(1);
const AVG_TOL: f64 = 0.05;
const STD_TOL: f64 = 0.01;
const DETERMINISM_BUDGET: Duration = Duration::from_secs(60);
const DETERMINISM_TASKS: usize = 30;
const SNAPSHOT_WRITES: usize = 100;
const DRAWS: u64 = 30_000;
const FREQ_TOL: f64 = 0.02;

/// Set in the child process that keeps writing until it is killed.
const WRITER_ENV: &str = "EVOLKIT_ACCEPTANCE_WRITER";

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// The OUTPUT blocks of the retrace prompt's examples, exactly as embedded.
fn few_shot_outputs() -> Vec<&'static str> {
    RETRACE
        .split("<BEGIN_EXAMPLE>")
        .skip(1)
        .map(|ex| {
            let body = &ex[ex.find("OUTPUT:").expect("OUTPUT label")..];
            let body = &body[body.find('\n').unwrap() + 1..];
            &body[..body.find("<END_EXAMPLE>").expect("end marker")]
        })
        .collect()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let outputs = few_shot_outputs();
    ensure(outputs.len() == 3, || {
        format!("found {} examples", outputs.len())
    })?;
    let parsed: Vec<_> = outputs
        .iter()
        .map(|o| parse_retrace_output(0, o).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let elapsed = start.elapsed();
    match &parsed[0].outcome {
        RetraceOutcome::Operations(ops) => {
            ensure(ops.len() == 4, || {
                format!("example 1 has {} operations", ops.len())
            })?;
            ensure(
                ops[0].action == "Pressed Ctrl+H in the VS Code editor",
                || format!("{:?}", ops[0]),
            )?;
            ensure(
                ops[0].consequence == "opening the Find/Replace panel",
                || format!("{:?}", ops[0]),
            )?;
        }
        other => return Err(format!("example 1 parsed as {other:?}")),
    }
    ensure(parsed[1].outcome == RetraceOutcome::NoOp, || {
        format!("{:?}", parsed[1])
    })?;
    ensure(parsed[1].before_description.contains("10:01"), || {
        parsed[1].before_description.clone()
    })?;
    ensure(parsed[2].outcome == RetraceOutcome::Indeterminate, || {
        format!("{:?}", parsed[2])
    })?;
    ensure(elapsed < RETRACE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "4 operations / NoOp / Indeterminate in {elapsed:?}"
    ))
}

fn criterion_2() -> Check {
    let corpus = common::critique_corpus();
    ensure(corpus.len() >= 10, || {
        format!("only {} documents", corpus.len())
    })?;
    ensure(corpus.iter().any(|(n, _)| n.contains("capitalize")), || {
        "capitalize document missing".into()
    })?;
    for (name, doc) in &corpus {
        let report = lint_critique(doc).map_err(|v| format!("{name}: {v:?}"))?;
        let again =
            parse_critique_output(&render_critique(&report)).map_err(|e| format!("{name}: {e}"))?;
        ensure(again == report, || format!("{name}: re-parse differs"))?;
    }
    let cases = common::mutation_cases();
    ensure(cases.len() >= 10, || {
        format!("only {} mutations", cases.len())
    })?;
    for (name, doc, rule) in &cases {
        match lint_critique(doc) {
            Err(v) if v.len() == 1 && v[0].rule == *rule => {}
            other => return Err(format!("{name}: expected only {rule:?}, got {other:?}")),
        }
    }
    Ok(format!(
        "{} documents round-trip, {} mutations flagged",
        corpus.len(),
        cases.len()
    ))
}

fn criterion_3() -> Check {
    let a = run_stats(&[18.3, 19.4, 20.8], StdConvention::Sample).ok_or("no stats")?;
    let b = run_stats(&[28.1, 28.5, 28.6], StdConvention::Sample).ok_or("no stats")?;
    ensure((a.avg - 19.5).abs() <= AVG_TOL, || format!("avg {}", a.avg))?;
    ensure((b.avg - 28.4).abs() <= AVG_TOL, || format!("avg {}", b.avg))?;
    ensure((b.std - 0.26).abs() <= STD_TOL, || format!("std {}", b.std))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = dir.path().join("rates.txt");
    fs::write(&file, "28.1 28.5 28.6\n").map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_evolkit"))
        .arg("stats")
        .arg(&file)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || {
        format!("stats exited {:?}", out.status)
    })?;
    ensure(stdout.contains("std convention: sample"), || {
        stdout.to_string()
    })?;
    ensure(stdout.contains("std=0.26 avg=28.40"), || stdout.to_string())?;
    Ok(format!(
        "avg {:.2} and {:.2}, sample std {:.4}",
        a.avg, b.avg, b.std
    ))
}

/// 20 solvable tasks of which `hits` were solved by the selected run, plus
/// 5 unsolvable ones.
fn ssr_fixture(hits: usize) -> Vec<SsrRecord> {
    (0..25)
        .map(|i| match i {
            i if i < hits => SsrRecord::new(true, true),
            i if i < 20 => SsrRecord::new(false, true),
            _ => SsrRecord::new(false, false),
        })
        .map(Option::unwrap)
        .collect()
}

fn criterion_4() -> Check {
    let a = compute_ssr(&ssr_fixture(14));
    let b = compute_ssr(&ssr_fixture(17));
    ensure(a.ratio() == Some(0.70), || format!("{a:?}"))?;
    ensure(b.ratio() == Some(0.85), || format!("{b:?}"))?;
    let none = compute_ssr(&[SsrRecord::new(false, false).unwrap(); 4]);
    ensure(none.n_solv == 0 && none.ratio().is_none(), || {
        format!("{none:?}")
    })?;
    Ok("0.70, 0.85 and undefined at zero solvable".into())
}

fn criterion_5() -> Check {
    let sizes: Vec<usize> = shard_ranges(369, 30)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| r.len())
        .collect();
    ensure(sizes.len() == 30, || format!("{} shards", sizes.len()))?;
    ensure(sizes.iter().all(|s| *s == 12 || *s == 13), || {
        format!("{sizes:?}")
    })?;
    ensure(sizes.iter().sum::<usize>() == 369, || format!("{sizes:?}"))?;
    for n in 0..=500 {
        for w in 1..=64 {
            let s: Vec<usize> = shard_ranges(n, w)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|r| r.len())
                .collect();
            let (lo, hi) = (
                s.iter().min().copied().unwrap_or(0),
                s.iter().max().copied().unwrap_or(0),
            );
            ensure(hi - lo <= 1 && s.iter().sum::<usize>() == n, || {
                format!("n={n} w={w}: {s:?}")
            })?;
        }
    }
    Ok("369 over 30 gives 12/13; sweep n<=500, w<=64 balanced".into())
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tasks = common::tasks(DETERMINISM_TASKS);
    let mut checked = 0;
    for mode in [SelectionMode::Random, SelectionMode::Completion] {
        let sub = dir.path().join(format!("{mode:?}"));
        fs::create_dir_all(&sub).map_err(|e| e.to_string())?;
        let (fixture, _) = common::record_fixture(&sub, &tasks, mode);
        let mut first: Option<String> = None;
        for workers in [1, 4, 30] {
            let (_, report) = common::replay(&sub, &fixture, &tasks, mode, workers);
            let json = report.to_json();
            match &first {
                None => first = Some(json),
                Some(f) => ensure(*f == json, || {
                    format!("{mode:?}: workers={workers} report differs")
                })?,
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < DETERMINISM_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{checked} replays byte-identical across workers 1/4/30 in {elapsed:.1?}"
    ))
}

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tasks = common::tasks(6);
    let (fixture, _) = common::record_fixture(dir.path(), &tasks, SelectionMode::Random);
    let (store, report) = common::replay(dir.path(), &fixture, &tasks, SelectionMode::Random, 3);
    let p1 = report
        .phase1
        .aggregate
        .overall
        .ok_or("no phase-1 stats")?
        .avg;
    let p2 = report
        .phase2
        .aggregate
        .overall
        .ok_or("no phase-2 stats")?
        .avg;
    ensure(p1 == 0.0 && p2 == 100.0, || {
        format!("phase 1 {p1}%, phase 2 {p2}%")
    })?;
    for t in &report.tasks {
        let h = store.history(&t.task_id).map_err(|e| e.to_string())?;
        ensure(
            h.len() == 2
                && h[0].provenance == Provenance::WebSearch
                && h[1].provenance == Provenance::Evolved,
            || {
                format!(
                    "{}: chain {:?}",
                    t.task_id,
                    h.iter().map(|r| r.provenance).collect::<Vec<_>>()
                )
            },
        )?;
        let step2 = &h[1].plan.steps()[1];
        ensure(step2.actions.iter().any(|a| a.contains("Ctrl+A")), || {
            format!("{}: {step2:?}", t.task_id)
        })?;
        ensure(
            t.root_causes.contains(&'a') && t.mitigations.iter().any(|m| m.0 == 'a'),
            || {
                format!(
                    "{}: causes {:?} mitigations {:?}",
                    t.task_id, t.root_causes, t.mitigations
                )
            },
        )?;
    }
    Ok(format!(
        "{p1:.0}% -> {p2:.0}%, v1(WebSearch) -> v2(Evolved), cause a mitigated"
    ))
}

fn plan_record(task: &str) -> KnowledgeRecord {
    KnowledgeRecord::web_search(
        TaskId::new(task),
        common::INSTRUCTION,
        common::drag_plan(),
        "web-search",
    )
}

/// Child process body: appends versions to a few tasks until killed.
fn writer_loop(root: &Path) -> ! {
    let store = KnowledgeStore::open(root).expect("open store");
    let ids: Vec<String> = (0..3).map(|i| format!("crash/{i}")).collect();
    for id in &ids {
        store.put(&plan_record(id)).expect("put v1");
    }
    println!("ready");
    let mut k = 0usize;
    loop {
        let id = TaskId::new(ids[k % ids.len()].as_str());
        let latest = store.get_latest(&id).expect("latest");
        store
            .put(&latest.successor(common::drag_plan(), format!("writer-{k}"), None))
            .expect("put");
        k += 1;
    }
}

fn check_consistent(store: &KnowledgeStore) -> Result<usize, String> {
    let mut n = 0;
    for task in store.tasks().map_err(|e| e.to_string())? {
        let h = store
            .stored_history(&task)
            .map_err(|e| format!("{task}: {e}"))?;
        for (i, s) in h.iter().enumerate() {
            ensure(s.record.version as usize == i + 1, || {
                format!("{task}: version gap at {i}")
            })?;
            ensure(s.hash == record_hash(&s.record), || {
                format!("{task}: hash mismatch")
            })?;
        }
        n += h.len();
    }
    Ok(n)
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Killed writer process.
    let crash_root = dir.path().join("crash");
    let mut child = Command::new(std::env::current_exe().map_err(|e| e.to_string())?)
        .env(WRITER_ENV, &crash_root)
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut ready = String::new();
    std::io::BufRead::read_line(
        &mut std::io::BufReader::new(child.stdout.take().unwrap()),
        &mut ready,
    )
    .map_err(|e| e.to_string())?;
    std::thread::sleep(Duration::from_millis(300));
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;
    let store = KnowledgeStore::open(&crash_root).map_err(|e| e.to_string())?;
    let records = check_consistent(&store)?;
    let id = TaskId::new("crash/0");
    let latest = store.get_latest(&id).map_err(|e| e.to_string())?;
    store
        .put(&latest.successor(common::drag_plan(), "after-crash", None))
        .map_err(|e| format!("store not writable after kill: {e}"))?;

    // Temp file left between write and rename, and a torn append.
    let rec = plan_record("torn");
    store.put(&rec).map_err(|e| e.to_string())?;
    let journal = crash_root
        .join("tasks")
        .join(format!("{}.jsonl", escape_task(&rec.task_id)));
    let full = fs::read_to_string(&journal).map_err(|e| e.to_string())?;
    fs::write(
        journal.with_extension("jsonl.4242.tmp"),
        &full[..full.len() / 2],
    )
    .map_err(|e| e.to_string())?;
    fs::write(&journal, format!("{full}{}", &full[..full.len() / 2])).map_err(|e| e.to_string())?;
    ensure(
        store.history(&rec.task_id).map_err(|e| e.to_string())? == vec![rec.clone()],
        || "torn record visible".into(),
    )?;
    check_consistent(&store)?;

    // Snapshot isolation.
    let snap = store.freeze_snapshot().map_err(|e| e.to_string())?;
    let tasks: Vec<TaskId> = snap.records.keys().cloned().collect();
    let before: Vec<_> = tasks
        .iter()
        .map(|t| store.read_at(&snap, t))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for k in 0..SNAPSHOT_WRITES {
        let t = &tasks[k % tasks.len()];
        let latest = store.get_latest(t).map_err(|e| e.to_string())?;
        store
            .put(&latest.successor(common::drag_plan(), format!("later-{k}"), None))
            .map_err(|e| e.to_string())?;
    }
    let after: Vec<_> = tasks
        .iter()
        .map(|t| store.read_at(&snap, t))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(before == after, || "snapshot reads changed".into())?;
    store.verify_snapshot(&snap).map_err(|e| e.to_string())?;
    ensure(
        store
            .load_snapshot(&snap.snapshot_id)
            .map_err(|e| e.to_string())?
            == snap,
        || "snapshot file changed".into(),
    )?;
    Ok(format!(
        "{records} records intact after kill, torn writes invisible, snapshot stable over {SNAPSHOT_WRITES} writes"
    ))
}

fn criterion_9() -> Check {
    let mut counts = [0u64; 3];
    for seed in 0..DRAWS {
        counts[select_random(3, seed).map_err(|e| e.to_string())?] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / DRAWS as f64).collect();
    ensure(
        freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= FREQ_TOL),
        || format!("{freqs:?}"),
    )?;
    Ok(format!(
        "frequencies {:.4} / {:.4} / {:.4}",
        freqs[0], freqs[1], freqs[2]
    ))
}

fn main() -> ExitCode {
    if let Some(root) = std::env::var_os(WRITER_ENV) {
        writer_loop(Path::new(&root));
    }
    let criteria: [Criterion; 9] = [
        ("retrace grammar accepts the few-shot outputs", criterion_1),
        (
            "critique corpus round-trips, mutations flagged",
            criterion_2,
        ),
        ("statistics anchors", criterion_3),
        ("selection success rate", criterion_4),
        ("task sharding", criterion_5),
        ("evolution report independent of workers", criterion_6),
        ("drag-plan improvement and version chain", criterion_7),
        ("crash safety and snapshot isolation", criterion_8),
        ("random selection uniformity", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
