//! Shared fixtures: the capitalize-every-word scenario, a scripted chat
//! model that answers by prompt content, and the critique corpus.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use evolkit::config::{SelectionMode, Stages};
use evolkit::harness::{EvolutionSettings, ScriptedExecutor};
use evolkit::store::KnowledgeStore;
use evolkit_core::{
    BackendKind, ChatModel, CompletionRequest, CompletionResult, GatewayError, KnowledgePlan,
    KnowledgeRecord, Part, PlanStep, StageSettings, StdConvention, TaskId, TaskSpec,
};

pub const INSTRUCTION: &str =
    "Capitalize the first letter of every word in the open Writer document";

pub fn drag_plan() -> KnowledgePlan {
    KnowledgePlan::new(vec![
        PlanStep::new(
            1,
            "Open the document",
            ["Double-click the essay file in the file manager"],
            "Load the text in LibreOffice Writer",
        ),
        PlanStep::new(
            2,
            "Select all text",
            [
                "Click before the first word",
                "Drag the mouse to the last word",
            ],
            "Select the entire document",
        ),
        PlanStep::new(
            3,
            "Capitalize every word",
            ["Open Format > Text > Capitalize Every Word"],
            "Apply title case to the selection",
        ),
        PlanStep::new(
            4,
            "Save the document",
            ["Press Ctrl+S and choose Keep Current Format"],
            "Persist the change in the original format",
        ),
    ])
    .unwrap()
}

/// The critique answer for the drag plan: step 2 becomes Ctrl+A.
pub const CTRL_A_CRITIQUE: &str = include_str!("../fixtures/critique/01_capitalize_ctrl_a.txt");

pub fn tasks(n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| {
            let group = if i % 3 == 0 { "Daily" } else { "Office" };
            TaskSpec::new(format!("writer-capitalize-{i:02}"), INSTRUCTION, group).unwrap()
        })
        .collect()
}

pub fn executor() -> ScriptedExecutor {
    ScriptedExecutor::with_rules(&[("drag", false), ("Ctrl+A", true)])
}

pub fn stages() -> Stages {
    Stages {
        retrace: StageSettings::new("gpt-4o"),
        critique: StageSettings::new("o3"),
        selection: StageSettings::new("o3"),
    }
}

pub fn settings(workers: usize, selection: SelectionMode) -> EvolutionSettings {
    EvolutionSettings {
        repeats: 3,
        workers,
        selection,
        seed: 7,
        std: StdConvention::Sample,
        stages: stages(),
    }
}

/// Opens a store under `root` holding v1 web knowledge for every task.
pub fn seeded_store(root: &Path, tasks: &[TaskSpec]) -> KnowledgeStore {
    let store = KnowledgeStore::open(root).unwrap();
    for t in tasks {
        let rec = KnowledgeRecord::web_search(
            t.task_id.clone(),
            t.instruction.clone(),
            drag_plan(),
            "web-search",
        );
        store.put(&rec).unwrap();
    }
    store
}

/// Answers retrace, critique and selection prompts by their content.
#[derive(Default)]
pub struct ScriptModel {
    pub calls: AtomicUsize,
}

impl ScriptModel {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn first_text(req: &CompletionRequest) -> &str {
    req.messages
        .first()
        .and_then(|m| {
            m.parts.iter().find_map(|p| {
                if let Part::Text(t) = p {
                    Some(t.as_str())
                } else {
                    None
                }
            })
        })
        .unwrap_or("")
}

fn executed_code(prompt: &str) -> &str {
    prompt
        .split("```python")
        .nth(1)
        .and_then(|s| s.lines().map(str::trim).find(|l| !l.is_empty()))
        .unwrap_or("")
}

pub fn retrace_answer(code: &str) -> String {
    let op = if code.contains("Drag") {
        "- Dragged the mouse across the text, selecting only the section from \"Question Two\" to \"so important\""
    } else if code.contains("Ctrl+A") {
        "- Pressed Ctrl+A in the document, highlighting the whole text"
    } else if code.contains("Capitalize") {
        "- Chose Format > Text > Capitalize Every Word, changing the selected words to title case"
    } else if code.contains("Ctrl+S") {
        "- Pressed Ctrl+S and confirmed Keep Current Format, saving the document"
    } else {
        "- Double-clicked the essay file, opening it in LibreOffice Writer"
    };
    format!("[A] BEFORE    \nLibreOffice Writer shows the essay document.    \n\n[B] OPERATIONS    \n{op}    \n")
}

impl ChatModel for ScriptModel {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = first_text(request);
        let text = if prompt.contains("[B] OPERATIONS") {
            retrace_answer(executed_code(prompt))
        } else if prompt.contains("SECTION E. REFINED PLAN") {
            CTRL_A_CRITIQUE.to_owned()
        } else {
            "Pair 1 Score: 4\nPair 2 Score: 6\nPair 3 Score: 5\nBest Pair: 2\n".to_owned()
        };
        Ok(CompletionResult {
            text,
            request_digest: request.digest(),
            backend: BackendKind::Live,
        })
    }
}

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/critique")
}

/// `(file name, contents)` of every conforming critique document.
pub fn critique_corpus() -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(&p).unwrap(),
            )
        })
        .collect()
}

pub fn task_id(s: &str) -> TaskId {
    TaskId::new(s)
}

fn refined_plan_start(doc: &str) -> usize {
    doc.rfind("REFINED PLAN:").expect("section E") + "REFINED PLAN:".len()
}

/// Replaces the first action bullet of the refined plan.
fn replace_first_action(doc: &str, action: &str) -> String {
    let start = refined_plan_start(doc);
    let mut out = String::from(&doc[..start]);
    let mut done = false;
    for line in doc[start..].split_inclusive('\n') {
        let t = line.trim_start();
        if !done && t.starts_with("- ") && !t.starts_with("- Purpose") {
            let indent = &line[..line.len() - t.len()];
            out.push_str(&format!("{indent}- {action}\n"));
            done = true;
        } else {
            out.push_str(line);
        }
    }
    assert!(done, "no action bullet");
    out
}

/// Pads the refined plan to 16 steps.
fn sixteen_steps(doc: &str, steps: usize) -> String {
    let last = doc[refined_plan_start(doc)..]
        .lines()
        .rfind(|l| l.trim_start().starts_with(&format!("{steps}. **")))
        .expect("last step");
    let indent = &last[..last.len() - last.trim_start().len()];
    let mut out = doc.trim_end().to_owned();
    out.push('\n');
    for n in steps + 1..=16 {
        out.push_str(&format!(
            "{indent}{n}. **Extra step {n}**:\n{indent}   - Click button {n}\n{indent}   - Purpose: Pad the plan\n"
        ));
    }
    out
}

/// Swaps the first non-empty root-cause value for an unknown letter.
fn unknown_cause(doc: &str) -> Option<String> {
    let key = "Root Cause (letters, commas allowed):";
    let mut out = String::new();
    let mut done = false;
    for line in doc.split_inclusive('\n') {
        match line.find(key) {
            Some(i) if !done && line[i + key.len()..].trim() != "None" => {
                out.push_str(&line[..i + key.len()]);
                out.push_str(" z\n");
                done = true;
            }
            _ => out.push_str(line),
        }
    }
    done.then_some(out)
}

/// `(case name, document, expected rule)` mutations of every corpus document.
pub fn mutation_cases() -> Vec<(String, String, evolkit_core::ViolationRule)> {
    use evolkit_core::{lint_critique, ViolationRule};
    let mut cases = Vec::new();
    for (name, doc) in critique_corpus() {
        let steps = lint_critique(&doc)
            .expect("corpus document conforms")
            .refined_plan
            .len();
        cases.push((
            format!("{name}: 16 steps"),
            sixteen_steps(&doc, steps),
            ViolationRule::PlanStepCount,
        ));
        cases.push((
            format!("{name}: passive step"),
            replace_first_action(&doc, "Verify the previous step finished"),
            ViolationRule::PassiveStep,
        ));
        cases.push((
            format!("{name}: shell prompt"),
            replace_first_action(&doc, "$ sudo apt install gimp"),
            ViolationRule::ShellPrompt,
        ));
        if let Some(m) = unknown_cause(&doc) {
            cases.push((
                format!("{name}: unknown cause letter"),
                m,
                ViolationRule::UnknownRootCause,
            ));
        }
    }
    cases
}

/// Runs one evolution cycle against [`ScriptModel`] through a recorder,
/// leaving the fixture journal at `dir/fixture.jsonl`.
pub fn record_fixture(
    dir: &Path,
    tasks: &[TaskSpec],
    selection: SelectionMode,
) -> (PathBuf, evolkit::report::EvolutionReport) {
    use evolkit::journal::{JournalWriter, Recorder};
    let fixture = dir.join("fixture.jsonl");
    let store = seeded_store(&dir.join("record-store"), tasks);
    let model = Recorder::new(
        ScriptModel::default(),
        JournalWriter::open(&fixture).unwrap(),
    );
    let report = evolkit::harness::evolution_loop(
        tasks,
        &executor(),
        &model,
        &store,
        &settings(4, selection),
    )
    .unwrap();
    (fixture, report)
}

/// Replays the fixture on a fresh store with `workers` threads.
pub fn replay(
    dir: &Path,
    fixture: &Path,
    tasks: &[TaskSpec],
    selection: SelectionMode,
    workers: usize,
) -> (KnowledgeStore, evolkit::report::EvolutionReport) {
    let store = seeded_store(&dir.join(format!("replay-{workers}-{selection:?}")), tasks);
    let model = evolkit::journal::load_replay(fixture).unwrap();
    let report = evolkit::harness::evolution_loop(
        tasks,
        &executor(),
        &model,
        &store,
        &settings(workers, selection),
    )
    .unwrap();
    (store, report)
}
