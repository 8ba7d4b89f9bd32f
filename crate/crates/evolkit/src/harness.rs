//! Parallel benchmark runs and the run → select → retrace → critique →
//! store → re-run evolution loop.
//!
//! Tasks are split into contiguous shards, one per worker thread. Every
//! result is keyed by `(task_id, repeat_index)` and sorted before it leaves
//! this module, so outputs do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::thread;

use evolkit_core::hash::CanonicalHasher;
use evolkit_core::selection::SelectionCandidate;
use evolkit_core::{
    aggregate, compute_ssr, diff_plans, evolve, render_action_list, retrace_trajectory,
    select_completion, select_random, shard, ChatModel, KnowledgePlan, ObjectiveActionSequence,
    RunOutcome, Screenshot, Selection, SelectionMethod, SsrRecord, StdConvention, Step, TaskId,
    TaskSpec, Trajectory,
};
use serde::{Deserialize, Serialize};

use crate::config::{SelectionMode, Stages};
use crate::report::{EvolutionReport, PhaseSummary, TaskEvolution, REPORT_FORMAT};
use crate::store::{KnowledgeStore, Snapshot, StoreError};

/// What one execution of a task produced.
#[derive(Debug, Clone)]
pub struct Execution {
    pub trajectory: Trajectory,
    pub success: bool,
    /// Executor-reported duration; simulated executors report model time.
    pub wall_time_ms: u64,
}

/// Runs a task under a plan. Stand-in boundary for a real agent and
/// environment.
pub trait Executor: Send + Sync {
    fn execute(
        &self,
        task: &TaskSpec,
        plan: &KnowledgePlan,
        repeat: usize,
    ) -> Result<Execution, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keyword: String,
    pub success: bool,
}

/// Deterministic simulated executor.
///
/// The verdict is taken from the first rule whose keyword occurs
/// (case-insensitively) in the plan's actions, else `default_success`.
/// `overrides` pin individual `(task, repeat)` verdicts. One synthetic step
/// is produced per plan step, up to the task's step budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedExecutor {
    pub rules: Vec<KeywordRule>,
    pub default_success: bool,
    pub step_ms: u64,
    pub overrides: Vec<Override>,
    /// Tasks whose execution reports an error (e.g. a VM timeout).
    pub failing: BTreeSet<TaskId>,
    /// Tasks whose execution panics.
    pub panicking: BTreeSet<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub task_id: TaskId,
    pub repeat: usize,
    pub success: bool,
}

impl Default for ScriptedExecutor {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default_success: false,
            step_ms: 1000,
            overrides: Vec::new(),
            failing: BTreeSet::new(),
            panicking: BTreeSet::new(),
        }
    }
}

impl ScriptedExecutor {
    pub fn with_rules(rules: &[(&str, bool)]) -> Self {
        Self {
            rules: rules
                .iter()
                .map(|(k, s)| KeywordRule {
                    keyword: (*k).into(),
                    success: *s,
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn verdict(&self, task: &TaskSpec, plan: &KnowledgePlan, repeat: usize) -> bool {
        if let Some(o) = self
            .overrides
            .iter()
            .find(|o| o.task_id == task.task_id && o.repeat == repeat)
        {
            return o.success;
        }
        let text = plan.action_text().to_lowercase();
        self.rules
            .iter()
            .find(|r| text.contains(&r.keyword.to_lowercase()))
            .map_or(self.default_success, |r| r.success)
    }
}

/// Synthetic screen bytes; the same state always yields the same image.
fn screen(task: &TaskId, index: usize, state: &str) -> Screenshot {
    Screenshot::new(format!("screen|{task}|{index}|{state}").into_bytes()).expect("non-empty")
}

impl Executor for ScriptedExecutor {
    fn execute(
        &self,
        task: &TaskSpec,
        plan: &KnowledgePlan,
        repeat: usize,
    ) -> Result<Execution, String> {
        if self.panicking.contains(&task.task_id) {
            panic!("scripted panic in task {}", task.task_id);
        }
        if self.failing.contains(&task.task_id) {
            return Err(format!("task {} timed out", task.task_id));
        }
        let success = self.verdict(task, plan, repeat);
        let outcome = if success { "ok" } else { "fail" };
        let n = plan.len().min(task.max_steps);
        let steps = plan.steps()[..n]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let state = |k: usize| {
                    format!(
                        "{}:{outcome}",
                        if k == 0 {
                            "start"
                        } else {
                            &plan.steps()[k - 1].subtask
                        }
                    )
                };
                Step::new(
                    i,
                    screen(&task.task_id, i, &state(i)),
                    screen(&task.task_id, i + 1, &state(i + 1)),
                    format!("agent.act({:?})", s.actions.join("; ")),
                )
            })
            .collect();
        let mut trajectory = Trajectory::new(
            task.task_id.clone(),
            task.instruction.clone(),
            steps,
            "scripted",
            task.max_steps,
        )
        .map_err(|e| e.to_string())?;
        trajectory.terminal_success = Some(success);
        Ok(Execution {
            trajectory,
            success,
            wall_time_ms: self.step_ms * n as u64,
        })
    }
}

/// One `(task, repeat)` result with its trajectory, if any.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub outcome: RunOutcome,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("worker count must be at least 1")]
    InvalidWorkers,
    #[error("completion selection needs exactly 3 repeats, got {0}")]
    SelectionArity(usize),
    #[error("task {0} has no stored knowledge")]
    MissingKnowledge(TaskId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Plans pinned by a snapshot, read once before any task runs.
pub fn pinned_plans(
    store: &KnowledgeStore,
    snap: &Snapshot,
    tasks: &[TaskSpec],
) -> Result<BTreeMap<TaskId, KnowledgePlan>, HarnessError> {
    tasks
        .iter()
        .map(|t| match store.read_at(snap, &t.task_id) {
            Ok(r) => Ok((t.task_id.clone(), r.plan)),
            Err(StoreError::NotInSnapshot(id)) => Err(HarnessError::MissingKnowledge(id)),
            Err(e) => Err(e.into()),
        })
        .collect()
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| (*s).to_owned())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "executor panicked".into())
}

fn run_one(
    executor: &dyn Executor,
    task: &TaskSpec,
    plan: &KnowledgePlan,
    repeat: usize,
) -> RunRecord {
    let failed = |error: String| RunRecord {
        outcome: RunOutcome {
            task_id: task.task_id.clone(),
            repeat_index: repeat,
            success: false,
            trajectory: None,
            wall_time_ms: 0,
            error: Some(error),
        },
        trajectory: None,
    };
    match panic::catch_unwind(AssertUnwindSafe(|| executor.execute(task, plan, repeat))) {
        Ok(Ok(exec)) => RunRecord {
            outcome: RunOutcome {
                task_id: task.task_id.clone(),
                repeat_index: repeat,
                success: exec.success,
                trajectory: Some(exec.trajectory.digest()),
                wall_time_ms: exec.wall_time_ms,
                error: None,
            },
            trajectory: Some(exec.trajectory),
        },
        Ok(Err(e)) => failed(e),
        Err(p) => failed(format!("panic: {}", panic_message(p.as_ref()))),
    }
}

/// Maps `f` over `items` on `workers` threads, one contiguous shard each,
/// and returns results in input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Result<Vec<R>, HarnessError> {
    let shards = shard(items, workers).map_err(|_| HarnessError::InvalidWorkers)?;
    if shards.len() <= 1 {
        return Ok(items.iter().map(&f).collect());
    }
    let f = &f;
    Ok(thread::scope(|s| {
        let handles: Vec<_> = shards
            .into_iter()
            .map(|chunk| s.spawn(move || chunk.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap_or_else(|p| panic::resume_unwind(p)))
            .collect()
    }))
}

/// Runs every task `repeats` times against pinned plans. Executor errors
/// and panics become failed outcomes; the batch always completes.
pub fn run_benchmark(
    tasks: &[TaskSpec],
    repeats: usize,
    executor: &dyn Executor,
    workers: usize,
    plans: &BTreeMap<TaskId, KnowledgePlan>,
) -> Result<Vec<RunRecord>, HarnessError> {
    let mut out = Vec::with_capacity(tasks.len() * repeats);
    for repeat in 0..repeats {
        out.extend(par_map(tasks, workers, |task| {
            match plans.get(&task.task_id) {
                Some(plan) => run_one(executor, task, plan, repeat),
                None => RunRecord {
                    outcome: RunOutcome {
                        task_id: task.task_id.clone(),
                        repeat_index: repeat,
                        success: false,
                        trajectory: None,
                        wall_time_ms: 0,
                        error: Some("no knowledge for task".into()),
                    },
                    trajectory: None,
                },
            }
        })?);
    }
    out.sort_by(|a, b| {
        (&a.outcome.task_id, a.outcome.repeat_index)
            .cmp(&(&b.outcome.task_id, b.outcome.repeat_index))
    });
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvolutionSettings {
    pub repeats: usize,
    pub workers: usize,
    pub selection: SelectionMode,
    pub seed: u64,
    pub std: StdConvention,
    pub stages: Stages,
}

/// Per-task seed for random selection, independent of scheduling.
pub fn selection_seed(seed: u64, task: &TaskId) -> u64 {
    let mut h = CanonicalHasher::new("evolkit.selection-seed.v1");
    h.u64(seed).str(task.as_str());
    h.finish().prefix_u64()
}

pub fn groups_of(tasks: &[TaskSpec]) -> BTreeMap<TaskId, String> {
    tasks
        .iter()
        .map(|t| (t.task_id.clone(), t.group.clone()))
        .collect()
}

pub fn summarize(
    records: &[RunRecord],
    tasks: &[TaskSpec],
    std: StdConvention,
    snapshot: &str,
) -> PhaseSummary {
    let outcomes: Vec<RunOutcome> = records.iter().map(|r| r.outcome.clone()).collect();
    PhaseSummary {
        snapshot_id: snapshot.into(),
        aggregate: aggregate(&outcomes, &groups_of(tasks), std),
        outcomes,
    }
}

/// Share of steps above which a retraced trajectory is flagged.
const INDETERMINATE_FLAG_RATIO: f64 = 0.5;

fn evolve_task<M: ChatModel + ?Sized>(
    task: &TaskSpec,
    runs: &[&RunRecord],
    store: &KnowledgeStore,
    snap: &Snapshot,
    model: &M,
    settings: &EvolutionSettings,
) -> TaskEvolution {
    let mut entry = TaskEvolution::new(task);
    let available: Vec<(&RunOutcome, &Trajectory)> = runs
        .iter()
        .filter_map(|r| r.trajectory.as_ref().map(|t| (&r.outcome, t)))
        .collect();
    entry.any_succeeded = runs.iter().any(|r| r.outcome.success);
    let record = match store.read_at(snap, &task.task_id) {
        Ok(r) => r,
        Err(e) => {
            entry.error = Some(format!("knowledge: {e}"));
            return entry;
        }
    };
    entry.from_version = record.version;
    if available.is_empty() {
        entry.error = Some("no trajectory to evolve from".into());
        return entry;
    }
    let seed = selection_seed(settings.seed, &task.task_id);

    let random_pick = |method| -> Result<(usize, SelectionMethod), String> {
        select_random(available.len(), seed)
            .map(|i| (i, method))
            .map_err(|e| e.to_string())
    };
    let mut retraced: BTreeMap<usize, ObjectiveActionSequence> = BTreeMap::new();
    let picked = match settings.selection {
        SelectionMode::Random => random_pick(SelectionMethod::Random),
        SelectionMode::Completion if available.len() != 3 => {
            random_pick(SelectionMethod::RandomFallback)
        }
        SelectionMode::Completion => (|| {
            let mut candidates = Vec::with_capacity(3);
            for (i, (_, t)) in available.iter().enumerate() {
                let seq = retrace_trajectory(t, model, &settings.stages.retrace)
                    .map_err(|e| format!("retrace: {e}"))?;
                candidates.push(SelectionCandidate {
                    index: i + 1,
                    action_list: render_action_list(&seq),
                    plan: record.plan.clone(),
                });
                retraced.insert(i, seq);
            }
            let Selection { index, method } = select_completion(
                &task.instruction,
                &candidates,
                model,
                &settings.stages.selection,
                seed,
            )
            .map_err(|e| format!("selection: {e}"))?;
            Ok((index - 1, method))
        })(),
    };
    let (pick, method) = match picked {
        Ok(p) => p,
        Err(e) => {
            entry.error = Some(e);
            return entry;
        }
    };
    let (outcome, chosen) = available[pick];
    entry.selected_repeat = Some(outcome.repeat_index);
    entry.selection_method = Some(method);
    entry.selected_succeeded = outcome.success;

    let seq = match retraced.remove(&pick) {
        Some(s) => s,
        None => match retrace_trajectory(chosen, model, &settings.stages.retrace) {
            Ok(s) => s,
            Err(e) => {
                entry.error = Some(format!("retrace: {e}"));
                return entry;
            }
        },
    };
    entry.total_steps = seq.entries.len();
    entry.indeterminate_steps = seq.indeterminate_count();
    entry.flagged_indeterminate = !seq.entries.is_empty()
        && entry.indeterminate_steps as f64 > INDETERMINATE_FLAG_RATIO * seq.entries.len() as f64;

    let (next, report) = match evolve(
        &record,
        &seq,
        &chosen.producer_model,
        model,
        &settings.stages.critique,
    ) {
        Ok(x) => x,
        Err(e) => {
            entry.error = Some(format!("critique: {e}"));
            return entry;
        }
    };
    if let Err(e) = store.put(&next) {
        entry.error = Some(format!("store: {e}"));
        return entry;
    }
    entry.to_version = Some(next.version);
    entry.critique_digest = next.critique_digest;
    entry.root_causes = report
        .deviations
        .iter()
        .flat_map(|d| d.root_causes.iter().map(|c| c.letter()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    entry.mitigations = report
        .mitigations
        .iter()
        .map(|m| (m.cause.letter(), m.embodied_in_step))
        .collect();
    entry.changes = diff_plans(&record.plan, &next.plan);
    entry
}

/// Full evolution cycle over `tasks`.
///
/// Phase 1 runs under a snapshot of the current knowledge. For each task one
/// trajectory is selected, retraced and critiqued, and the evolved record
/// is stored. Phase 2 re-runs under a fresh snapshot. Per-task failures
/// leave the old version in place and are listed in the report.
pub fn evolution_loop<M: ChatModel + ?Sized>(
    tasks: &[TaskSpec],
    executor: &dyn Executor,
    model: &M,
    store: &KnowledgeStore,
    settings: &EvolutionSettings,
) -> Result<EvolutionReport, HarnessError> {
    if settings.workers == 0 {
        return Err(HarnessError::InvalidWorkers);
    }
    if settings.selection == SelectionMode::Completion && settings.repeats != 3 {
        return Err(HarnessError::SelectionArity(settings.repeats));
    }
    let before = store.freeze_snapshot()?;
    let plans = pinned_plans(store, &before, tasks)?;
    let phase1 = run_benchmark(tasks, settings.repeats, executor, settings.workers, &plans)?;

    let mut by_task: BTreeMap<&TaskId, Vec<&RunRecord>> = BTreeMap::new();
    for r in &phase1 {
        by_task.entry(&r.outcome.task_id).or_default().push(r);
    }
    let mut evolutions = par_map(tasks, settings.workers, |task| {
        let runs = by_task.get(&task.task_id).map_or(&[][..], Vec::as_slice);
        evolve_task(task, runs, store, &before, model, settings)
    })?;
    evolutions.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let after = store.freeze_snapshot()?;
    let plans2 = pinned_plans(store, &after, tasks)?;
    let phase2 = run_benchmark(tasks, settings.repeats, executor, settings.workers, &plans2)?;

    let ssr_records: Vec<SsrRecord> = evolutions
        .iter()
        .filter(|e| e.selection_method.is_some())
        .filter_map(|e| SsrRecord::new(e.selected_succeeded, e.any_succeeded))
        .collect();
    let ssr = compute_ssr(&ssr_records);
    Ok(EvolutionReport {
        format: REPORT_FORMAT.into(),
        repeats: settings.repeats,
        selection: settings.selection,
        std_convention: settings.std,
        seed: settings.seed,
        phase1: summarize(&phase1, tasks, settings.std, &before.snapshot_id),
        phase2: summarize(&phase2, tasks, settings.std, &after.snapshot_id),
        ssr: ssr.into(),
        failures: evolutions
            .iter()
            .filter_map(|e| e.error.as_ref().map(|m| (e.task_id.clone(), m.clone())))
            .collect(),
        tasks: evolutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use evolkit_core::PlanStep;

    fn plan(action: &str) -> KnowledgePlan {
        KnowledgePlan::new(vec![
            PlanStep::new(1, "Open file", ["Double-click the file"], "Open it"),
            PlanStep::new(2, "Select text", [action], "Mark the text"),
        ])
        .unwrap()
    }

    fn tasks(n: usize) -> Vec<TaskSpec> {
        (0..n)
            .map(|i| TaskSpec::new(format!("task-{i:02}"), "Capitalize", "Office").unwrap())
            .collect()
    }

    #[test]
    fn scripted_verdicts() {
        let ex = ScriptedExecutor::with_rules(&[("Ctrl+A", true), ("drag", false)]);
        let t = &tasks(1)[0];
        assert!(!ex.verdict(t, &plan("Drag the mouse over the text"), 0));
        assert!(ex.verdict(t, &plan("Press ctrl+a"), 0));
        let e = ex.execute(t, &plan("Press Ctrl+A"), 0).unwrap();
        assert_eq!(e.trajectory.steps.len(), 2);
        assert_eq!(e.wall_time_ms, 2000);
    }

    #[test]
    fn outcomes_independent_of_workers() {
        let ts = tasks(10);
        let plans: BTreeMap<_, _> = ts
            .iter()
            .map(|t| (t.task_id.clone(), plan("drag")))
            .collect();
        let mut ex = ScriptedExecutor::with_rules(&[("drag", false)]);
        ex.overrides.push(Override {
            task_id: "task-03".into(),
            repeat: 1,
            success: true,
        });
        let one = run_benchmark(&ts, 3, &ex, 1, &plans).unwrap();
        let many = run_benchmark(&ts, 3, &ex, 30, &plans).unwrap();
        assert_eq!(one.len(), 30);
        let o = |v: &[RunRecord]| v.iter().map(|r| r.outcome.clone()).collect::<Vec<_>>();
        assert_eq!(o(&one), o(&many));
        assert_eq!(one.iter().filter(|r| r.outcome.success).count(), 1);
    }

    #[test]
    fn failures_do_not_abort_the_batch() {
        let ts = tasks(4);
        let plans: BTreeMap<_, _> = ts
            .iter()
            .map(|t| (t.task_id.clone(), plan("Ctrl+A")))
            .collect();
        let mut ex = ScriptedExecutor::with_rules(&[("Ctrl+A", true)]);
        ex.failing.insert("task-01".into());
        ex.panicking.insert("task-02".into());
        let prev = panic::take_hook();
        panic::set_hook(Box::new(|_| {}));
        let out = run_benchmark(&ts, 1, &ex, 2, &plans).unwrap();
        panic::set_hook(prev);
        let wins: Vec<bool> = out.iter().map(|r| r.outcome.success).collect();
        assert_eq!(wins, [true, false, false, true]);
        assert!(out[1]
            .outcome
            .error
            .as_deref()
            .unwrap()
            .contains("timed out"));
        assert!(out[2]
            .outcome
            .error
            .as_deref()
            .unwrap()
            .starts_with("panic"));
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u32> = (0..100).collect();
        assert_eq!(
            par_map(&v, 7, |x| x * 2).unwrap(),
            v.iter().map(|x| x * 2).collect::<Vec<_>>()
        );
        assert!(par_map(&v, 0, |x| *x).is_err());
    }

    #[test]
    fn selection_seed_depends_on_task() {
        assert_eq!(
            selection_seed(1, &"a".into()),
            selection_seed(1, &"a".into())
        );
        assert_ne!(
            selection_seed(1, &"a".into()),
            selection_seed(1, &"b".into())
        );
        assert_ne!(
            selection_seed(1, &"a".into()),
            selection_seed(2, &"a".into())
        );
    }
}
