//! Evolution reports. The JSON form carries no timestamps or worker count,
//! so identical inputs give byte-identical files.

use std::fmt::Write;

use evolkit_core::{
    Aggregate, ContentHash, PlanChange, RunOutcome, RunStats, SelectionMethod, SsrResult,
    StdConvention, TaskId, TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::SelectionMode;

pub const REPORT_FORMAT: &str = "evolkit.evolution-report.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub snapshot_id: String,
    pub aggregate: Aggregate,
    pub outcomes: Vec<RunOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsrSummary {
    pub n_succ: usize,
    pub n_solv: usize,
    /// `null` when no task was solvable.
    pub ssr: Option<f64>,
}

impl From<SsrResult> for SsrSummary {
    fn from(r: SsrResult) -> Self {
        Self {
            n_succ: r.n_succ,
            n_solv: r.n_solv,
            ssr: r.ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvolution {
    pub task_id: TaskId,
    pub group: String,
    pub from_version: u32,
    pub to_version: Option<u32>,
    pub selected_repeat: Option<usize>,
    pub selection_method: Option<SelectionMethod>,
    pub selected_succeeded: bool,
    pub any_succeeded: bool,
    pub total_steps: usize,
    pub indeterminate_steps: usize,
    /// More than half of the selected trajectory could not be retraced.
    pub flagged_indeterminate: bool,
    pub root_causes: Vec<char>,
    /// `(cause letter, refined-plan step)` pairs.
    pub mitigations: Vec<(char, usize)>,
    pub changes: Vec<PlanChange>,
    pub critique_digest: Option<ContentHash>,
    pub error: Option<String>,
}

impl TaskEvolution {
    pub fn new(task: &TaskSpec) -> Self {
        Self {
            task_id: task.task_id.clone(),
            group: task.group.clone(),
            from_version: 0,
            to_version: None,
            selected_repeat: None,
            selection_method: None,
            selected_succeeded: false,
            any_succeeded: false,
            total_steps: 0,
            indeterminate_steps: 0,
            flagged_indeterminate: false,
            root_causes: Vec::new(),
            mitigations: Vec::new(),
            changes: Vec::new(),
            critique_digest: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub format: String,
    pub repeats: usize,
    pub selection: SelectionMode,
    pub std_convention: StdConvention,
    pub seed: u64,
    pub phase1: PhaseSummary,
    pub phase2: PhaseSummary,
    pub ssr: SsrSummary,
    pub tasks: Vec<TaskEvolution>,
    pub failures: Vec<(TaskId, String)>,
}

impl EvolutionReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Evolution report\n");
        let _ = writeln!(
            out,
            "Repeats: {}. Selection: {}. Std convention: {}.\n",
            self.repeats,
            match self.selection {
                SelectionMode::Random => "random",
                SelectionMode::Completion => "completion",
            },
            self.std_convention.as_str()
        );
        out.push_str("## Success rate (%)\n\n");
        out.push_str(&stats_table(&[
            ("Before evolution", self.phase1.aggregate.overall),
            ("After evolution", self.phase2.aggregate.overall),
        ]));
        out.push_str("\n## Success rate by group (avg %)\n\n");
        out.push_str(&group_table(&[
            ("Before evolution", &self.phase1.aggregate),
            ("After evolution", &self.phase2.aggregate),
        ]));
        let _ = writeln!(
            out,
            "\n## Selection\n\nSSR = {}/{} = {}\n",
            self.ssr.n_succ,
            self.ssr.n_solv,
            self.ssr
                .ssr
                .map_or("undefined".into(), |r| format!("{:.2}", r * 100.0) + "%")
        );
        out.push_str("## Tasks\n\n");
        out.push_str(
            "| Task | Group | Selected | Versions | Root causes | Plan changes | Notes |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|\n");
        for t in &self.tasks {
            let selected = t.selected_repeat.map_or("-".into(), |r| {
                format!(
                    "run {r} ({})",
                    if t.selected_succeeded { "ok" } else { "fail" }
                )
            });
            let versions = match t.to_version {
                Some(v) => format!("v{} → v{v}", t.from_version),
                None => format!("v{}", t.from_version),
            };
            let causes: Vec<String> = t.root_causes.iter().map(char::to_string).collect();
            let changes: Vec<String> = t.changes.iter().map(change_text).collect();
            let mut notes = Vec::new();
            if t.flagged_indeterminate {
                notes.push(format!(
                    "{}/{} steps indeterminate",
                    t.indeterminate_steps, t.total_steps
                ));
            }
            if let Some(e) = &t.error {
                notes.push(e.replace('|', "\\|"));
            }
            let _ = writeln!(
                out,
                "| {} | {} | {selected} | {versions} | {} | {} | {} |",
                t.task_id,
                t.group,
                or_dash(causes.join(", ")),
                or_dash(changes.join("; ")),
                or_dash(notes.join("; ")),
            );
        }
        out
    }
}

fn or_dash(s: String) -> String {
    if s.is_empty() {
        "-".into()
    } else {
        s
    }
}

fn change_text(c: &PlanChange) -> String {
    match c {
        PlanChange::Added { new_step, .. } => format!("+{new_step}"),
        PlanChange::Removed { old_step, .. } => format!("-{old_step}"),
        PlanChange::Modified {
            old_step, new_step, ..
        } if old_step == new_step => format!("~{new_step}"),
        PlanChange::Modified {
            old_step, new_step, ..
        } => format!("~{old_step}→{new_step}"),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.2}"))
}

/// Min / Max / Std / Avg rows.
pub fn stats_table(rows: &[(&str, Option<RunStats>)]) -> String {
    let mut out =
        String::from("| Method | Min. SR | Max. SR | Std. SR | Avg. SR |\n|---|---|---|---|---|\n");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {} | {} |",
            cell(s.map(|s| s.min)),
            cell(s.map(|s| s.max)),
            cell(s.map(|s| s.std)),
            cell(s.map(|s| s.avg)),
        );
    }
    out
}

/// One column per group, one row per aggregate.
pub fn group_table(rows: &[(&str, &Aggregate)]) -> String {
    let groups: std::collections::BTreeSet<&String> =
        rows.iter().flat_map(|(_, a)| a.groups.keys()).collect();
    let mut out = String::from("| Method |");
    for g in &groups {
        let _ = write!(out, " {g} |");
    }
    out.push_str(" Overall |\n|---|");
    out.push_str(&"---|".repeat(groups.len() + 1));
    out.push('\n');
    for (name, a) in rows {
        let _ = write!(out, "| {name} |");
        for g in &groups {
            let _ = write!(out, " {} |", cell(a.groups.get(*g).map(|s| s.avg)));
        }
        let _ = writeln!(out, " {} |", cell(a.overall.map(|s| s.avg)));
    }
    out
}
