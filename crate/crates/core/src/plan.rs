//! Plan document grammar.
//!
//! The canonical form is the one the critique stage asks for:
//!
//! ```text
//! 1. **Select all text**:
//!    - Press Ctrl+A in the document
//!    - Purpose: select entire document
//! ```
//!
//! Web-sourced knowledge is looser, so the parser also accepts unbolded
//! titles, `*` or `•` bullets, bold `Purpose` keys, arbitrary indentation,
//! numbering gaps and prose before the first step. Numbering is normalized
//! to `1..n`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{is_shell_prompt, KnowledgePlan, PlanStep, MAX_PLAN_STEPS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanErrorKind {
    Empty,
    TooManySteps { count: usize },
    MissingPurpose,
    DuplicatePurpose,
    NoActions,
    ShellPrompt,
    EmptySubtask,
    NonConsecutive { found: usize },
    NonCanonicalText,
}

impl fmt::Display for PlanErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => f.write_str("plan has no steps"),
            Self::TooManySteps { count } => {
                write!(
                    f,
                    "plan has {count} steps, at most {MAX_PLAN_STEPS} allowed"
                )
            }
            Self::MissingPurpose => f.write_str("missing Purpose line"),
            Self::DuplicatePurpose => f.write_str("more than one Purpose line"),
            Self::NoActions => f.write_str("step lists no actions"),
            Self::ShellPrompt => f.write_str("action begins with a shell prompt (# or $)"),
            Self::EmptySubtask => f.write_str("empty subtask title"),
            Self::NonConsecutive { found } => write!(f, "step numbered {found} out of sequence"),
            Self::NonCanonicalText => {
                f.write_str("text is empty, multi-line, padded or not representable")
            }
        }
    }
}

/// A malformed plan, with the 1-based step and source line when known.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct PlanError {
    pub kind: PlanErrorKind,
    pub step: Option<usize>,
    pub line: Option<usize>,
}

impl PlanError {
    pub(crate) fn new(kind: PlanErrorKind) -> Self {
        Self {
            kind,
            step: None,
            line: None,
        }
    }

    pub(crate) fn at_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }

    pub(crate) fn at_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("malformed plan")?;
        match (self.step, self.line) {
            (Some(s), Some(l)) => write!(f, " at step {s}, line {l}")?,
            (Some(s), None) => write!(f, " at step {s}")?,
            (None, Some(l)) => write!(f, " at line {l}")?,
            (None, None) => {}
        }
        write!(f, ": {}", self.kind)
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Action,
    Purpose,
}

struct Draft {
    line: usize,
    subtask: String,
    actions: Vec<(usize, String)>,
    purpose: Option<String>,
    last: Option<Slot>,
}

impl Draft {
    fn finish(self, number: usize) -> Result<PlanStep, PlanError> {
        let err = |kind, line| Err(PlanError::new(kind).at_step(number).at_line(line));
        if self.subtask.is_empty() {
            return err(PlanErrorKind::EmptySubtask, self.line);
        }
        for (line, action) in &self.actions {
            if is_shell_prompt(action) {
                return err(PlanErrorKind::ShellPrompt, *line);
            }
        }
        if self.actions.is_empty() {
            return err(PlanErrorKind::NoActions, self.line);
        }
        let purpose = match self.purpose {
            Some(p) if !p.is_empty() => p,
            _ => return err(PlanErrorKind::MissingPurpose, self.line),
        };
        Ok(PlanStep {
            number,
            subtask: self.subtask,
            actions: self.actions.into_iter().map(|(_, a)| a).collect(),
            purpose,
        })
    }
}

/// Parses a plan document into a validated [`KnowledgePlan`].
pub fn parse_plan(text: &str) -> Result<KnowledgePlan, PlanError> {
    let mut drafts: Vec<Draft> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(title) = step_header(line) {
            if drafts.len() == MAX_PLAN_STEPS {
                return Err(PlanError::new(PlanErrorKind::TooManySteps {
                    count: count_headers(text),
                })
                .at_step(MAX_PLAN_STEPS + 1)
                .at_line(line_no));
            }
            drafts.push(Draft {
                line: line_no,
                subtask: normalize_title(title),
                actions: Vec::new(),
                purpose: None,
                last: None,
            });
            continue;
        }
        // Prose before the first step is ignored.
        let Some(draft) = drafts.last_mut() else {
            continue;
        };
        if let Some(item) = bullet_body(line) {
            if let Some(purpose) = purpose_body(item) {
                if draft.purpose.is_some() {
                    return Err(PlanError::new(PlanErrorKind::DuplicatePurpose)
                        .at_step(drafts.len())
                        .at_line(line_no));
                }
                draft.purpose = Some(purpose.into());
                draft.last = Some(Slot::Purpose);
            } else {
                draft.actions.push((line_no, item.into()));
                draft.last = Some(Slot::Action);
            }
            continue;
        }
        // Wrapped continuation of the previous bullet.
        let target = match draft.last {
            Some(Slot::Action) => draft.actions.last_mut().map(|(_, a)| a),
            Some(Slot::Purpose) => draft.purpose.as_mut(),
            None => None,
        };
        if let Some(t) = target {
            if !t.is_empty() {
                t.push(' ');
            }
            t.push_str(line);
        }
    }
    if drafts.is_empty() {
        return Err(PlanError::new(PlanErrorKind::Empty));
    }
    let steps = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.finish(i + 1))
        .collect::<Result<Vec<_>, _>>()?;
    KnowledgePlan::new(steps)
}

/// Renders a plan in the canonical document form.
pub fn render_plan(plan: &KnowledgePlan) -> String {
    render_plan_indented(plan, "")
}

pub(crate) fn render_plan_indented(plan: &KnowledgePlan, indent: &str) -> String {
    use core::fmt::Write;
    let mut out = String::new();
    for step in plan.steps() {
        let _ = writeln!(out, "{indent}{}. **{}**:", step.number, step.subtask);
        for action in &step.actions {
            let _ = writeln!(out, "{indent}   - {action}");
        }
        let _ = writeln!(out, "{indent}   - Purpose: {}", step.purpose);
    }
    out
}

fn count_headers(text: &str) -> usize {
    text.lines()
        .filter(|l| step_header(l.trim()).is_some())
        .count()
}

/// `12. Title` or `12) Title`; returns the title part.
fn step_header(line: &str) -> Option<&str> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    Some(rest.trim())
}

fn normalize_title(raw: &str) -> String {
    let mut t = raw.trim();
    t = t.strip_suffix(':').unwrap_or(t).trim_end();
    if t.len() >= 4 && t.starts_with("**") && t.ends_with("**") {
        t = t[2..t.len() - 2].trim();
        t = t.strip_suffix(':').unwrap_or(t).trim_end();
    }
    t.into()
}

/// Body of a `-`, `*` or `•` bullet.
pub(crate) fn bullet_body(line: &str) -> Option<&str> {
    let mut chars = line.chars();
    let marker = chars.next()?;
    if !matches!(marker, '-' | '*' | '•') {
        return None;
    }
    let rest = chars.as_str();
    if rest.is_empty() {
        return Some("");
    }
    rest.starts_with(char::is_whitespace).then(|| rest.trim())
}

/// `Purpose: x`, `**Purpose**: x` or `**Purpose:** x`; returns `x`.
pub(crate) fn purpose_body(item: &str) -> Option<&str> {
    let s = item.trim_start_matches('*');
    let key = s.get(..7)?;
    if !key.eq_ignore_ascii_case("purpose") {
        return None;
    }
    let rest = s[7..].trim_start_matches('*').trim_start();
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches('*').trim())
}
