//! Critique stage: compare the objective action list against the current
//! plan and turn the five-section report into the next plan version.
//!
//! Report grammar (headers are matched case-insensitively, with optional
//! `#`/`*` decoration):
//!
//! ```text
//! SECTION A. Task Completion
//!   Did the Agent achieve the task goal? No
//!   Reason: ...
//!   Did the Agent execute more than the instruction required? Yes
//!   Reason: ...
//! SECTION B. Deviation Analysis
//!   • Deviation Step: 2            (or None)
//!   • Expected Action : ...
//!   • Actual Action    : ...
//!   • Root Cause (letters, commas allowed): a, f
//! SECTION C. Alternative Approaches
//!   Did the Agent attempt any approach beyond the Original Plan? Yes
//!   • <approach>
//!   Which is better (Original / Alternative)? Alternative. <why>
//! SECTION D. Mitigation & Rationale
//!   a) Output/screen misunderstanding → <idea> (Step 2).
//! SECTION E. REFINED PLAN:
//!   <plan document>
//! ```

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, ChatModel, CompletionRequest, GatewayError, StageSettings};
use crate::hash::ContentHash;
use crate::model::{KnowledgePlan, KnowledgeRecord, ObjectiveActionSequence, PlanStep};
use crate::plan::{
    bullet_body, parse_plan, render_plan, render_plan_indented, PlanError, PlanErrorKind,
};
use crate::prompts;
use crate::retrace::render_action_list;

/// Deviation root-cause taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RootCause {
    #[serde(rename = "a")]
    ScreenMisunderstanding,
    #[serde(rename = "b")]
    KnowledgeGap,
    #[serde(rename = "c")]
    SyntaxError,
    #[serde(rename = "d")]
    Environment,
    #[serde(rename = "e")]
    Other,
    #[serde(rename = "f")]
    InvalidAssumption,
    #[serde(rename = "g")]
    TransientFailure,
    #[serde(rename = "h")]
    StepOrder,
    #[serde(rename = "i")]
    MissingPrecondition,
}

impl RootCause {
    pub const ALL: [RootCause; 9] = [
        Self::ScreenMisunderstanding,
        Self::KnowledgeGap,
        Self::SyntaxError,
        Self::Environment,
        Self::Other,
        Self::InvalidAssumption,
        Self::TransientFailure,
        Self::StepOrder,
        Self::MissingPrecondition,
    ];

    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let c = c.to_ascii_lowercase();
        Self::ALL.iter().copied().find(|r| r.letter() == c)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::ScreenMisunderstanding => "Output/screen misunderstanding",
            Self::KnowledgeGap => "Knowledge gap",
            Self::SyntaxError => "Command / code / syntax error",
            Self::Environment => "Environment or permission issue",
            Self::Other => "Other",
            Self::InvalidAssumption => "Invalid assumption",
            Self::TransientFailure => "External transient failure",
            Self::StepOrder => "Step order issue",
            Self::MissingPrecondition => "Missing precondition",
        }
    }
}

impl fmt::Display for RootCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}) {}", self.letter(), self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionAssessment {
    pub achieved: bool,
    pub reason: String,
    pub over_executed: bool,
    pub over_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationRow {
    /// `None` for a "No deviation" row.
    pub deviation_step: Option<usize>,
    pub expected_action: String,
    pub actual_action: String,
    pub root_causes: BTreeSet<RootCause>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Original,
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetterApproach {
    pub choice: Approach,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alternatives {
    pub attempted: bool,
    pub descriptions: Vec<String>,
    pub better: Option<BetterApproach>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mitigation {
    pub cause: RootCause,
    pub idea: String,
    /// Refined-plan step said to embody the fix, as declared by the model.
    pub embodied_in_step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueReport {
    pub completion: CompletionAssessment,
    pub deviations: Vec<DeviationRow>,
    pub alternatives: Alternatives,
    pub mitigations: Vec<Mitigation>,
    pub refined_plan: KnowledgePlan,
}

impl CritiqueReport {
    /// Hash of the canonical rendering; links evolved records to reports.
    pub fn digest(&self) -> ContentHash {
        ContentHash::of(render_critique(self).as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Section {
    A,
    B,
    C,
    D,
    E,
}

impl Section {
    const ALL: [Section; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SECTION {}", self.letter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MalformedKind {
    MissingSection,
    OutOfOrder,
    UnknownRootCause(String),
    Plan(PlanError),
    Field(String),
}

impl fmt::Display for MalformedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingSection => f.write_str("header missing"),
            Self::OutOfOrder => f.write_str("header out of order"),
            Self::UnknownRootCause(t) => write!(f, "unknown root cause {t:?}"),
            Self::Plan(e) => write!(f, "{e}"),
            Self::Field(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CritiqueError {
    #[error("malformed critique in {section}: {kind}")]
    Malformed {
        section: Section,
        kind: MalformedKind,
    },
    #[error("critique rejected after corrective reprompt: {}", join_violations(.violations))]
    Rejected { violations: Vec<Violation> },
    #[error("critique input is empty: {0}")]
    EmptyInput(&'static str),
    #[error("record is for task {record} but the action sequence is for {sequence}")]
    TaskMismatch { record: String, sequence: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn malformed<T>(section: Section, kind: MalformedKind) -> Result<T, CritiqueError> {
    Err(CritiqueError::Malformed { section, kind })
}

fn field<T>(section: Section, msg: impl Into<String>) -> Result<T, CritiqueError> {
    malformed(section, MalformedKind::Field(msg.into()))
}

/// Fills the critique prompt's three INPUT slots.
pub fn build_critique_prompt(
    instruction: &str,
    action_list: &str,
    original_plan: &KnowledgePlan,
    stage: &StageSettings,
) -> Result<CompletionRequest, CritiqueError> {
    if action_list.trim().is_empty() {
        return Err(CritiqueError::EmptyInput("action list"));
    }
    let plan = render_plan(original_plan);
    let text = prompts::CRITIQUE
        .replacen(
            "  Task Instruction: …  \n",
            &format!("  Task Instruction: {instruction}\n"),
            1,
        )
        .replacen(
            "  Action List: …  \n",
            &format!("  Action List:\n{}\n", action_list.trim_end()),
            1,
        )
        .replacen(
            "  Original Plan: …  \n",
            &format!("  Original Plan:\n{}\n", plan.trim_end()),
            1,
        );
    Ok(CompletionRequest::new(
        stage,
        vec![ChatMessage::user_text(text)],
    )?)
}

/// Splits a report into its five section bodies.
fn split_sections(text: &str) -> Result<[Vec<(usize, &str)>; 5], CritiqueError> {
    let mut bodies: [Vec<(usize, &str)>; 5] = Default::default();
    let mut current: Option<Section> = None;
    let mut seen: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(section) = section_header(line) {
            if seen.contains(&section) || seen.last().is_some_and(|l| *l > section) {
                return malformed(section, MalformedKind::OutOfOrder);
            }
            seen.push(section);
            current = Some(section);
            continue;
        }
        if let Some(s) = current {
            if !line.is_empty() {
                bodies[s as usize].push((i + 1, line));
            }
        }
    }
    if let Some(s) = Section::ALL.into_iter().find(|s| !seen.contains(s)) {
        return malformed(s, MalformedKind::MissingSection);
    }
    Ok(bodies)
}

fn section_header(line: &str) -> Option<Section> {
    let s = line.trim_start_matches(['#', '*', ' ']);
    let head = s.get(..8)?;
    if !head.eq_ignore_ascii_case("section ") {
        return None;
    }
    let mut rest = s[8..].chars();
    let letter = rest.next()?;
    if rest.next().is_some_and(char::is_alphanumeric) {
        return None;
    }
    Section::ALL
        .into_iter()
        .find(|sec| sec.letter() == letter.to_ascii_uppercase())
}

/// Strips bullet markers and emphasis from a body line.
fn clean(line: &str) -> &str {
    let l = bullet_body(line).unwrap_or(line);
    l.trim_matches('*').trim()
}

/// `Key ... : value` where the key starts with `key` (case-insensitive).
fn keyed<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let head = line.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let (_, value) = line.split_once(':')?;
    Some(value.trim().trim_matches('*').trim())
}

fn starts_with_ci(s: &str, prefix: &str) -> bool {
    s.get(..prefix.len())
        .is_some_and(|h| h.eq_ignore_ascii_case(prefix))
}

/// Leading Yes/No, ignoring an echoed `(Yes / No)`. Returns the remainder.
fn yes_no(text: &str) -> Option<(bool, &str)> {
    let mut t = text.trim().trim_start_matches('*').trim_start();
    if starts_with_ci(t, "(yes") {
        t = t.split_once(')').map_or("", |(_, r)| r).trim_start();
    }
    let t = t.trim_start_matches('*');
    let (answer, rest) = if starts_with_ci(t, "yes") {
        (true, &t[3..])
    } else if starts_with_ci(t, "no") && !t[2..].starts_with(char::is_alphanumeric) {
        (false, &t[2..])
    } else {
        return None;
    };
    Some((
        answer,
        rest.trim_start_matches(['*', '.', ',', ':', ';', ' ', '-', '—', '–']),
    ))
}

fn is_none_marker(v: &str) -> bool {
    let v = v
        .trim()
        .trim_end_matches('.')
        .trim_matches(['"', '“', '”', '*']);
    ["none", "no deviation", "n/a", "-", ""]
        .iter()
        .any(|m| v.eq_ignore_ascii_case(m))
}

struct Question {
    answer: Option<bool>,
    reason: String,
}

fn parse_section_a(lines: &[(usize, &str)]) -> Result<CompletionAssessment, CritiqueError> {
    let mut questions: Vec<Question> = Vec::new();
    for (_, raw) in lines {
        let line = clean(raw);
        if starts_with_ci(line, "did ") {
            let after = line.split_once('?').map_or("", |(_, r)| r);
            let (answer, rest) = match yes_no(after) {
                Some((a, r)) => (Some(a), r),
                None => (None, ""),
            };
            questions.push(Question {
                answer,
                reason: rest.into(),
            });
            continue;
        }
        let Some(q) = questions.last_mut() else {
            continue;
        };
        if q.answer.is_none() {
            if let Some((a, rest)) = yes_no(line) {
                q.answer = Some(a);
                q.reason = rest.into();
                continue;
            }
        }
        if starts_with_ci(line, "reason") {
            let body = line[6..].trim_start_matches([':', '.', ' ', '*']);
            q.reason = body.trim().into();
        } else if !q.reason.is_empty() {
            q.reason.push(' ');
            q.reason.push_str(line);
        }
    }
    let answered = |i: usize| -> Result<&Question, CritiqueError> {
        match questions.get(i) {
            Some(q) if q.answer.is_some() => Ok(q),
            Some(_) => field(
                Section::A,
                format!("question {} has no Yes/No answer", i + 1),
            ),
            None => field(Section::A, format!("question {} missing", i + 1)),
        }
    };
    let (goal, over) = (answered(0)?, answered(1)?);
    Ok(CompletionAssessment {
        achieved: goal.answer == Some(true),
        reason: goal.reason.clone(),
        over_executed: over.answer == Some(true),
        over_reason: over.reason.clone(),
    })
}

fn parse_causes(value: &str) -> Result<BTreeSet<RootCause>, CritiqueError> {
    let mut out = BTreeSet::new();
    if is_none_marker(value) {
        return Ok(out);
    }
    for token in value.split(',') {
        let t = token.trim();
        if t.is_empty() {
            continue;
        }
        let mut chars = t.chars();
        let letter = chars.next().unwrap_or(' ');
        let rest = chars.as_str();
        let single = rest.is_empty() || rest.starts_with([')', '.', ' ']);
        match RootCause::from_letter(letter).filter(|_| single) {
            Some(c) => {
                out.insert(c);
            }
            None => return malformed(Section::B, MalformedKind::UnknownRootCause(t.into())),
        }
    }
    Ok(out)
}

fn parse_step_number(value: &str) -> Option<usize> {
    let digits: String = value
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

fn parse_section_b(lines: &[(usize, &str)]) -> Result<Vec<DeviationRow>, CritiqueError> {
    struct Draft {
        step: Option<usize>,
        expected: Option<String>,
        actual: Option<String>,
        causes: Option<BTreeSet<RootCause>>,
    }
    let mut drafts: Vec<Draft> = Vec::new();
    for (line_no, raw) in lines {
        let line = clean(raw);
        if let Some(v) = keyed(line, "deviation step") {
            let step = if is_none_marker(v) {
                None
            } else {
                match parse_step_number(v) {
                    Some(n) => Some(n),
                    None => {
                        return field(
                            Section::B,
                            format!("line {line_no}: bad deviation step {v:?}"),
                        )
                    }
                }
            };
            drafts.push(Draft {
                step,
                expected: None,
                actual: None,
                causes: None,
            });
            continue;
        }
        let Some(d) = drafts.last_mut() else { continue };
        if let Some(v) = keyed(line, "expected action") {
            d.expected = Some(v.into());
        } else if let Some(v) = keyed(line, "actual action") {
            d.actual = Some(v.into());
        } else if let Some(v) = keyed(line, "root cause") {
            d.causes = Some(parse_causes(v)?);
        }
    }
    if drafts.is_empty() {
        return field(Section::B, "no Deviation Step row");
    }
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let missing = |what: &str| field(Section::B, format!("row {}: missing {what}", i + 1));
            let Some(expected_action) = d.expected else {
                return missing("Expected Action");
            };
            let Some(actual_action) = d.actual else {
                return missing("Actual Action");
            };
            let Some(root_causes) = d.causes else {
                return missing("Root Cause");
            };
            Ok(DeviationRow {
                deviation_step: d.step,
                expected_action,
                actual_action,
                root_causes,
            })
        })
        .collect()
}

fn parse_section_c(lines: &[(usize, &str)]) -> Result<Alternatives, CritiqueError> {
    let mut attempted = None;
    let mut descriptions = Vec::new();
    let mut better = None;
    for (_, raw) in lines {
        let is_bullet = bullet_body(raw).is_some();
        let line = clean(raw);
        if attempted.is_none() && starts_with_ci(line, "did ") {
            let after = line.split_once('?').map_or("", |(_, r)| r);
            attempted = yes_no(after).map(|(a, _)| a);
            continue;
        }
        if attempted.is_none() {
            if let Some((a, _)) = yes_no(line) {
                attempted = Some(a);
                continue;
            }
        }
        if starts_with_ci(line, "which is better") || starts_with_ci(line, "better") {
            let after = line.split_once(['?', ':']).map_or(line, |(_, r)| r).trim();
            let after = after.trim_start_matches(['*', '(', ' ']);
            let choice = if starts_with_ci(after, "original") {
                Some((Approach::Original, &after[8..]))
            } else if starts_with_ci(after, "alternative") {
                Some((Approach::Alternative, &after[11..]))
            } else {
                None
            };
            better = choice.map(|(choice, rest)| BetterApproach {
                choice,
                reason: rest
                    .trim_start_matches(['*', ')', '.', ',', ':', ';', ' ', '-', '—', '–'])
                    .trim()
                    .into(),
            });
            continue;
        }
        if starts_with_ci(line, "no alternative approach") {
            continue;
        }
        if is_bullet && !line.is_empty() {
            descriptions.push(line.into());
        }
    }
    let Some(attempted) = attempted else {
        return field(Section::C, "alternative-approach question not answered");
    };
    Ok(Alternatives {
        attempted,
        descriptions,
        better,
    })
}

fn parse_section_d(lines: &[(usize, &str)]) -> Result<Vec<Mitigation>, CritiqueError> {
    let mut out = Vec::new();
    for (line_no, raw) in lines {
        let line = clean(raw);
        let mut chars = line.chars();
        let (Some(letter), Some(')')) = (chars.next(), chars.next()) else {
            continue;
        };
        let Some(cause) = RootCause::from_letter(letter) else {
            return malformed(
                Section::D,
                MalformedKind::UnknownRootCause(letter.to_string()),
            );
        };
        let body = chars.as_str().trim();
        let body = match body.split_once('→').or_else(|| body.split_once("->")) {
            Some((_, idea)) => idea.trim(),
            None => body,
        };
        let (idea, step) = split_step_reference(body);
        let Some(step) = step else {
            return field(
                Section::D,
                format!("line {line_no}: mitigation names no step"),
            );
        };
        out.push(Mitigation {
            cause,
            idea: idea.into(),
            embodied_in_step: step,
        });
    }
    Ok(out)
}

/// Separates a trailing `(… Step N)` reference from the idea text. Falls
/// back to the last `step N` mention anywhere in the text.
fn split_step_reference(body: &str) -> (&str, Option<usize>) {
    let trimmed = body.trim_end().trim_end_matches('.').trim_end();
    if trimmed.ends_with(')') {
        if let Some(open) = trimmed.rfind('(') {
            let inner = &trimmed[open + 1..trimmed.len() - 1];
            if let Some(n) = step_mention(inner) {
                return (trimmed[..open].trim_end(), Some(n));
            }
        }
    }
    (body, step_mention(body))
}

fn step_mention(text: &str) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    lower
        .match_indices("step")
        .filter_map(|(i, _)| {
            let rest = lower[i + 4..].trim_start().trim_start_matches('#');
            let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
            digits.parse().ok()
        })
        .last()
}

fn parse_section_e(lines: &[(usize, &str)]) -> Result<KnowledgePlan, CritiqueError> {
    let mut doc = String::new();
    for (_, line) in lines {
        let bare = line.trim_matches(['*', ' ']).trim_end_matches(':');
        if bare.eq_ignore_ascii_case("refined plan") {
            continue;
        }
        doc.push_str(line);
        doc.push('\n');
    }
    parse_plan(&doc).map_err(|e| CritiqueError::Malformed {
        section: Section::E,
        kind: MalformedKind::Plan(e),
    })
}

/// Parses a five-section critique report.
pub fn parse_critique_output(text: &str) -> Result<CritiqueReport, CritiqueError> {
    let [a, b, c, d, e] = split_sections(text)?;
    Ok(CritiqueReport {
        completion: parse_section_a(&a)?,
        deviations: parse_section_b(&b)?,
        alternatives: parse_section_c(&c)?,
        mitigations: parse_section_d(&d)?,
        refined_plan: parse_section_e(&e)?,
    })
}

fn yes(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

/// Canonical rendering; [`parse_critique_output`] reads it back unchanged.
pub fn render_critique(report: &CritiqueReport) -> String {
    let mut out = String::new();
    let c = &report.completion;
    let _ = writeln!(out, "SECTION A. Task Completion");
    let _ = writeln!(
        out,
        "  Did the Agent achieve the task goal? {}",
        yes(c.achieved)
    );
    let _ = writeln!(out, "  Reason: {}", c.reason);
    let _ = writeln!(
        out,
        "  Did the Agent execute more than the instruction required? {}",
        yes(c.over_executed)
    );
    let _ = writeln!(out, "  Reason: {}", c.over_reason);

    let _ = writeln!(out, "\nSECTION B. Deviation Analysis");
    for (i, row) in report.deviations.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match row.deviation_step {
            Some(n) => {
                let _ = writeln!(out, "  • Deviation Step: {n}");
            }
            None => {
                let _ = writeln!(out, "  • Deviation Step: None");
            }
        }
        let _ = writeln!(out, "  • Expected Action : {}", row.expected_action);
        let _ = writeln!(out, "  • Actual Action    : {}", row.actual_action);
        let causes = if row.root_causes.is_empty() {
            String::from("None")
        } else {
            row.root_causes
                .iter()
                .map(|c| c.letter().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let _ = writeln!(out, "  • Root Cause (letters, commas allowed): {causes}");
    }

    let alt = &report.alternatives;
    let _ = writeln!(out, "\nSECTION C. Alternative Approaches");
    let _ = writeln!(
        out,
        "  Did the Agent attempt any approach beyond the Original Plan? {}",
        yes(alt.attempted)
    );
    for d in &alt.descriptions {
        let _ = writeln!(out, "  • {d}");
    }
    if let Some(b) = &alt.better {
        let choice = match b.choice {
            Approach::Original => "Original",
            Approach::Alternative => "Alternative",
        };
        if b.reason.is_empty() {
            let _ = writeln!(out, "  Which is better (Original / Alternative)? {choice}");
        } else {
            let _ = writeln!(
                out,
                "  Which is better (Original / Alternative)? {choice}. {}",
                b.reason
            );
        }
    }
    if !alt.attempted {
        let _ = writeln!(out, "  No alternative approach tried.");
    }

    let _ = writeln!(out, "\nSECTION D. Mitigation & Rationale");
    if report.mitigations.is_empty() {
        let _ = writeln!(out, "  None");
    }
    for m in &report.mitigations {
        let _ = writeln!(
            out,
            "  {} → {} (Step {}).",
            m.cause, m.idea, m.embodied_in_step
        );
    }

    let _ = writeln!(out, "\nSECTION E. REFINED PLAN:");
    let _ = writeln!(out, "  REFINED PLAN:");
    out.push_str(&render_plan_indented(&report.refined_plan, "      "));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationRule {
    MissingSection,
    MalformedField,
    UnknownRootCause,
    PlanStepCount,
    ShellPrompt,
    MissingPurpose,
    MalformedPlan,
    PassiveStep,
    MissingMitigation,
    MitigationStepOutOfRange,
    DeviationCauseMismatch,
}

impl ViolationRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::MissingSection => "missing-section",
            Self::MalformedField => "malformed-field",
            Self::UnknownRootCause => "unknown-root-cause",
            Self::PlanStepCount => "plan-step-count",
            Self::ShellPrompt => "shell-prompt",
            Self::MissingPurpose => "missing-purpose",
            Self::MalformedPlan => "malformed-plan",
            Self::PassiveStep => "passive-step",
            Self::MissingMitigation => "missing-mitigation",
            Self::MitigationStepOutOfRange => "mitigation-step-out-of-range",
            Self::DeviationCauseMismatch => "deviation-cause-mismatch",
        }
    }
}

/// A broken report rule with its location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: ViolationRule,
    pub location: String,
    pub detail: String,
}

impl Violation {
    fn new(rule: ViolationRule, location: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            rule,
            location: location.into(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {}",
            self.rule.name(),
            self.location,
            self.detail
        )
    }
}

const PASSIVE_VERBS: [&str; 4] = ["Confirm", "Verify", "Check", "Make sure"];

fn is_passive(action: &str) -> bool {
    PASSIVE_VERBS.iter().any(|verb| {
        action.strip_prefix(verb).is_some_and(|rest| {
            rest.chars()
                .next()
                .is_none_or(|c| !c.is_alphanumeric() && c != '_')
        })
    })
}

fn plan_rule_violations(plan: &KnowledgePlan, out: &mut Vec<Violation>) {
    if plan.is_empty() || plan.len() > crate::model::MAX_PLAN_STEPS {
        out.push(Violation::new(
            ViolationRule::PlanStepCount,
            "SECTION E",
            format!(
                "{} steps, expected 1 to {}",
                plan.len(),
                crate::model::MAX_PLAN_STEPS
            ),
        ));
    }
    for step in plan.steps() {
        for (k, action) in step.actions.iter().enumerate() {
            let location = format!("SECTION E step {}, action {}", step.number, k + 1);
            if crate::model::is_shell_prompt(action) {
                out.push(Violation::new(
                    ViolationRule::ShellPrompt,
                    location,
                    action.clone(),
                ));
            } else if is_passive(action) {
                out.push(Violation::new(
                    ViolationRule::PassiveStep,
                    location,
                    action.clone(),
                ));
            }
        }
    }
}

/// Checks the explicit report rules. Violations are data; an empty list
/// means the report may be stored.
pub fn validate_report(report: &CritiqueReport) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, row) in report.deviations.iter().enumerate() {
        if row.deviation_step.is_none() != row.root_causes.is_empty() {
            out.push(Violation::new(
                ViolationRule::DeviationCauseMismatch,
                format!("SECTION B row {}", i + 1),
                "root causes must be given exactly when a deviation step is",
            ));
        }
    }
    let mitigated: BTreeSet<RootCause> = report.mitigations.iter().map(|m| m.cause).collect();
    let causes: BTreeSet<RootCause> = report
        .deviations
        .iter()
        .flat_map(|r| r.root_causes.iter().copied())
        .collect();
    for cause in causes.difference(&mitigated) {
        out.push(Violation::new(
            ViolationRule::MissingMitigation,
            "SECTION D",
            format!("root cause {cause} has no mitigation"),
        ));
    }
    for (i, m) in report.mitigations.iter().enumerate() {
        if m.embodied_in_step == 0 || m.embodied_in_step > report.refined_plan.len() {
            out.push(Violation::new(
                ViolationRule::MitigationStepOutOfRange,
                format!("SECTION D line {}", i + 1),
                format!(
                    "step {} does not exist in the {}-step refined plan",
                    m.embodied_in_step,
                    report.refined_plan.len()
                ),
            ));
        }
    }
    plan_rule_violations(&report.refined_plan, &mut out);
    out
}

fn error_violation(err: &CritiqueError) -> Violation {
    let CritiqueError::Malformed { section, kind } = err else {
        return Violation::new(ViolationRule::MalformedField, "report", err.to_string());
    };
    let rule = match kind {
        MalformedKind::MissingSection | MalformedKind::OutOfOrder => ViolationRule::MissingSection,
        MalformedKind::UnknownRootCause(_) => ViolationRule::UnknownRootCause,
        MalformedKind::Field(_) => ViolationRule::MalformedField,
        MalformedKind::Plan(p) => match p.kind {
            PlanErrorKind::Empty | PlanErrorKind::TooManySteps { .. } => {
                ViolationRule::PlanStepCount
            }
            PlanErrorKind::ShellPrompt => ViolationRule::ShellPrompt,
            PlanErrorKind::MissingPurpose => ViolationRule::MissingPurpose,
            _ => ViolationRule::MalformedPlan,
        },
    };
    Violation::new(rule, section.to_string(), kind.to_string())
}

/// Parses and validates in one pass, reporting parse failures as
/// violations too.
pub fn lint_critique(text: &str) -> Result<CritiqueReport, Vec<Violation>> {
    let report = parse_critique_output(text).map_err(|e| vec![error_violation(&e)])?;
    let violations = validate_report(&report);
    if violations.is_empty() {
        Ok(report)
    } else {
        Err(violations)
    }
}

fn feedback(violations: &[Violation]) -> String {
    let mut out =
        String::from("Your previous answer broke these REQUIREMENTS and cannot be stored:\n");
    for v in violations {
        let _ = writeln!(out, "- {v}");
    }
    out.push_str(
        "Rewrite the complete answer with all FIVE SECTION HEADERS, fixing every item above.",
    );
    out
}

/// Runs one critique round and produces the next record version.
///
/// A report that fails to parse or validate earns one reprompt with the
/// violation list appended; a second failure is returned as
/// [`CritiqueError::Rejected`] and nothing is produced.
pub fn evolve<M: ChatModel + ?Sized>(
    record: &KnowledgeRecord,
    seq: &ObjectiveActionSequence,
    trajectory_producer: &str,
    model: &M,
    stage: &StageSettings,
) -> Result<(KnowledgeRecord, CritiqueReport), CritiqueError> {
    if record.task_id != seq.task_id {
        return Err(CritiqueError::TaskMismatch {
            record: record.task_id.to_string(),
            sequence: seq.task_id.to_string(),
        });
    }
    let actions = render_action_list(seq);
    let request = build_critique_prompt(&record.instruction, &actions, &record.plan, stage)?;
    let first = model.complete(&request)?;
    let report = match lint_critique(&first.text) {
        Ok(r) => r,
        Err(violations) => {
            let retry = request.followed_by(feedback(&violations));
            let second = model.complete(&retry)?;
            lint_critique(&second.text)
                .map_err(|violations| CritiqueError::Rejected { violations })?
        }
    };
    let next = record.successor(
        report.refined_plan.clone(),
        trajectory_producer,
        Some(report.digest()),
    );
    Ok((next, report))
}

/// One step-level difference between two plans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum PlanChange {
    Added {
        new_step: usize,
        subtask: String,
    },
    Removed {
        old_step: usize,
        subtask: String,
    },
    Modified {
        old_step: usize,
        new_step: usize,
        subtask: String,
    },
}

fn title_key(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Aligns steps by subtask title (longest common subsequence over
/// whitespace- and case-normalized titles). Matched steps whose bodies
/// differ are `Modified`; the rest are `Added` or `Removed`.
pub fn diff_plans(old: &KnowledgePlan, new: &KnowledgePlan) -> Vec<PlanChange> {
    let a: Vec<String> = old.steps().iter().map(|s| title_key(&s.subtask)).collect();
    let b: Vec<String> = new.steps().iter().map(|s| title_key(&s.subtask)).collect();
    let (n, m) = (a.len(), b.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let body = |s: &PlanStep| (s.actions.clone(), s.purpose.clone());
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] {
            let (os, ns) = (&old.steps()[i], &new.steps()[j]);
            if body(os) != body(ns) || os.subtask != ns.subtask {
                out.push(PlanChange::Modified {
                    old_step: os.number,
                    new_step: ns.number,
                    subtask: ns.subtask.clone(),
                });
            }
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            let ns = &new.steps()[j];
            out.push(PlanChange::Added {
                new_step: ns.number,
                subtask: ns.subtask.clone(),
            });
            j += 1;
        } else {
            let os = &old.steps()[i];
            out.push(PlanChange::Removed {
                old_step: os.number,
                subtask: os.subtask.clone(),
            });
            i += 1;
        }
    }
    out
}
