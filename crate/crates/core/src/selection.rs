//! Choosing one trajectory among repeated runs, and the selection success
//! rate used to judge the choice afterwards.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, ChatModel, CompletionRequest, GatewayError, StageSettings};
use crate::model::KnowledgePlan;
use crate::plan::render_plan;
use crate::prompts;

/// Completion-based selection compares exactly this many pairs.
pub const ARITY: usize = 3;

const MAX_SCORE: u8 = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectionError {
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("completion-based selection needs exactly {ARITY} candidates, got {0}")]
    WrongArity(usize),
    #[error("malformed selection output: {0}")]
    MalformedSelection(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Uniform index in `0..n`, reproducible from `(n, seed)`.
pub fn select_random(n: usize, seed: u64) -> Result<usize, SelectionError> {
    if n == 0 {
        return Err(SelectionError::EmptyCandidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rng.random_range(0..n as u64) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionCandidate {
    /// 1-based position in the prompt.
    pub index: usize,
    pub action_list: String,
    pub plan: KnowledgePlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub scores: BTreeMap<usize, u8>,
    pub best: usize,
    pub analysis: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Completion,
    /// Completion output was malformed twice; a seeded random pick was used.
    RandomFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// 1-based.
    pub index: usize,
    pub method: SelectionMethod,
}

/// The template is kept whole; the filled INPUT block follows it.
pub fn build_selection_prompt(
    instruction: &str,
    candidates: &[SelectionCandidate],
    stage: &StageSettings,
) -> Result<CompletionRequest, SelectionError> {
    if candidates.len() != ARITY {
        return Err(SelectionError::WrongArity(candidates.len()));
    }
    let mut text = String::from(prompts::SELECTION);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    let _ = write!(text, "\nINPUT:\n1. Task Instruction   : {instruction}\n");
    for (k, c) in candidates.iter().enumerate() {
        let n = k + 1;
        let _ = write!(
            text,
            "{}. Action_List{n}:\n{}\n{}. Golden_Plan{n}:\n{}",
            2 * n,
            c.action_list.trim_end(),
            2 * n + 1,
            render_plan(&c.plan),
        );
    }
    Ok(CompletionRequest::new(
        stage,
        vec![ChatMessage::user_text(text)],
    )?)
}

fn leading_int(s: &str) -> Option<(u32, &str)> {
    let s = s.trim_start_matches(|c: char| c.is_whitespace() || c == '*' || c == '[');
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    if end == 0 {
        return None;
    }
    Some((s[..end].parse().ok()?, &s[end..]))
}

/// Values following each case-insensitive `keyword` and a `:`/`=`.
fn keyed_ints<'a>(
    text: &'a str,
    lower: &'a str,
    keyword: &'a str,
) -> impl Iterator<Item = u32> + 'a {
    lower.match_indices(keyword).filter_map(move |(i, _)| {
        let rest = text[i + keyword.len()..].trim_start_matches(['*', '>', ' ', '\t']);
        let rest = rest.strip_prefix([':', '='])?;
        leading_int(rest).map(|(v, _)| v)
    })
}

/// Reads per-pair `Score: N` values (in pair order) and the `Best Pair`.
pub fn parse_selection_output(text: &str) -> Result<SelectionResult, SelectionError> {
    let bad = |m: String| Err(SelectionError::MalformedSelection(m));
    let lower = text.to_ascii_lowercase();
    let scores: Vec<u32> = keyed_ints(text, &lower, "score").collect();
    if scores.len() != ARITY {
        return bad(format!("expected {ARITY} scores, found {}", scores.len()));
    }
    if let Some(s) = scores.iter().find(|s| **s > u32::from(MAX_SCORE)) {
        return bad(format!("score {s} outside 0..{MAX_SCORE}"));
    }
    let Some(best) = keyed_ints(text, &lower, "best pair").last() else {
        return bad("no Best Pair number".into());
    };
    if !(1..=ARITY as u32).contains(&best) {
        return bad(format!("best pair {best} outside 1..{ARITY}"));
    }
    Ok(SelectionResult {
        scores: scores
            .into_iter()
            .enumerate()
            .map(|(k, s)| (k + 1, s as u8))
            .collect(),
        best: best as usize,
        analysis: text.into(),
    })
}

/// Asks the model for the most complete pair. Malformed output gets one
/// corrective reprompt, then a seeded random pick.
pub fn select_completion<M: ChatModel + ?Sized>(
    instruction: &str,
    candidates: &[SelectionCandidate],
    model: &M,
    stage: &StageSettings,
    fallback_seed: u64,
) -> Result<Selection, SelectionError> {
    let request = build_selection_prompt(instruction, candidates, stage)?;
    let first = model.complete(&request)?;
    let err = match parse_selection_output(&first.text) {
        Ok(r) => {
            return Ok(Selection {
                index: r.best,
                method: SelectionMethod::Completion,
            })
        }
        Err(e) => e,
    };
    let retry = request.followed_by(format!(
        "Your previous answer could not be used ({err}). Give a score (0 to 10) for each of the \
         three pairs as `Score: N`, then `Best Pair: N` with N in [1, 2, 3]."
    ));
    let second = model.complete(&retry)?;
    match parse_selection_output(&second.text) {
        Ok(r) => Ok(Selection {
            index: r.best,
            method: SelectionMethod::Completion,
        }),
        Err(e) => {
            log::warn!("selection output malformed twice ({e}); using seeded random pick");
            Ok(Selection {
                index: select_random(ARITY, fallback_seed)? + 1,
                method: SelectionMethod::RandomFallback,
            })
        }
    }
}

/// Per-task outcome of a selection, judged against the success labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SsrRecord {
    selected_succeeded: bool,
    any_succeeded: bool,
}

impl SsrRecord {
    /// `None` if the selected trajectory succeeded while no repeat did.
    pub fn new(selected_succeeded: bool, any_succeeded: bool) -> Option<Self> {
        (!selected_succeeded || any_succeeded).then_some(Self {
            selected_succeeded,
            any_succeeded,
        })
    }

    pub fn selected_succeeded(self) -> bool {
        self.selected_succeeded
    }

    pub fn any_succeeded(self) -> bool {
        self.any_succeeded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsrResult {
    pub n_succ: usize,
    pub n_solv: usize,
}

impl SsrResult {
    /// `None` when no task was solvable.
    pub fn ratio(self) -> Option<f64> {
        (self.n_solv > 0).then(|| self.n_succ as f64 / self.n_solv as f64)
    }
}

pub fn compute_ssr(records: &[SsrRecord]) -> SsrResult {
    SsrResult {
        n_succ: records.iter().filter(|r| r.selected_succeeded).count(),
        n_solv: records.iter().filter(|r| r.any_succeeded).count(),
    }
}
