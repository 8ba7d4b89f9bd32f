//! Retrace stage: objective per-step actions from before/after screenshots.
//!
//! Each step is sent to a multimodal model with the retrace prompt, the
//! executed code and both screenshots. The answer must follow the
//! `[A] BEFORE` / `[B] OPERATIONS` grammar. A malformed answer earns one
//! corrective reprompt; a second failure degrades the step to
//! [`RetraceOutcome::Indeterminate`] instead of aborting the trajectory.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::gateway::{
    ChatMessage, ChatModel, CompletionRequest, GatewayError, Part, StageSettings,
};
use crate::model::{
    ObjectiveActionSequence, OperationLine, RetraceOutcome, Step, StepRetrace, Trajectory,
};
use crate::prompts::{self, NO_OPERATIONS, UNDETERMINED};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RetraceError {
    #[error("step {step}: {which} observation is missing")]
    MissingObservation { step: usize, which: &'static str },
    #[error("malformed retrace output: {0}")]
    Malformed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Builds the retrace request for one step: the prompt with the code slot
/// filled, then the BEFORE and AFTER screenshots in that order.
pub fn build_retrace_prompt(
    step: &Step,
    stage: &StageSettings,
) -> Result<CompletionRequest, RetraceError> {
    let missing = |which| RetraceError::MissingObservation {
        step: step.index,
        which,
    };
    let pre = step.pre.as_ref().ok_or_else(|| missing("pre"))?;
    let post = step.post.as_ref().ok_or_else(|| missing("post"))?;
    let text = prompts::RETRACE.replacen(prompts::CODE_SLOT, &step.executed_code, 1);
    let message = ChatMessage::user(vec![
        Part::Text(text),
        Part::Image(pre.image.clone()),
        Part::Image(post.image.clone()),
    ]);
    Ok(CompletionRequest::new(stage, vec![message])?)
}

/// Parses a retrace answer.
///
/// Bullets of part B split at their first comma into action and visible
/// consequence. The two sentinel bullets must stand alone.
pub fn parse_retrace_output(step_index: usize, text: &str) -> Result<StepRetrace, RetraceError> {
    let malformed = |msg: String| Err(RetraceError::Malformed(msg));
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with("```"))
        .collect();
    let header = |tag: &str| {
        lines
            .iter()
            .position(|l| strip_emphasis(l).starts_with(tag))
    };
    let Some(a) = header("[A]") else {
        return malformed("missing [A] BEFORE header".into());
    };
    let Some(b) = header("[B]") else {
        return malformed("missing [B] OPERATIONS header".into());
    };
    if b < a {
        return malformed("[B] OPERATIONS precedes [A] BEFORE".into());
    }

    let before: Vec<&str> = lines[a + 1..b]
        .iter()
        .copied()
        .filter(|l| !l.is_empty())
        .collect();
    let before_description = before.join(" ");

    let mut bullets = Vec::new();
    for line in lines[b + 1..].iter().filter(|l| !l.is_empty()) {
        match line.strip_prefix('-') {
            Some(body) => bullets.push(body.trim()),
            None => return malformed(format!("non-bullet line in part B: {line:?}")),
        }
    }
    if bullets.is_empty() {
        return malformed("part B has no bullets".into());
    }

    let sentinel = |s: &str| bullets.contains(&s);
    let outcome = if sentinel(NO_OPERATIONS) || sentinel(UNDETERMINED) {
        if bullets.len() != 1 {
            return malformed("sentinel bullet mixed with other bullets".into());
        }
        if bullets[0] == NO_OPERATIONS {
            RetraceOutcome::NoOp
        } else {
            RetraceOutcome::Indeterminate
        }
    } else {
        let mut ops = Vec::with_capacity(bullets.len());
        for bullet in bullets {
            let (action, consequence) = match bullet.split_once(',') {
                Some((a, c)) => (a.trim(), c.trim()),
                None => (bullet, ""),
            };
            if action.is_empty() {
                return malformed(format!("bullet without an action: {bullet:?}"));
            }
            ops.push(OperationLine::new(action, consequence));
        }
        RetraceOutcome::Operations(ops)
    };
    Ok(StepRetrace {
        step_index,
        before_description,
        outcome,
    })
}

fn strip_emphasis(line: &str) -> &str {
    line.trim_start_matches(['#', '*', ' ']).trim()
}

fn corrective_suffix(problem: &RetraceError) -> String {
    format!(
        "Your previous reply could not be used ({problem}). Reply again with ONLY the two \
         sections in the OUTPUT FORMAT (STRICT): the line \"[A] BEFORE\" followed by the \
         description, then the line \"[B] OPERATIONS\" followed by \"-\" bullets."
    )
}

/// Retraces one step: build, complete, parse, with one corrective reprompt.
///
/// Only gateway failures are errors. A step missing a screenshot, or whose
/// answer stays malformed after the reprompt, comes back indeterminate.
pub fn retrace_step<M: ChatModel + ?Sized>(
    step: &Step,
    model: &M,
    stage: &StageSettings,
) -> Result<StepRetrace, RetraceError> {
    let request = match build_retrace_prompt(step, stage) {
        Ok(r) => r,
        Err(e @ RetraceError::MissingObservation { .. }) => {
            log::warn!("retrace: {e}; marking step indeterminate");
            return Ok(StepRetrace::indeterminate(step.index));
        }
        Err(e) => return Err(e),
    };
    let first = model.complete(&request)?;
    let problem = match parse_retrace_output(step.index, &first.text) {
        Ok(r) => return Ok(r),
        Err(e) => e,
    };
    let retry = request.followed_by(corrective_suffix(&problem));
    let second = model.complete(&retry)?;
    match parse_retrace_output(step.index, &second.text) {
        Ok(r) => Ok(r),
        Err(e) => {
            log::warn!(
                "retrace: step {} still malformed after reprompt ({e}); raw output: {:?}",
                step.index,
                second.text
            );
            Ok(StepRetrace::indeterminate(step.index))
        }
    }
}

/// Retraces every step of a trajectory, in order. Any gateway error aborts
/// the whole trajectory; no partial sequence is returned.
pub fn retrace_trajectory<M: ChatModel + ?Sized>(
    trajectory: &Trajectory,
    model: &M,
    stage: &StageSettings,
) -> Result<ObjectiveActionSequence, RetraceError> {
    let entries = trajectory
        .steps
        .iter()
        .map(|s| retrace_step(s, model, stage))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ObjectiveActionSequence {
        task_id: trajectory.task_id.clone(),
        entries,
    })
}

/// Renders the objective action list consumed by critique and selection.
///
/// One `Step k:` block per entry, blocks separated by a blank line. Null and
/// indeterminate steps keep their sentinel bullet so step numbers stay
/// citable.
pub fn render_action_list(seq: &ObjectiveActionSequence) -> String {
    let mut out = String::new();
    for (i, entry) in seq.entries.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "Step {}:", entry.step_index);
        match &entry.outcome {
            RetraceOutcome::Operations(ops) => {
                for op in ops {
                    let _ = writeln!(out, "- {}", op.text());
                }
            }
            RetraceOutcome::NoOp => {
                let _ = writeln!(out, "- {NO_OPERATIONS}");
            }
            RetraceOutcome::Indeterminate => {
                let _ = writeln!(out, "- {UNDETERMINED}");
            }
        }
    }
    out
}
