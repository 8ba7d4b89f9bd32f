//! Prompt templates, stored verbatim (trailing whitespace included).

/// Per-step retrace prompt. `{code}` is replaced by the executed snippet;
/// the BEFORE and AFTER screenshots follow as `<image0>` and `<image1>`.
pub const RETRACE: &str = include_str!("prompts/retrace.txt");

/// Critique prompt. The three `…` INPUT slots are filled in place.
pub const CRITIQUE: &str = include_str!("prompts/critique.txt");

/// Completion-based selection prompt over three candidate pairs.
pub const SELECTION: &str = include_str!("prompts/selection.txt");

/// Placeholder for the executed code in [`RETRACE`].
pub const CODE_SLOT: &str = "{code}";

pub const NO_OPERATIONS: &str = "No operations performed.";
pub const UNDETERMINED: &str = "Unable to determine operations.";
