//! Domain types shared across the pipeline.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::hash::{CanonicalHasher, ContentHash};
use crate::plan::{PlanError, PlanErrorKind};

/// Default per-task step budget of the agent under evaluation.
pub const DEFAULT_MAX_STEPS: usize = 15;

/// Upper bound on the number of steps in a knowledge plan.
pub const MAX_PLAN_STEPS: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("screenshot payload is empty")]
    EmptyScreenshot,
    #[error("step {index}: {which} observation has step_index {found}, expected {expected}")]
    ObservationIndex {
        index: usize,
        which: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("step {index}: executed code is empty but a subjective action is present")]
    EmptyCode { index: usize },
    #[error("steps are not contiguous: position {position} holds step {found}")]
    NonContiguous { position: usize, found: usize },
    #[error("trajectory has {count} steps, maximum is {max}")]
    TooManySteps { count: usize, max: usize },
    #[error("retrace entry {position} has step_index {found}, expected {expected}")]
    RetraceOrder {
        position: usize,
        found: usize,
        expected: usize,
    },
    #[error("operation list is empty")]
    EmptyOperations,
    #[error("record {version}: {reason}")]
    InvalidRecord { version: u32, reason: &'static str },
}

/// Opaque benchmark task identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        Self(s.into())
    }
}

impl From<String> for TaskId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Encoded screenshot bytes plus their content hash.
///
/// The payload is reference counted, so cloning a trajectory never copies
/// image data.
#[derive(Clone, PartialEq, Eq)]
pub struct Screenshot {
    digest: ContentHash,
    bytes: Arc<[u8]>,
}

impl Screenshot {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Result<Self, ModelError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(ModelError::EmptyScreenshot);
        }
        Ok(Self {
            digest: ContentHash::of(&bytes),
            bytes,
        })
    }

    pub fn digest(&self) -> ContentHash {
        self.digest
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl fmt::Debug for Screenshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Screenshot")
            .field("digest", &self.digest)
            .field("len", &self.bytes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub step_index: usize,
    pub image: Screenshot,
    pub captured_at: Option<String>,
}

impl Observation {
    pub fn new(step_index: usize, image: Screenshot) -> Self {
        Self {
            step_index,
            image,
            captured_at: None,
        }
    }
}

/// One agent step: the screen before, the screen after and the code run in
/// between.
///
/// Either observation may be absent when capture failed; retrace treats such
/// a step as indeterminate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub index: usize,
    pub pre: Option<Observation>,
    pub post: Option<Observation>,
    pub executed_code: String,
    /// What the agent said it intended. Kept for audit, never sent to critique.
    pub subjective_action: Option<String>,
}

impl Step {
    pub fn new(index: usize, pre: Screenshot, post: Screenshot, code: impl Into<String>) -> Self {
        Self {
            index,
            pre: Some(Observation::new(index, pre)),
            post: Some(Observation::new(index + 1, post)),
            executed_code: code.into(),
            subjective_action: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |obs: &Option<Observation>, which, expected| match obs {
            Some(o) if o.step_index != expected => Err(ModelError::ObservationIndex {
                index: self.index,
                which,
                found: o.step_index,
                expected,
            }),
            _ => Ok(()),
        };
        check(&self.pre, "pre", self.index)?;
        check(&self.post, "post", self.index + 1)?;
        if self.executed_code.is_empty() && self.subjective_action.is_some() {
            return Err(ModelError::EmptyCode { index: self.index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub task_id: TaskId,
    pub instruction: String,
    pub steps: Vec<Step>,
    pub terminal_success: Option<bool>,
    pub producer_model: String,
}

impl Trajectory {
    /// Builds a trajectory, checking step contiguity and the step budget.
    pub fn new(
        task_id: TaskId,
        instruction: impl Into<String>,
        steps: Vec<Step>,
        producer_model: impl Into<String>,
        max_steps: usize,
    ) -> Result<Self, ModelError> {
        let t = Self {
            task_id,
            instruction: instruction.into(),
            steps,
            terminal_success: None,
            producer_model: producer_model.into(),
        };
        t.validate(max_steps)?;
        Ok(t)
    }

    pub fn validate(&self, max_steps: usize) -> Result<(), ModelError> {
        if self.steps.len() > max_steps {
            return Err(ModelError::TooManySteps {
                count: self.steps.len(),
                max: max_steps,
            });
        }
        for (position, step) in self.steps.iter().enumerate() {
            if step.index != position {
                return Err(ModelError::NonContiguous {
                    position,
                    found: step.index,
                });
            }
            step.validate()?;
        }
        Ok(())
    }

    /// Content hash over the task, the code and the screenshot digests.
    pub fn digest(&self) -> ContentHash {
        let mut h = CanonicalHasher::new("evolkit.trajectory.v1");
        h.str(self.task_id.as_str())
            .str(&self.instruction)
            .str(&self.producer_model)
            .u64(self.steps.len() as u64);
        for step in &self.steps {
            h.u64(step.index as u64).str(&step.executed_code);
            for obs in [&step.pre, &step.post] {
                match obs {
                    Some(o) => h.tag(1).hash(&o.image.digest()),
                    None => h.tag(0),
                };
            }
        }
        h.finish()
    }
}

/// One `- action, consequence` bullet of a retrace answer.
///
/// `consequence` is empty when the bullet carried no comma.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationLine {
    pub action: String,
    pub consequence: String,
}

impl OperationLine {
    pub fn new(action: impl Into<String>, consequence: impl Into<String>) -> Self {
        Self {
            action: action.into(),
            consequence: consequence.into(),
        }
    }

    /// The bullet text without the leading `- `.
    pub fn text(&self) -> String {
        if self.consequence.is_empty() {
            self.action.clone()
        } else {
            alloc::format!("{}, {}", self.action, self.consequence)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "operations")]
pub enum RetraceOutcome {
    Operations(Vec<OperationLine>),
    /// Only the clock changed; the objective action is null.
    NoOp,
    /// The screenshots could not be compared.
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRetrace {
    pub step_index: usize,
    pub before_description: String,
    pub outcome: RetraceOutcome,
}

impl StepRetrace {
    pub fn operations(
        step_index: usize,
        before_description: impl Into<String>,
        lines: Vec<OperationLine>,
    ) -> Result<Self, ModelError> {
        if lines.is_empty() {
            return Err(ModelError::EmptyOperations);
        }
        Ok(Self {
            step_index,
            before_description: before_description.into(),
            outcome: RetraceOutcome::Operations(lines),
        })
    }

    pub fn indeterminate(step_index: usize) -> Self {
        Self {
            step_index,
            before_description: String::new(),
            outcome: RetraceOutcome::Indeterminate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveActionSequence {
    pub task_id: TaskId,
    pub entries: Vec<StepRetrace>,
}

impl ObjectiveActionSequence {
    pub fn new(task_id: TaskId, entries: Vec<StepRetrace>) -> Result<Self, ModelError> {
        for (position, e) in entries.iter().enumerate() {
            if e.step_index != position {
                return Err(ModelError::RetraceOrder {
                    position,
                    found: e.step_index,
                    expected: position,
                });
            }
        }
        Ok(Self { task_id, entries })
    }

    pub fn indeterminate_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.outcome == RetraceOutcome::Indeterminate)
            .count()
    }
}

/// A numbered subtask of a knowledge plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub number: usize,
    pub subtask: String,
    pub actions: Vec<String>,
    pub purpose: String,
}

impl PlanStep {
    pub fn new(
        number: usize,
        subtask: impl Into<String>,
        actions: impl IntoIterator<Item = impl Into<String>>,
        purpose: impl Into<String>,
    ) -> Self {
        Self {
            number,
            subtask: subtask.into(),
            actions: actions.into_iter().map(Into::into).collect(),
            purpose: purpose.into(),
        }
    }
}

/// An ordered list of 1 to 15 subtask steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PlanStep>", into = "Vec<PlanStep>")]
pub struct KnowledgePlan {
    steps: Vec<PlanStep>,
}

impl KnowledgePlan {
    pub fn new(steps: Vec<PlanStep>) -> Result<Self, PlanError> {
        if steps.is_empty() {
            return Err(PlanError::new(PlanErrorKind::Empty));
        }
        if steps.len() > MAX_PLAN_STEPS {
            return Err(
                PlanError::new(PlanErrorKind::TooManySteps { count: steps.len() })
                    .at_step(MAX_PLAN_STEPS + 1),
            );
        }
        for (i, step) in steps.iter().enumerate() {
            let n = i + 1;
            let err = |kind| Err(PlanError::new(kind).at_step(n));
            if step.number != n {
                return err(PlanErrorKind::NonConsecutive { found: step.number });
            }
            if !canonical_text(&step.subtask)
                || step.subtask.ends_with(':')
                || step.subtask.starts_with('*')
                || step.subtask.ends_with('*')
            {
                return err(PlanErrorKind::NonCanonicalText);
            }
            if step.actions.is_empty() {
                return err(PlanErrorKind::NoActions);
            }
            for action in &step.actions {
                if is_shell_prompt(action) {
                    return err(PlanErrorKind::ShellPrompt);
                }
                if !canonical_text(action) || crate::plan::purpose_body(action).is_some() {
                    return err(PlanErrorKind::NonCanonicalText);
                }
            }
            if step.purpose.is_empty() {
                return err(PlanErrorKind::MissingPurpose);
            }
            if !canonical_text(&step.purpose) {
                return err(PlanErrorKind::NonCanonicalText);
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// All action texts joined by newlines.
    pub fn action_text(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            for a in &s.actions {
                out.push_str(a);
                out.push('\n');
            }
        }
        out
    }
}

impl TryFrom<Vec<PlanStep>> for KnowledgePlan {
    type Error = PlanError;

    fn try_from(steps: Vec<PlanStep>) -> Result<Self, Self::Error> {
        Self::new(steps)
    }
}

impl From<KnowledgePlan> for Vec<PlanStep> {
    fn from(plan: KnowledgePlan) -> Self {
        plan.steps
    }
}

pub(crate) fn is_shell_prompt(action: &str) -> bool {
    let a = action.trim_start();
    a.starts_with('#') || a.starts_with('$')
}

fn canonical_text(s: &str) -> bool {
    !s.is_empty() && s.trim() == s && !s.contains(['\n', '\r'])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    WebSearch,
    Evolved,
}

/// A versioned plan for one task.
///
/// Version 1 is always web-sourced knowledge; every later version points at
/// its immediate predecessor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub task_id: TaskId,
    pub instruction: String,
    pub plan: KnowledgePlan,
    pub provenance: Provenance,
    pub version: u32,
    pub parent_version: Option<u32>,
    pub producer_model: String,
    pub critique_digest: Option<ContentHash>,
}

impl KnowledgeRecord {
    pub fn web_search(
        task_id: TaskId,
        instruction: impl Into<String>,
        plan: KnowledgePlan,
        producer_model: impl Into<String>,
    ) -> Self {
        Self {
            task_id,
            instruction: instruction.into(),
            plan,
            provenance: Provenance::WebSearch,
            version: 1,
            parent_version: None,
            producer_model: producer_model.into(),
            critique_digest: None,
        }
    }

    /// The next version of this record, carrying a new plan.
    pub fn successor(
        &self,
        plan: KnowledgePlan,
        producer_model: impl Into<String>,
        critique_digest: Option<ContentHash>,
    ) -> Self {
        Self {
            task_id: self.task_id.clone(),
            instruction: self.instruction.clone(),
            plan,
            provenance: Provenance::Evolved,
            version: self.version + 1,
            parent_version: Some(self.version),
            producer_model: producer_model.into(),
            critique_digest,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason| {
            Err(ModelError::InvalidRecord {
                version: self.version,
                reason,
            })
        };
        match (self.version, self.parent_version, self.provenance) {
            (0, _, _) => bad("version must be at least 1"),
            (1, None, Provenance::WebSearch) => Ok(()),
            (1, _, _) => bad("version 1 must be web-sourced without a parent"),
            (_, None, _) => bad("versions above 1 need a parent"),
            (_, _, Provenance::WebSearch) => bad("versions above 1 must be evolved"),
            (v, Some(p), Provenance::Evolved) if p + 1 == v => Ok(()),
            _ => bad("parent must be the immediately preceding version"),
        }
    }
}
