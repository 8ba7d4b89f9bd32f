//! Knowledge-evolution engine for computer-use agents.
//!
//! The crate is `no_std` + `alloc`. It holds everything that is pure
//! computation: domain types, the plan document grammar, prompt
//! construction and output parsing for the retrace, critique and selection
//! stages, the selection success rate, task sharding and run statistics.
//!
//! Model access goes through the [`gateway::ChatModel`] trait so the stages
//! can run against a live provider or a deterministic replay fixture. File
//! formats, the knowledge store, the worker pool and the CLI live in the
//! `evolkit` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod critique;
pub mod gateway;
pub mod hash;
pub mod model;
pub mod plan;
pub mod prompts;
pub mod retrace;
pub mod selection;
pub mod stats;

pub use critique::{
    build_critique_prompt, diff_plans, evolve, lint_critique, parse_critique_output,
    render_critique, validate_report, CritiqueError, CritiqueReport, PlanChange, RootCause,
    Violation, ViolationRule,
};
pub use gateway::{
    request_digest, BackendKind, ChatMessage, ChatModel, CompletionRequest, CompletionResult,
    GatewayError, MessageShape, Part, PartShape, ReplayModel, RequestShape, Role, StageSettings,
};
pub use hash::ContentHash;
pub use model::{
    KnowledgePlan, KnowledgeRecord, ModelError, ObjectiveActionSequence, Observation,
    OperationLine, PlanStep, Provenance, RetraceOutcome, Screenshot, Step, StepRetrace, TaskId,
    Trajectory, DEFAULT_MAX_STEPS, MAX_PLAN_STEPS,
};
pub use plan::{parse_plan, render_plan, PlanError, PlanErrorKind};
pub use retrace::{
    build_retrace_prompt, parse_retrace_output, render_action_list, retrace_step,
    retrace_trajectory, RetraceError,
};
pub use selection::{
    build_selection_prompt, compute_ssr, parse_selection_output, select_completion, select_random,
    Selection, SelectionCandidate, SelectionError, SelectionMethod, SelectionResult, SsrRecord,
    SsrResult,
};
pub use stats::{
    aggregate, run_stats, shard, shard_ranges, simulated_makespan, Aggregate, RepeatRates,
    RunOutcome, RunStats, ShardError, StdConvention, TaskSpec,
};
