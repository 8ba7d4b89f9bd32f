//! Task sharding, per-repeat success rates and stability statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::hash::ContentHash;
use crate::model::{TaskId, DEFAULT_MAX_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdConvention {
    /// Divides by n - 1.
    #[default]
    Sample,
    /// Divides by n.
    Population,
}

impl StdConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sample => "sample",
            Self::Population => "population",
        }
    }
}

/// Min/max/std/avg over per-repeat success rates, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub min: f64,
    pub max: f64,
    pub std: f64,
    pub avg: f64,
    pub convention: StdConvention,
}

/// `None` for an empty slice. A single sample-convention value has std 0.
pub fn run_stats(rates: &[f64], convention: StdConvention) -> Option<RunStats> {
    if rates.is_empty() {
        return None;
    }
    let n = rates.len() as f64;
    let avg = rates.iter().sum::<f64>() / n;
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ss: f64 = rates.iter().map(|r| (r - avg) * (r - avg)).sum();
    let denom = match convention {
        StdConvention::Sample => n - 1.0,
        StdConvention::Population => n,
    };
    let std = if denom > 0.0 {
        libm::sqrt(ss / denom)
    } else {
        0.0
    };
    // Rounding can push the mean a hair outside [min, max] for equal values.
    Some(RunStats {
        min,
        max,
        std,
        avg: avg.clamp(min, max),
        convention,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub instruction: String,
    pub group: String,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<TaskId>,
        instruction: impl Into<String>,
        group: impl Into<String>,
    ) -> Option<Self> {
        let group = group.into();
        (!group.trim().is_empty()).then(|| Self {
            task_id: task_id.into(),
            instruction: instruction.into(),
            group,
            max_steps: DEFAULT_MAX_STEPS,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub task_id: TaskId,
    pub repeat_index: usize,
    pub success: bool,
    #[serde(default)]
    pub trajectory: Option<ContentHash>,
    #[serde(default)]
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ShardError {
    #[error("worker count must be at least 1")]
    InvalidWorkers,
}

/// Contiguous ranges over `0..n`; the first `n % workers` get one extra
/// item. Empty ranges are left out.
pub fn shard_ranges(n: usize, workers: usize) -> Result<Vec<Range<usize>>, ShardError> {
    if workers == 0 {
        return Err(ShardError::InvalidWorkers);
    }
    let (base, extra) = (n / workers, n % workers);
    let mut out = Vec::with_capacity(workers.min(n));
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        if len == 0 {
            break;
        }
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

pub fn shard<T>(items: &[T], workers: usize) -> Result<Vec<&[T]>, ShardError> {
    Ok(shard_ranges(items.len(), workers)?
        .into_iter()
        .map(|r| &items[r])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRates {
    pub repeat: usize,
    pub successes: usize,
    pub total: usize,
    pub overall: f64,
    pub groups: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repeats: Vec<RepeatRates>,
    pub overall: Option<RunStats>,
    pub groups: BTreeMap<String, RunStats>,
}

fn percent(successes: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        successes as f64 * 100.0 / total as f64
    }
}

/// Success rate per repeat (overall and per group), then [`RunStats`] over
/// the repeats. Tasks missing from `groups` are counted under `"ungrouped"`.
pub fn aggregate(
    outcomes: &[RunOutcome],
    groups: &BTreeMap<TaskId, String>,
    convention: StdConvention,
) -> Aggregate {
    const UNGROUPED: &str = "ungrouped";
    // repeat -> group -> (successes, total)
    let mut table: BTreeMap<usize, BTreeMap<&str, (usize, usize)>> = BTreeMap::new();
    for o in outcomes {
        let group = groups.get(&o.task_id).map_or(UNGROUPED, String::as_str);
        let cell = table
            .entry(o.repeat_index)
            .or_default()
            .entry(group)
            .or_default();
        cell.0 += usize::from(o.success);
        cell.1 += 1;
    }
    let group_names: BTreeSet<&str> = table.values().flat_map(|g| g.keys().copied()).collect();
    let repeats: Vec<RepeatRates> = table
        .iter()
        .map(|(&repeat, cells)| {
            let successes = cells.values().map(|c| c.0).sum();
            let total = cells.values().map(|c| c.1).sum();
            RepeatRates {
                repeat,
                successes,
                total,
                overall: percent(successes, total),
                groups: cells
                    .iter()
                    .map(|(g, c)| (String::from(*g), percent(c.0, c.1)))
                    .collect(),
            }
        })
        .collect();
    let overall_rates: Vec<f64> = repeats.iter().map(|r| r.overall).collect();
    let group_stats = group_names
        .into_iter()
        .filter_map(|g| {
            let rates: Vec<f64> = repeats
                .iter()
                .filter_map(|r| r.groups.get(g).copied())
                .collect();
            run_stats(&rates, convention).map(|s| (String::from(g), s))
        })
        .collect();
    Aggregate {
        overall: run_stats(&overall_rates, convention),
        repeats,
        groups: group_stats,
    }
}

/// Makespan under a simple time model: each worker pays `setup` once and
/// then runs its shard serially; workers run concurrently.
pub fn simulated_makespan(
    durations: &[u64],
    workers: usize,
    setup: u64,
) -> Result<u64, ShardError> {
    Ok(shard(durations, workers)?
        .into_iter()
        .map(|s| setup + s.iter().sum::<u64>())
        .max()
        .unwrap_or(0))
}
