//! Trajectory manifest files.
//!
//! ```json
//! {
//!   "format": "evolkit.trajectory.v1",
//!   "task_id": "capitalize-words",
//!   "instruction": "Capitalize every word in the document",
//!   "producer_model": "gpt-4o",
//!   "terminal_success": false,
//!   "steps": [
//!     { "index": 0, "pre": "blobs/<sha256>.bin", "post": "blobs/<sha256>.bin",
//!       "code": "pyautogui.drag(...)", "subjective_action": "Select the text" }
//!   ]
//! }
//! ```
//!
//! Screenshot paths are relative to the manifest's directory. `pre`/`post`
//! may be `null` when capture failed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use evolkit_core::{ModelError, Observation, Screenshot, Step, TaskId, Trajectory};
use serde::{Deserialize, Serialize};

use crate::blob::{BlobError, BlobStore};
use crate::fsutil::write_atomic;

pub const FORMAT: &str = "evolkit.trajectory.v1";

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("screenshot file {path} is missing or unreadable: {source}")]
    Screenshot {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("screenshot file {0} is empty")]
    EmptyScreenshot(PathBuf),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported format {found:?}, expected {FORMAT:?}")]
    Format { path: PathBuf, found: String },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Blob(#[from] BlobError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub index: usize,
    pub pre: Option<String>,
    pub post: Option<String>,
    #[serde(default)]
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjective_action: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub task_id: TaskId,
    pub instruction: String,
    pub producer_model: String,
    #[serde(default)]
    pub terminal_success: Option<bool>,
    #[serde(default)]
    pub steps: Vec<StepEntry>,
}

fn read_shot(base: &Path, rel: &str) -> Result<Screenshot, ManifestError> {
    let path = base.join(rel);
    let bytes = fs::read(&path).map_err(|source| ManifestError::Screenshot {
        path: path.clone(),
        source,
    })?;
    Screenshot::new(bytes).map_err(|_| ManifestError::EmptyScreenshot(path))
}

/// Reads a manifest and every screenshot it names.
pub fn load_trajectory(path: &Path, max_steps: usize) -> Result<Trajectory, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| ManifestError::Json {
        path: path.to_owned(),
        source,
    })?;
    if m.format != FORMAT {
        return Err(ManifestError::Format {
            path: path.to_owned(),
            found: m.format,
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut steps = Vec::with_capacity(m.steps.len());
    for e in &m.steps {
        let obs = |rel: &Option<String>, at: usize| -> Result<Option<Observation>, ManifestError> {
            rel.as_deref()
                .map(|r| Ok(Observation::new(at, read_shot(base, r)?)))
                .transpose()
        };
        steps.push(Step {
            index: e.index,
            pre: obs(&e.pre, e.index)?,
            post: obs(&e.post, e.index + 1)?,
            executed_code: e.code.clone(),
            subjective_action: e.subjective_action.clone(),
        });
    }
    let mut t = Trajectory::new(m.task_id, m.instruction, steps, m.producer_model, max_steps)
        .map_err(|source| ManifestError::Invalid {
            path: path.to_owned(),
            source,
        })?;
    t.terminal_success = m.terminal_success;
    Ok(t)
}

/// Writes screenshots into `<dir>/blobs/` and the manifest to
/// `<dir>/<file_name>`. Returns the manifest path.
pub fn save_trajectory(
    traj: &Trajectory,
    dir: &Path,
    file_name: &str,
) -> Result<PathBuf, ManifestError> {
    let blobs = BlobStore::new(dir.join("blobs"));
    let mut steps = Vec::with_capacity(traj.steps.len());
    for s in &traj.steps {
        let rel = |o: &Option<Observation>| -> Result<Option<String>, ManifestError> {
            let Some(o) = o else { return Ok(None) };
            blobs.put(&o.image)?;
            Ok(Some(format!("blobs/{}.bin", o.image.digest())))
        };
        steps.push(StepEntry {
            index: s.index,
            pre: rel(&s.pre)?,
            post: rel(&s.post)?,
            code: s.executed_code.clone(),
            subjective_action: s.subjective_action.clone(),
        });
    }
    let m = Manifest {
        format: FORMAT.into(),
        task_id: traj.task_id.clone(),
        instruction: traj.instruction.clone(),
        producer_model: traj.producer_model.clone(),
        terminal_success: traj.terminal_success,
        steps,
    };
    let path = dir.join(file_name);
    let mut json = serde_json::to_vec_pretty(&m).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&path, &json).map_err(|source| ManifestError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
