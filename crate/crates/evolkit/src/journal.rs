//! Replay fixture journals.
//!
//! A fixture is a UTF-8 file of JSON lines, appended in call order:
//!
//! ```text
//! {"digest":"<sha256 hex>","request":{...RequestShape...},"response":"<model text>"}
//! ```
//!
//! `request` holds the full prompt text with images reduced to their
//! hashes, so each line can be re-verified against its digest. Lines whose
//! digest does not match, and a torn final line, are skipped with a
//! warning. When a digest occurs twice the first line wins.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use evolkit_core::gateway::RequestShape;
use evolkit_core::{
    ChatModel, CompletionRequest, CompletionResult, ContentHash, GatewayError, ReplayModel,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub digest: ContentHash,
    pub request: RequestShape,
    pub response: String,
}

impl FixtureEntry {
    pub fn new(request: &CompletionRequest, response: impl Into<String>) -> Self {
        let request = request.shape();
        Self {
            digest: request.digest(),
            request,
            response: response.into(),
        }
    }

    fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("fixture entry serializes");
        line.push('\n');
        line
    }
}

#[derive(Debug, thiserror::Error)]
#[error("fixture {path}: {source}")]
pub struct JournalError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

/// Reads every valid entry of a fixture file.
pub fn read_entries(path: &Path) -> Result<Vec<FixtureEntry>, JournalError> {
    let err = |source| JournalError {
        path: path.to_owned(),
        source,
    };
    let file = File::open(path).map_err(err)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<FixtureEntry>(&line) {
            Ok(e) if e.request.digest() == e.digest => out.push(e),
            Ok(e) => log::warn!(
                "{}:{}: digest {} does not match request, skipped",
                path.display(),
                n + 1,
                e.digest
            ),
            Err(e) => log::warn!(
                "{}:{}: unreadable fixture line skipped: {e}",
                path.display(),
                n + 1
            ),
        }
    }
    Ok(out)
}

pub fn load_replay(path: &Path) -> Result<ReplayModel, JournalError> {
    Ok(read_entries(path)?
        .into_iter()
        .map(|e| (e.digest, e.response))
        .collect())
}

/// Loads several fixtures into one replay model; earlier files win.
pub fn load_replay_all<P: AsRef<Path>>(paths: &[P]) -> Result<ReplayModel, JournalError> {
    let mut model = ReplayModel::new();
    for p in paths {
        for e in read_entries(p.as_ref())? {
            model.insert(e.digest, e.response);
        }
    }
    Ok(model)
}

/// Appends entries to a fixture file. Safe to share between threads.
#[derive(Debug)]
pub struct JournalWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl JournalWriter {
    pub fn open(path: &Path) -> Result<Self, JournalError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| JournalError {
                path: path.to_owned(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| JournalError {
                path: path.to_owned(),
                source,
            })?;
        Ok(Self {
            path: path.to_owned(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// One `write` per entry, under the lock, so concurrent appends never
    /// interleave.
    pub fn append(&self, entry: &FixtureEntry) -> io::Result<()> {
        let line = entry.to_line();
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

/// Record mode: forwards to `inner` and journals every answer.
pub struct Recorder<M> {
    inner: M,
    journal: JournalWriter,
}

impl<M: ChatModel> Recorder<M> {
    pub fn new(inner: M, journal: JournalWriter) -> Self {
        Self { inner, journal }
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: ChatModel> ChatModel for Recorder<M> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let result = self.inner.complete(request)?;
        let entry = FixtureEntry::new(request, result.text.clone());
        if let Err(e) = self.journal.append(&entry) {
            log::error!(
                "could not append to fixture {}: {e}",
                self.journal.path().display()
            );
        }
        Ok(result)
    }
}
