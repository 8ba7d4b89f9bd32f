//! Versioned knowledge store.
//!
//! Layout under the root directory:
//!
//! ```text
//! tasks/<task>.jsonl      one line per version, oldest first
//! tasks/<task>.lock       per-task writer lock
//! snapshots/<id>.json     frozen views of the latest versions
//! ```
//!
//! `<task>` is the task id with every byte outside `[A-Za-z0-9_-]`
//! written as `%XX`. Each journal line is
//!
//! ```text
//! {"hash":"<sha256 of record JSON>","stored_at":<unix seconds>,"record":{...}}
//! ```
//!
//! where the hash covers the record's compact JSON exactly as it appears in
//! the line and nothing else. Journals are replaced whole (temp file, fsync,
//! rename), so a crash leaves either the old or the new journal. A torn
//! final line left by any other writer is ignored on read.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use evolkit_core::hash::CanonicalHasher;
use evolkit_core::{ContentHash, KnowledgeRecord, ModelError, Provenance, TaskId};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::fsutil::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no knowledge for task {0}")]
    NotFound(TaskId),
    #[error("task {task} has no version {version}")]
    VersionNotFound { task: TaskId, version: u32 },
    #[error("task {task}: parent version {parent} is not stored")]
    ParentMissing { task: TaskId, parent: u32 },
    #[error("task {task}: version {version} is already stored")]
    VersionConflict { task: TaskId, version: u32 },
    #[error("invalid record: {0}")]
    Invalid(#[from] ModelError),
    #[error("{path}:{line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no snapshot {0}")]
    SnapshotNotFound(String),
    #[error("task {0} is not part of the snapshot")]
    NotInSnapshot(TaskId),
    #[error("snapshot {id}: stored record for {task} no longer matches its hash")]
    SnapshotMismatch { id: String, task: TaskId },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    hash: ContentHash,
    stored_at: u64,
    record: &'a RawValue,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    hash: ContentHash,
    stored_at: u64,
    #[serde(borrow)]
    record: &'a RawValue,
}

/// A record as held in a journal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub record: KnowledgeRecord,
    pub hash: ContentHash,
    pub stored_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub version: u32,
    pub hash: ContentHash,
}

/// The latest version of every task at freeze time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub snapshot_id: String,
    pub created_at: u64,
    pub records: BTreeMap<TaskId, SnapshotRef>,
}

fn snapshot_id(records: &BTreeMap<TaskId, SnapshotRef>) -> String {
    let mut h = CanonicalHasher::new("evolkit.snapshot.v1");
    h.u64(records.len() as u64);
    for (task, r) in records {
        h.str(task.as_str()).u64(u64::from(r.version)).hash(&r.hash);
    }
    h.finish().to_string()
}

/// Canonical record text: compact JSON in field declaration order.
pub fn canonical_json(record: &KnowledgeRecord) -> String {
    serde_json::to_string(record).expect("record serializes")
}

pub fn record_hash(record: &KnowledgeRecord) -> ContentHash {
    ContentHash::of(canonical_json(record).as_bytes())
}

pub fn escape_task(id: &TaskId) -> String {
    let mut out = String::new();
    for b in id.as_str().bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn unescape_task(name: &str) -> Option<TaskId> {
    let bytes = name.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = name.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok().map(TaskId::new)
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    root: PathBuf,
}

/// Holds a task's writer lock until dropped.
struct TaskLock(File);

impl Drop for TaskLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

impl KnowledgeStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["tasks", "snapshots"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn journal_path(&self, task: &TaskId) -> PathBuf {
        self.root
            .join("tasks")
            .join(format!("{}.jsonl", escape_task(task)))
    }

    fn lock(&self, task: &TaskId) -> Result<TaskLock, StoreError> {
        let path = self
            .root
            .join("tasks")
            .join(format!("{}.lock", escape_task(task)));
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.lock().map_err(io_err(&path))?;
        Ok(TaskLock(f))
    }

    fn read_journal(&self, task: &TaskId) -> Result<Vec<StoredRecord>, StoreError> {
        let path = self.journal_path(task);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, raw) in lines.iter().enumerate() {
            let corrupt = |reason: String| StoreError::Corrupt {
                path: path.clone(),
                line: i + 1,
                reason,
            };
            let torn_tail = i + 1 == lines.len() && !raw.ends_with('\n');
            let parsed = serde_json::from_str::<LineIn>(raw.trim_end())
                .map_err(|e| e.to_string())
                .and_then(|l| {
                    if ContentHash::of(l.record.get().as_bytes()) != l.hash {
                        return Err("record does not match its hash".into());
                    }
                    let record: KnowledgeRecord =
                        serde_json::from_str(l.record.get()).map_err(|e| e.to_string())?;
                    Ok(StoredRecord {
                        record,
                        hash: l.hash,
                        stored_at: l.stored_at,
                    })
                });
            match parsed {
                Ok(r) => out.push(r),
                Err(reason) if torn_tail => {
                    log::warn!("{}: ignoring torn final line ({reason})", path.display());
                }
                Err(reason) => return Err(corrupt(reason)),
            }
        }
        for (k, r) in out.iter().enumerate() {
            if r.record.version as usize != k + 1 || &r.record.task_id != task {
                return Err(StoreError::Corrupt {
                    path: path.clone(),
                    line: k + 1,
                    reason: format!("expected version {} of {task}", k + 1),
                });
            }
        }
        Ok(out)
    }

    fn write_journal(&self, task: &TaskId, entries: &[StoredRecord]) -> Result<(), StoreError> {
        let mut text = String::new();
        for e in entries {
            let json = canonical_json(&e.record);
            let raw = RawValue::from_string(json).expect("canonical JSON is valid");
            let line = LineOut {
                hash: e.hash,
                stored_at: e.stored_at,
                record: &raw,
            };
            text.push_str(&serde_json::to_string(&line).expect("line serializes"));
            text.push('\n');
        }
        let path = self.journal_path(task);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    /// Appends a record. Returns the stored version.
    pub fn put(&self, record: &KnowledgeRecord) -> Result<u32, StoreError> {
        record.validate()?;
        let task = &record.task_id;
        let _guard = self.lock(task)?;
        let mut entries = self.read_journal(task)?;
        if entries.iter().any(|e| e.record.version == record.version) {
            return Err(StoreError::VersionConflict {
                task: task.clone(),
                version: record.version,
            });
        }
        if let Some(parent) = record.parent_version {
            if !entries.iter().any(|e| e.record.version == parent) {
                return Err(StoreError::ParentMissing {
                    task: task.clone(),
                    parent,
                });
            }
        }
        entries.push(StoredRecord {
            hash: record_hash(record),
            record: record.clone(),
            stored_at: now_unix(),
        });
        self.write_journal(task, &entries)?;
        Ok(record.version)
    }

    pub fn history(&self, task: &TaskId) -> Result<Vec<KnowledgeRecord>, StoreError> {
        Ok(self
            .read_journal(task)?
            .into_iter()
            .map(|e| e.record)
            .collect())
    }

    pub fn stored_history(&self, task: &TaskId) -> Result<Vec<StoredRecord>, StoreError> {
        self.read_journal(task)
    }

    pub fn get_latest(&self, task: &TaskId) -> Result<KnowledgeRecord, StoreError> {
        self.read_journal(task)?
            .pop()
            .map(|e| e.record)
            .ok_or_else(|| StoreError::NotFound(task.clone()))
    }

    pub fn get_version(&self, task: &TaskId, version: u32) -> Result<KnowledgeRecord, StoreError> {
        let entries = self.read_journal(task)?;
        if entries.is_empty() {
            return Err(StoreError::NotFound(task.clone()));
        }
        entries
            .into_iter()
            .find(|e| e.record.version == version)
            .map(|e| e.record)
            .ok_or_else(|| StoreError::VersionNotFound {
                task: task.clone(),
                version,
            })
    }

    /// Every task with at least one stored version, sorted.
    pub fn tasks(&self) -> Result<Vec<TaskId>, StoreError> {
        let dir = self.root.join("tasks");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let name = entry.map_err(io_err(&dir))?.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) else {
                continue;
            };
            if let Some(task) = unescape_task(stem) {
                if !self.read_journal(&task)?.is_empty() {
                    out.push(task);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn export_latest(&self) -> Result<Vec<KnowledgeRecord>, StoreError> {
        self.tasks()?.iter().map(|t| self.get_latest(t)).collect()
    }

    /// Pins the latest version of every task. Freezing an unchanged store
    /// again yields the same id and leaves the existing file untouched.
    pub fn freeze_snapshot(&self) -> Result<Snapshot, StoreError> {
        let mut records = BTreeMap::new();
        for task in self.tasks()? {
            if let Some(last) = self.read_journal(&task)?.pop() {
                records.insert(
                    task,
                    SnapshotRef {
                        version: last.record.version,
                        hash: last.hash,
                    },
                );
            }
        }
        let id = snapshot_id(&records);
        let path = self.snapshot_path(&id);
        if path.exists() {
            return self.load_snapshot(&id);
        }
        let snap = Snapshot {
            snapshot_id: id,
            created_at: now_unix(),
            records,
        };
        let mut json = serde_json::to_vec_pretty(&snap).expect("snapshot serializes");
        json.push(b'\n');
        write_atomic(&path, &json).map_err(io_err(&path))?;
        Ok(snap)
    }

    fn snapshot_path(&self, id: &str) -> PathBuf {
        self.root.join("snapshots").join(format!("{id}.json"))
    }

    pub fn load_snapshot(&self, id: &str) -> Result<Snapshot, StoreError> {
        if id.is_empty() || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::SnapshotNotFound(id.into()));
        }
        let path = self.snapshot_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::SnapshotNotFound(id.into()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let snap: Snapshot = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if snapshot_id(&snap.records) != snap.snapshot_id || snap.snapshot_id != id {
            return Err(StoreError::Corrupt {
                path,
                line: 0,
                reason: "snapshot id does not match its contents".into(),
            });
        }
        Ok(snap)
    }

    /// The version pinned by `snap`, checked against the pinned hash.
    pub fn read_at(&self, snap: &Snapshot, task: &TaskId) -> Result<KnowledgeRecord, StoreError> {
        let pin = snap
            .records
            .get(task)
            .ok_or_else(|| StoreError::NotInSnapshot(task.clone()))?;
        let entry = self
            .read_journal(task)?
            .into_iter()
            .find(|e| e.record.version == pin.version)
            .ok_or_else(|| StoreError::VersionNotFound {
                task: task.clone(),
                version: pin.version,
            })?;
        if entry.hash != pin.hash || record_hash(&entry.record) != pin.hash {
            return Err(StoreError::SnapshotMismatch {
                id: snap.snapshot_id.clone(),
                task: task.clone(),
            });
        }
        Ok(entry.record)
    }

    /// Re-reads and re-hashes every record the snapshot names.
    pub fn verify_snapshot(&self, snap: &Snapshot) -> Result<(), StoreError> {
        for task in snap.records.keys() {
            self.read_at(snap, task)?;
        }
        Ok(())
    }

    /// Layers another store's knowledge on top of this one.
    ///
    /// For a task unknown here the whole source history is copied, versions
    /// unchanged. Otherwise the source's latest record is appended as the
    /// next local version (provenance `Evolved`), keeping its plan,
    /// producer model and critique link; a task whose local plan already
    /// equals it is skipped. With `producer` set, only tasks whose source
    /// latest record has that producer are taken. Returns the number of
    /// tasks imported.
    pub fn import_store(
        &self,
        other: &KnowledgeStore,
        producer: Option<&str>,
    ) -> Result<usize, StoreError> {
        let mut count = 0;
        for task in other.tasks()? {
            let source = other.history(&task)?;
            let Some(latest) = source.last() else {
                continue;
            };
            if producer.is_some_and(|p| p != latest.producer_model) {
                continue;
            }
            let _guard = self.lock(&task)?;
            let mut entries = self.read_journal(&task)?;
            let now = now_unix();
            match entries.last() {
                None => {
                    for r in &source {
                        r.validate()?;
                        entries.push(StoredRecord {
                            hash: record_hash(r),
                            record: r.clone(),
                            stored_at: now,
                        });
                    }
                }
                Some(local) if local.record.plan == latest.plan => continue,
                Some(local) => {
                    let record = KnowledgeRecord {
                        provenance: Provenance::Evolved,
                        version: local.record.version + 1,
                        parent_version: Some(local.record.version),
                        ..latest.clone()
                    };
                    entries.push(StoredRecord {
                        hash: record_hash(&record),
                        record,
                        stored_at: now,
                    });
                }
            }
            self.write_journal(&task, &entries)?;
            count += 1;
        }
        Ok(count)
    }
}
