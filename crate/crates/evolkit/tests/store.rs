mod common;

use std::fs;

use evolkit::store::{escape_task, record_hash, KnowledgeStore, StoreError};
use evolkit_core::{KnowledgeRecord, TaskId};

fn v1(task: &str) -> KnowledgeRecord {
    KnowledgeRecord::web_search(
        TaskId::new(task),
        common::INSTRUCTION,
        common::drag_plan(),
        "web-search",
    )
}

#[test]
fn leftover_temp_file_from_interrupted_put_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let store = KnowledgeStore::open(dir.path()).unwrap();
    let rec = v1("t/1");
    store.put(&rec).unwrap();
    let journal = dir
        .path()
        .join("tasks")
        .join(format!("{}.jsonl", escape_task(&rec.task_id)));
    let full = fs::read_to_string(&journal).unwrap();
    // A crash between writing the temp file and renaming it.
    let tmp = journal.with_file_name(format!("{}.jsonl.999.tmp", escape_task(&rec.task_id)));
    fs::write(&tmp, &full[..full.len() / 2]).unwrap();
    assert_eq!(store.history(&rec.task_id).unwrap(), vec![rec.clone()]);
    assert_eq!(store.tasks().unwrap(), vec![rec.task_id.clone()]);
    let next = rec.successor(common::drag_plan(), "o3", None);
    assert_eq!(store.put(&next).unwrap(), 2);
}

#[test]
fn torn_append_reads_as_absent() {
    let dir = tempfile::tempdir().unwrap();
    let store = KnowledgeStore::open(dir.path()).unwrap();
    let rec = v1("t1");
    store.put(&rec).unwrap();
    let journal = dir.path().join("tasks/t1.jsonl");
    let mut text = fs::read_to_string(&journal).unwrap();
    let line = text.clone();
    text.push_str(&line[..line.len() / 3]);
    fs::write(&journal, text).unwrap();
    let h = store.stored_history(&rec.task_id).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].hash, record_hash(&rec));
}

#[test]
fn snapshot_survives_later_writes() {
    let dir = tempfile::tempdir().unwrap();
    let store = KnowledgeStore::open(dir.path()).unwrap();
    let ids: Vec<String> = (0..5).map(|i| format!("task-{i}")).collect();
    for id in &ids {
        store.put(&v1(id)).unwrap();
    }
    let snap = store.freeze_snapshot().unwrap();
    let before: Vec<_> = ids
        .iter()
        .map(|id| store.read_at(&snap, &TaskId::new(id.as_str())).unwrap())
        .collect();
    for k in 0..100 {
        let id = TaskId::new(ids[k % ids.len()].as_str());
        let latest = store.get_latest(&id).unwrap();
        store
            .put(&latest.successor(common::drag_plan(), format!("writer-{k}"), None))
            .unwrap();
    }
    let reloaded = store.load_snapshot(&snap.snapshot_id).unwrap();
    assert_eq!(reloaded, snap);
    store.verify_snapshot(&snap).unwrap();
    for (id, rec) in ids.iter().zip(&before) {
        assert_eq!(
            &store.read_at(&snap, &TaskId::new(id.as_str())).unwrap(),
            rec
        );
        assert_eq!(
            store.get_latest(&TaskId::new(id.as_str())).unwrap().version,
            21
        );
    }
    assert_ne!(
        store.freeze_snapshot().unwrap().snapshot_id,
        snap.snapshot_id
    );
}

#[test]
fn conflicting_versions_and_missing_parents_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = KnowledgeStore::open(dir.path()).unwrap();
    let rec = v1("t");
    store.put(&rec).unwrap();
    assert!(matches!(
        store.put(&rec),
        Err(StoreError::VersionConflict { version: 1, .. })
    ));
    let orphan =
        rec.successor(common::drag_plan(), "o3", None)
            .successor(common::drag_plan(), "o3", None);
    assert!(matches!(
        store.put(&orphan),
        Err(StoreError::ParentMissing { parent: 2, .. })
    ));
}

#[test]
fn concurrent_writers_on_one_task_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let store = KnowledgeStore::open(dir.path()).unwrap();
    let id = TaskId::new("shared");
    store.put(&v1("shared")).unwrap();
    std::thread::scope(|s| {
        for w in 0..4 {
            let (store, id) = (&store, &id);
            s.spawn(move || {
                let mut wrote = 0;
                while wrote < 10 {
                    let latest = store.get_latest(id).unwrap();
                    match store.put(&latest.successor(common::drag_plan(), format!("w{w}"), None)) {
                        Ok(_) => wrote += 1,
                        Err(StoreError::VersionConflict { .. }) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
            });
        }
    });
    let h = store.history(&id).unwrap();
    assert_eq!(h.len(), 41);
    assert!(h
        .iter()
        .enumerate()
        .all(|(i, r)| r.version as usize == i + 1));
}

#[test]
fn import_layers_evolved_knowledge() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = common::tasks(2);
    let source = common::seeded_store(&dir.path().join("src"), &tasks);
    let id = &tasks[0].task_id;
    let refined = evolkit_core::lint_critique(common::CTRL_A_CRITIQUE)
        .unwrap()
        .refined_plan;
    let v2 = source
        .get_latest(id)
        .unwrap()
        .successor(refined, "o3", None);
    source.put(&v2).unwrap();
    let local = common::seeded_store(&dir.path().join("dst"), &tasks[..1]);
    assert_eq!(local.import_store(&source, Some("o3")).unwrap(), 1);
    assert!(local.history(&tasks[1].task_id).unwrap().is_empty());
    let latest = local.get_latest(id).unwrap();
    assert_eq!((latest.version, latest.parent_version), (2, Some(1)));
    assert_eq!(latest.producer_model, "o3");
    assert_eq!(local.import_store(&source, None).unwrap(), 1);
    assert_eq!(
        local.history(&tasks[1].task_id).unwrap(),
        source.history(&tasks[1].task_id).unwrap()
    );
    assert_eq!(local.import_store(&source, None).unwrap(), 0);
}
