//! Append-only preference store backed by a JSONL file.
//!
//! Appends go through a single writer and are synced before they are
//! acknowledged. Readers take an immutable snapshot and never block the writer
//! for longer than a pointer swap.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use musicrl_core::preferences::PreferenceRecord;

use crate::ServiceError;

#[derive(Debug)]
pub struct PreferenceStore {
    path: PathBuf,
    writer: Mutex<File>,
    snapshot: RwLock<Arc<Vec<PreferenceRecord>>>,
}

impl PreferenceStore {
    /// Open or create the store at `path`, loading every existing record.
    /// A torn final line (no trailing newline, unparseable) from an
    /// interrupted append is dropped and truncated away.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let io = |e| ServiceError::Io(path.to_path_buf(), e);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let mut records = Vec::new();
        let mut valid_len = 0;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            offset += line.len();
            let body = line.trim();
            if body.is_empty() {
                valid_len = offset;
                continue;
            }
            match serde_json::from_str::<PreferenceRecord>(body) {
                Ok(r) => {
                    records.push(r);
                    valid_len = offset;
                }
                Err(_) if !line.ends_with('\n') => break,
                Err(e) => {
                    return Err(ServiceError::Corrupt(format!(
                        "{}: record {}: {e}",
                        path.display(),
                        records.len() + 1
                    )));
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if valid_len < text.len() {
            file.set_len(valid_len as u64).map_err(io)?;
        }
        Ok(PreferenceStore {
            path: path.to_path_buf(),
            writer: Mutex::new(file),
            snapshot: RwLock::new(Arc::new(records)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably append one record.
    pub fn append(&self, record: PreferenceRecord) -> Result<(), ServiceError> {
        let mut line =
            serde_json::to_vec(&record).map_err(|e| ServiceError::Corrupt(e.to_string()))?;
        line.push(b'\n');
        let mut file = self.writer.lock().expect("store writer poisoned");
        let io = |e| ServiceError::Io(self.path.clone(), e);
        file.write_all(&line).map_err(io)?;
        file.sync_data().map_err(io)?;
        let mut snap = self.snapshot.write().expect("store snapshot poisoned");
        Arc::make_mut(&mut snap).push(record);
        Ok(())
    }

    pub fn snapshot(&self) -> Arc<Vec<PreferenceRecord>> {
        Arc::clone(&self.snapshot.read().expect("store snapshot poisoned"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use musicrl_core::preferences::{Choice, Source};
    use musicrl_core::symbolic::{CLIP_LEN, Prompt, REST_ID};

    fn record(id: &str) -> PreferenceRecord {
        PreferenceRecord {
            pair_id: id.into(),
            prompt: Prompt::from_index(0),
            clip_a: vec![REST_ID; CLIP_LEN],
            clip_b: vec![REST_ID; CLIP_LEN],
            choice: Choice::A,
            listened_a: true,
            listened_b: true,
            source: Source::Ui,
            timestamp: 1,
        }
    }

    #[test]
    fn reopen_sees_appended_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        let store = PreferenceStore::open(&path).unwrap();
        store.append(record("x")).unwrap();
        let before = store.snapshot();
        store.append(record("y")).unwrap();
        assert_eq!(before.len(), 1);
        drop(store);
        let reopened = PreferenceStore::open(&path).unwrap();
        let ids: Vec<String> = reopened
            .snapshot()
            .iter()
            .map(|r| r.pair_id.clone())
            .collect();
        assert_eq!(ids, ["x", "y"]);
    }

    #[test]
    fn torn_tail_is_dropped_but_interior_corruption_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        let good = serde_json::to_string(&record("x")).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"pair_id\":")).unwrap();
        let store = PreferenceStore::open(&path).unwrap();
        assert_eq!(store.snapshot().len(), 1);
        store.append(record("y")).unwrap();
        drop(store);
        assert_eq!(PreferenceStore::open(&path).unwrap().snapshot().len(), 2);

        std::fs::write(&path, format!("garbage\n{good}\n")).unwrap();
        assert!(matches!(
            PreferenceStore::open(&path),
            Err(ServiceError::Corrupt(_))
        ));
    }
}
