//! Record/replay of generation responses keyed by request fingerprint.
//!
//! The store is an append-only JSONL file of (fingerprint, record) pairs. A
//! replay backend serves only what was recorded; a miss is an explicit error,
//! never a silent fallback to a live call.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{request_fingerprint, BackendError, GenerationBackend, GenerationRequest};
use crate::records::GenerationRecord;

#[derive(Debug, Serialize, Deserialize)]
struct StoreLine {
    fingerprint: String,
    record: GenerationRecord,
}

/// Fingerprint-keyed store of generation records.
///
/// Writes are serialized behind one lock; lookups share a read lock. Writing
/// the same (fingerprint, record) pair again is a no-op; writing a different
/// record under an existing fingerprint is an integrity error.
pub struct ReplayStore {
    path: PathBuf,
    records: RwLock<HashMap<String, GenerationRecord>>,
    writer: Mutex<BufWriter<File>>,
}

impl ReplayStore {
    /// Opens (or creates) a store file and loads its contents. Duplicate
    /// lines with identical records are tolerated; conflicting records under
    /// one fingerprint fail loading.
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| {
                    BackendError::Config(format!("cannot create {}: {e}", dir.display()))
                })?;
            }
        }
        let mut records = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| {
                BackendError::Config(format!("cannot read store {}: {e}", path.display()))
            })?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| {
                    BackendError::Config(format!("cannot read store {}: {e}", path.display()))
                })?;
                let entry: StoreLine = serde_json::from_str(&line).map_err(|e| {
                    BackendError::StoreIntegrity(format!(
                        "{} line {}: undecodable entry: {e}",
                        path.display(),
                        idx + 1
                    ))
                })?;
                match records.get(&entry.fingerprint) {
                    Some(existing) if *existing != entry.record => {
                        return Err(BackendError::StoreIntegrity(format!(
                            "{} line {}: fingerprint {} maps to conflicting records",
                            path.display(),
                            idx + 1,
                            entry.fingerprint
                        )));
                    }
                    _ => {
                        records.insert(entry.fingerprint, entry.record);
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| {
                BackendError::Config(format!("cannot open store {}: {e}", path.display()))
            })?;
        Ok(ReplayStore {
            path: path.to_owned(),
            records: RwLock::new(records),
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, fingerprint: &str) -> Option<GenerationRecord> {
        self.records
            .read()
            .expect("store lock")
            .get(fingerprint)
            .cloned()
    }

    /// Appends one record; returns whether the store grew.
    pub fn record(
        &self,
        fingerprint: &str,
        record: &GenerationRecord,
    ) -> Result<bool, BackendError> {
        let mut writer = self.writer.lock().expect("store writer lock");
        if let Some(existing) = self.records.read().expect("store lock").get(fingerprint) {
            if existing == record {
                return Ok(false);
            }
            return Err(BackendError::StoreIntegrity(format!(
                "fingerprint {fingerprint} already stored with a different record"
            )));
        }
        let line = serde_json::to_string(&StoreLine {
            fingerprint: fingerprint.to_owned(),
            record: record.clone(),
        })
        .map_err(|e| BackendError::Protocol(format!("cannot encode store entry: {e}")))?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .and_then(|_| writer.flush())
            .map_err(|e| {
                BackendError::Config(format!("cannot append to {}: {e}", self.path.display()))
            })?;
        self.records
            .write()
            .expect("store lock")
            .insert(fingerprint.to_owned(), record.clone());
        Ok(true)
    }
}

/// Serves recorded responses only.
pub struct ReplayBackend {
    id: String,
    store: Arc<ReplayStore>,
}

impl ReplayBackend {
    pub fn new(id: impl Into<String>, store: Arc<ReplayStore>) -> Self {
        ReplayBackend {
            id: id.into(),
            store,
        }
    }
}

impl GenerationBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, BackendError> {
        let fingerprint = request_fingerprint(request);
        self.store
            .lookup(&fingerprint)
            .ok_or(BackendError::NotRecorded { fingerprint })
    }
}

/// Wraps any backend and records every response it produces, so a later run
/// can replay the session exactly.
pub struct RecordingBackend {
    inner: Arc<dyn GenerationBackend>,
    store: Arc<ReplayStore>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn GenerationBackend>, store: Arc<ReplayStore>) -> Self {
        RecordingBackend { inner, store }
    }
}

impl GenerationBackend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, BackendError> {
        let record = self.inner.generate(request)?;
        self.store.record(&request_fingerprint(request), &record)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{SyntheticBackend, SyntheticModel, SyntheticModelSpec};
    use crate::records::DecodingPolicy;
    use chrono::Utc;

    fn request(seed: i64) -> GenerationRequest {
        GenerationRequest {
            prompt_text: "Q1".into(),
            system_text: None,
            policy: DecodingPolicy::temperature(0.7).with_seed(seed),
            max_tokens: 32,
            want_logprobs: false,
            backend_id: "replayed".into(),
        }
    }

    fn record(text: &str) -> GenerationRecord {
        GenerationRecord {
            prompt_id: String::new(),
            variant_key: String::new(),
            text: text.into(),
            token_logprobs: None,
            backend_id: "replayed".into(),
            policy: DecodingPolicy::temperature(0.7).with_seed(1),
            timestamp: Utc::now(),
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(&dir.path().join("store.jsonl")).unwrap();
        let req = request(1);
        let rec = record("answer");
        let fp = request_fingerprint(&req);
        assert!(store.record(&fp, &rec).unwrap());
        let backend = ReplayBackend::new("replayed", Arc::new(store));
        let replayed = backend.generate(&req).unwrap();
        assert_eq!(replayed, rec);
    }

    #[test]
    fn unknown_fingerprint_is_not_recorded_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ReplayStore::open(&dir.path().join("store.jsonl")).unwrap());
        let backend = ReplayBackend::new("replayed", store);
        let err = backend.generate(&request(99)).unwrap_err();
        assert!(matches!(err, BackendError::NotRecorded { .. }));
    }

    #[test]
    fn duplicate_writes_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(&dir.path().join("store.jsonl")).unwrap();
        let fp = request_fingerprint(&request(1));
        let rec = record("answer");
        assert!(store.record(&fp, &rec).unwrap());
        assert!(!store.record(&fp, &rec).unwrap());
        assert_eq!(store.len(), 1);

        let mut shifted = rec.clone();
        shifted.timestamp = shifted.timestamp + chrono::Duration::seconds(5);
        assert!(
            !store.record(&fp, &shifted).unwrap(),
            "timestamp differences do not violate integrity"
        );
    }

    #[test]
    fn conflicting_record_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(&dir.path().join("store.jsonl")).unwrap();
        let fp = request_fingerprint(&request(1));
        store.record(&fp, &record("first")).unwrap();
        let err = store.record(&fp, &record("second")).unwrap_err();
        assert!(matches!(err, BackendError::StoreIntegrity(_)));
    }

    #[test]
    fn store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let fp = request_fingerprint(&request(1));
        {
            let store = ReplayStore::open(&path).unwrap();
            store.record(&fp, &record("persisted")).unwrap();
        }
        let store = ReplayStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.lookup(&fp).unwrap().text, "persisted");
    }

    #[test]
    fn recording_backend_enables_exact_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let model = Arc::new(
            SyntheticModel::new(
                [(
                    "Q1".to_owned(),
                    SyntheticModelSpec::uniform(&["A", "B", "C"]),
                )]
                .into_iter()
                .collect(),
            )
            .unwrap(),
        );
        let live_answers: Vec<String> = {
            let store = Arc::new(ReplayStore::open(&path).unwrap());
            let recorder = RecordingBackend::new(
                Arc::new(SyntheticBackend::new("replayed", model)),
                Arc::clone(&store),
            );
            (0..5)
                .map(|s| recorder.generate(&request(s)).unwrap().text)
                .collect()
        };
        let store = Arc::new(ReplayStore::open(&path).unwrap());
        let replay = ReplayBackend::new("replayed", store);
        let replayed: Vec<String> = (0..5)
            .map(|s| replay.generate(&request(s)).unwrap().text)
            .collect();
        assert_eq!(live_answers, replayed);
    }
}
