//! Content-addressed artifact layout, checkpointed session persistence and
//! reproducibility manifests.
//!
//! Layout under the store root:
//!
//! ```text
//! data/<kind>/<slug>_iter<i>_<hash4>.<ext>
//! sessions/<session_id>/state_<n>.json
//! sessions/<session_id>/nodes/<node>.json
//! sessions/<session_id>/manifest.json
//! logs/payloads.log
//! ```

use crate::clock::Clock;
use crate::config::Config;
use crate::model::{content_hash, HexDigest, NodeRecord, SessionState, SCHEMA_VERSION};
use crate::prompts;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("artifact {path} already exists with different content")]
    ContentConflict { path: PathBuf },
    #[error("checkpoint schema version {found} unsupported (expected {expected})")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("no readable checkpoint for session {0:?}")]
    NoCheckpoint(String),
    #[error("session state invalid: {0}")]
    InvalidState(String),
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Curricula,
    TrainingData,
    Evaluations,
    Sessions,
}

impl ArtifactKind {
    pub fn dir_name(&self) -> &'static str {
        match self {
            ArtifactKind::Curricula => "curricula",
            ArtifactKind::TrainingData => "training_data",
            ArtifactKind::Evaluations => "evaluations",
            ArtifactKind::Sessions => "sessions",
        }
    }
}

/// Kinds whose files are hashed into the manifest. Session checkpoints and
/// logs are runtime state, not reproducible artifacts.
const MANIFEST_KINDS: [ArtifactKind; 3] =
    [ArtifactKind::Curricula, ArtifactKind::TrainingData, ArtifactKind::Evaluations];

const CHECKPOINT_RETENTION: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub session_id: String,
    pub written_at: String,
    pub model_ids: Vec<String>,
    pub prompt_templates: BTreeMap<String, String>,
    pub settings: Config,
    /// Store-relative path → SHA-256, sorted by path.
    pub artifact_hashes: BTreeMap<String, HexDigest>,
}

pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StorageError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `data/<kind>/<slug>_iter<iteration>_<hash4>.<ext>` under the root.
    pub fn artifact_path(
        &self,
        kind: ArtifactKind,
        slug: &str,
        iteration: u32,
        hash4: &str,
        ext: &str,
    ) -> PathBuf {
        self.root
            .join("data")
            .join(kind.dir_name())
            .join(format!("{slug}_iter{iteration}_{hash4}.{ext}"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
        let parent = path.parent().unwrap_or(&self.root);
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(&format!(".tmp.{}", std::process::id()));
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))?;
        Ok(())
    }

    /// Atomic write returning the content hash. Re-writing identical bytes
    /// is a no-op; differing bytes at the same path are refused.
    pub fn write_artifact(&self, path: &Path, bytes: &[u8]) -> Result<HexDigest, StorageError> {
        let digest = content_hash(bytes);
        if path.exists() {
            let existing = fs::read(path).map_err(io_err(path))?;
            if existing == bytes {
                return Ok(digest);
            }
            return Err(StorageError::ContentConflict { path: path.to_path_buf() });
        }
        self.write_atomic(path, bytes)?;
        Ok(digest)
    }

    /// Hashes the content, derives the canonical path for it and writes it.
    pub fn put(
        &self,
        kind: ArtifactKind,
        slug: &str,
        iteration: u32,
        ext: &str,
        bytes: &[u8],
    ) -> Result<(PathBuf, HexDigest), StorageError> {
        let digest = content_hash(bytes);
        let path = self.artifact_path(kind, slug, iteration, &crate::model::short_hash(&digest), ext);
        let written = self.write_artifact(&path, bytes)?;
        Ok((path, written))
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.root.join("sessions").join(session_id)
    }

    fn checkpoint_files(&self, session_id: &str) -> Result<Vec<(u64, PathBuf)>, StorageError> {
        let dir = self.session_dir(session_id);
        let mut found = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(found),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(counter) = name
                .strip_prefix("state_")
                .and_then(|rest| rest.strip_suffix(".json"))
                .and_then(|num| num.parse::<u64>().ok())
            {
                found.push((counter, entry.path()));
            }
        }
        found.sort();
        Ok(found)
    }

    /// Writes a new checkpoint and prunes old ones beyond the retention
    /// window.
    pub fn save_session(&self, state: &SessionState) -> Result<PathBuf, StorageError> {
        state.validate().map_err(|e| StorageError::InvalidState(e.to_string()))?;
        let existing = self.checkpoint_files(&state.session_id)?;
        let next = existing.last().map(|(n, _)| n + 1).unwrap_or(0);
        let path = self.session_dir(&state.session_id).join(format!("state_{next:06}.json"));
        let bytes = serde_json::to_vec_pretty(state)?;
        self.write_atomic(&path, &bytes)?;
        if existing.len() + 1 > CHECKPOINT_RETENTION {
            for (_, old) in &existing[..existing.len() + 1 - CHECKPOINT_RETENTION] {
                fs::remove_file(old).map_err(io_err(old))?;
            }
        }
        Ok(path)
    }

    /// Loads the newest checkpoint that parses and validates, falling back
    /// through older ones on corruption. A checkpoint with a wrong schema
    /// version stops the search immediately.
    pub fn load_session(&self, session_id: &str) -> Result<SessionState, StorageError> {
        #[derive(Deserialize)]
        struct VersionProbe {
            schema_version: u32,
        }
        let checkpoints = self.checkpoint_files(session_id)?;
        for (_, path) in checkpoints.iter().rev() {
            let Ok(bytes) = fs::read(path) else { continue };
            if let Ok(probe) = serde_json::from_slice::<VersionProbe>(&bytes) {
                if probe.schema_version != SCHEMA_VERSION {
                    return Err(StorageError::SchemaMismatch {
                        found: probe.schema_version,
                        expected: SCHEMA_VERSION,
                    });
                }
            }
            let Ok(state) = serde_json::from_slice::<SessionState>(&bytes) else { continue };
            if state.validate().is_ok() {
                return Ok(state);
            }
        }
        Err(StorageError::NoCheckpoint(session_id.to_string()))
    }

    pub fn list_sessions(&self) -> Result<Vec<String>, StorageError> {
        let dir = self.root.join("sessions");
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn node_record_path(&self, session_id: &str, node_name: &str) -> PathBuf {
        self.session_dir(session_id).join("nodes").join(format!("{node_name}.json"))
    }

    pub fn save_node_record(
        &self,
        session_id: &str,
        record: &NodeRecord,
    ) -> Result<(), StorageError> {
        let path = self.node_record_path(session_id, &record.node_name);
        let bytes = serde_json::to_vec_pretty(record)?;
        self.write_atomic(&path, &bytes)
    }

    pub fn load_node_record(
        &self,
        session_id: &str,
        node_name: &str,
    ) -> Result<Option<NodeRecord>, StorageError> {
        let path = self.node_record_path(session_id, node_name);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        match serde_json::from_slice(&bytes) {
            Ok(record) => Ok(Some(record)),
            Err(_) => Ok(None),
        }
    }

    pub fn clear_node_records(&self, session_id: &str) -> Result<(), StorageError> {
        let dir = self.session_dir(session_id).join("nodes");
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&dir)(e)),
        }
    }

    fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), StorageError> {
        let entries = match fs::read_dir(dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(dir)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_err(dir))?;
            let path = entry.path();
            if path.is_dir() {
                Store::collect_files(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }

    /// Hashes every reproducible artifact under `data/`, keyed by
    /// store-relative path.
    pub fn artifact_hashes(&self) -> Result<BTreeMap<String, HexDigest>, StorageError> {
        let mut files = Vec::new();
        for kind in MANIFEST_KINDS {
            Store::collect_files(&self.root.join("data").join(kind.dir_name()), &mut files)?;
        }
        files.sort();
        let mut hashes = BTreeMap::new();
        for path in files {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let relative = path
                .strip_prefix(&self.root)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            hashes.insert(relative, content_hash(&bytes));
        }
        Ok(hashes)
    }

    pub fn manifest_path(&self, session_id: &str) -> PathBuf {
        self.session_dir(session_id).join("manifest.json")
    }

    /// Collates model ids, prompt templates, the settings snapshot and all
    /// artifact hashes. Identical inputs produce identical bytes except the
    /// `written_at` stamp.
    pub fn write_manifest(
        &self,
        state: &SessionState,
        settings: &Config,
        clock: &dyn Clock,
    ) -> Result<PathBuf, StorageError> {
        let mut model_ids: BTreeSet<String> = state
            .iterations
            .iter()
            .flat_map(|it| [it.sft_model.as_ref(), it.dpo_model.as_ref()])
            .flatten()
            .map(|model| model.id.clone())
            .collect();
        if state.current_model.kind != crate::model::ModelKind::Base {
            model_ids.insert(state.current_model.id.clone());
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            session_id: state.session_id.clone(),
            written_at: clock.now_iso(),
            model_ids: model_ids.into_iter().collect(),
            prompt_templates: prompts::all_templates()
                .into_iter()
                .map(|(name, text)| (name.to_string(), text.to_string()))
                .collect(),
            settings: settings.clone(),
            artifact_hashes: self.artifact_hashes()?,
        };
        let path = self.manifest_path(&state.session_id);
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        self.write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn load_manifest(&self, session_id: &str) -> Result<Manifest, StorageError> {
        let path = self.manifest_path(session_id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Appends one line to the payload audit log. Callers redact secrets
    /// before handing the line over.
    pub fn append_payload_log(&self, line: &str) -> Result<(), StorageError> {
        use std::io::Write;
        let dir = self.root.join("logs");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("payloads.log");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(file, "{line}").map_err(io_err(&path))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::model::{ModelRef, SessionStatus, Spend};

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("root")).unwrap();
        (dir, store)
    }

    fn state(session_id: &str) -> SessionState {
        SessionState {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.into(),
            domain: "Python Releases".into(),
            domain_slug: "python_releases".into(),
            status: SessionStatus::Running,
            iteration_index: 0,
            current_curriculum_file: None,
            current_training_data_file: None,
            current_sft_model_id: None,
            current_dpo_model_id: None,
            current_model: ModelRef::base("sim:base"),
            iterations: vec![],
            learned_topics: vec![],
            accuracy_history: vec![],
            remediation_queue: vec![],
            topic_quotas: Default::default(),
            spend: Spend::default(),
            seed: 7,
            created_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn artifact_path_matches_published_example() {
        let (_dir, store) = store();
        let path =
            store.artifact_path(ArtifactKind::TrainingData, "python_releases", 1, "5f2a", "jsonl");
        assert!(path.ends_with("data/training_data/python_releases_iter1_5f2a.jsonl"));
        let zero = store.artifact_path(ArtifactKind::Curricula, "d", 0, "abcd", "xml");
        assert!(zero.to_string_lossy().contains("_iter0_"));
    }

    #[test]
    fn put_derives_distinct_paths_for_distinct_content() {
        let (_dir, store) = store();
        let (p1, h1) = store.put(ArtifactKind::TrainingData, "s", 1, "jsonl", b"alpha").unwrap();
        let (p2, h2) = store.put(ArtifactKind::TrainingData, "s", 1, "jsonl", b"beta").unwrap();
        assert_ne!(p1, p2);
        assert_ne!(h1, h2);
        assert_eq!(std::fs::read(&p1).unwrap(), b"alpha");
    }

    #[test]
    fn write_artifact_is_idempotent_for_identical_bytes() {
        let (_dir, store) = store();
        let path = store.artifact_path(ArtifactKind::Evaluations, "s", 1, "aaaa", "json");
        let first = store.write_artifact(&path, b"{}").unwrap();
        let second = store.write_artifact(&path, b"{}").unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn write_artifact_refuses_divergent_overwrite() {
        let (_dir, store) = store();
        let path = store.artifact_path(ArtifactKind::Evaluations, "s", 1, "aaaa", "json");
        store.write_artifact(&path, b"{}").unwrap();
        assert!(matches!(
            store.write_artifact(&path, b"[]"),
            Err(StorageError::ContentConflict { .. })
        ));
        assert_eq!(std::fs::read(&path).unwrap(), b"{}");
    }

    #[test]
    fn session_round_trips() {
        let (_dir, store) = store();
        let s = state("s1");
        store.save_session(&s).unwrap();
        assert_eq!(store.load_session("s1").unwrap(), s);
    }

    #[test]
    fn checkpoints_rotate_keeping_three() {
        let (_dir, store) = store();
        let mut s = state("s1");
        for i in 0..5 {
            s.seed = i;
            store.save_session(&s).unwrap();
        }
        let files = store.checkpoint_files("s1").unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(files.last().unwrap().0, 4);
        assert_eq!(store.load_session("s1").unwrap().seed, 4);
    }

    #[test]
    fn truncated_checkpoint_falls_back_to_previous() {
        let (_dir, store) = store();
        let mut s = state("s1");
        s.seed = 1;
        store.save_session(&s).unwrap();
        s.seed = 2;
        let latest = store.save_session(&s).unwrap();
        let full = std::fs::read(&latest).unwrap();
        std::fs::write(&latest, &full[..full.len() / 3]).unwrap();
        assert_eq!(store.load_session("s1").unwrap().seed, 1);
    }

    #[test]
    fn unknown_schema_version_is_fatal() {
        let (_dir, store) = store();
        let s = state("s1");
        let path = store.save_session(&s).unwrap();
        let mut value: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        value["schema_version"] = serde_json::json!(999);
        std::fs::write(&path, serde_json::to_vec(&value).unwrap()).unwrap();
        assert!(matches!(
            store.load_session("s1"),
            Err(StorageError::SchemaMismatch { found: 999, .. })
        ));
    }

    #[test]
    fn missing_session_reports_no_checkpoint() {
        let (_dir, store) = store();
        assert!(matches!(store.load_session("ghost"), Err(StorageError::NoCheckpoint(_))));
    }

    #[test]
    fn node_records_round_trip_and_tolerate_absence() {
        let (_dir, store) = store();
        use crate::model::{NodeStatus, NodeRecord};
        let record = NodeRecord {
            node_name: "plan".into(),
            input_hash: "ab".repeat(32),
            output_paths: [("curriculum".to_string(), "cd".repeat(32))].into_iter().collect(),
            started_at: "2026-01-01T00:00:00Z".into(),
            finished_at: "2026-01-01T00:00:01Z".into(),
            attempts: 1,
            status: NodeStatus::Done,
        };
        store.save_node_record("s1", &record).unwrap();
        assert_eq!(store.load_node_record("s1", "plan").unwrap(), Some(record));
        assert_eq!(store.load_node_record("s1", "absent").unwrap(), None);
    }

    #[test]
    fn manifest_collects_hashes_settings_and_models() {
        let (_dir, store) = store();
        store.put(ArtifactKind::TrainingData, "s", 1, "jsonl", b"{\"x\":1}\n").unwrap();
        store.put(ArtifactKind::Curricula, "s", 1, "xml", b"<curriculum/>").unwrap();
        store.append_payload_log("{\"should_not\":\"appear\"}").unwrap();
        let s = state("s1");
        store.save_session(&s).unwrap();
        let path = store.write_manifest(&s, &Config::default(), &FixedClock::default()).unwrap();
        let manifest = store.load_manifest("s1").unwrap();
        assert!(path.ends_with("sessions/s1/manifest.json"));
        assert_eq!(manifest.artifact_hashes.len(), 2);
        assert!(manifest.artifact_hashes.keys().all(|k| k.starts_with("data/")));
        assert!(manifest.model_ids.is_empty(), "fresh session trained no models");
        assert_eq!(manifest.settings, Config::default());
        assert!(manifest.prompt_templates.contains_key("judge"));
        for (relative, digest) in &manifest.artifact_hashes {
            let bytes = std::fs::read(store.root().join(relative)).unwrap();
            assert_eq!(&content_hash(&bytes), digest);
        }
    }

    #[test]
    fn manifest_is_stable_modulo_timestamp() {
        let (_dir, store) = store();
        store.put(ArtifactKind::TrainingData, "s", 1, "jsonl", b"data\n").unwrap();
        let s = state("s1");
        store.save_session(&s).unwrap();
        store.write_manifest(&s, &Config::default(), &FixedClock("2026-01-01T00:00:00Z".into())).unwrap();
        let first = std::fs::read_to_string(store.manifest_path("s1")).unwrap();
        store.write_manifest(&s, &Config::default(), &FixedClock("2026-02-02T00:00:00Z".into())).unwrap();
        let second = std::fs::read_to_string(store.manifest_path("s1")).unwrap();
        let strip = |text: &str| {
            text.lines()
                .filter(|l| !l.contains("written_at"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_ne!(first, second);
        assert_eq!(strip(&first), strip(&second));
    }
}
