use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store_path::StorePath;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{}:{line}: corrupt record: {reason}", file.display())]
    CorruptRecord { file: PathBuf, line: usize, reason: String },
    #[error("record store i/o on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobRecord {
    pub display_name: String,
    pub drv_path: StorePath,
    pub output_paths: BTreeMap<String, StorePath>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalRecord {
    pub revision_id: String,
    pub jobs: Vec<JobRecord>,
    pub eval_errors: Vec<(String, String)>,
    pub impure_jobs: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Success,
    Failure,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BuildRecordRow {
    pub revision_id: String,
    pub display_name: String,
    pub status: RowStatus,
    pub output_paths: BTreeMap<String, StorePath>,
    pub log_ref: Option<String>,
}

/// One line of the revision index kept next to the per-revision records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RevisionEntry {
    pub revision_id: String,
    pub name: String,
    pub timestamp: i64,
    pub root_file: PathBuf,
    pub promoted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Row {
    Eval(EvalRecord),
    Build(BuildRecordRow),
}

/// Append-only JSON-lines record store under `<state>/records/`.
#[derive(Debug)]
pub struct RecordStore {
    dir: PathBuf,
    writer: Mutex<()>,
}

const INDEX_FILE: &str = "index.jsonl";

fn sorted_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("records serialize");
    let mut line = serde_json::to_string(&v).expect("records serialize");
    line.push('\n');
    line
}

fn read_lines<T: for<'de> Deserialize<'de>>(file: &Path) -> Result<Vec<T>, RecordError> {
    let text = match fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(RecordError::Io {
                path: file.to_path_buf(),
                source,
            })
        }
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RecordError::CorruptRecord {
                file: file.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

impl RecordStore {
    pub fn open(state_dir: &Path) -> Result<RecordStore, RecordError> {
        let dir = state_dir.join("records");
        fs::create_dir_all(&dir).map_err(|source| RecordError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(RecordStore {
            dir,
            writer: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn revision_file(&self, revision_id: &str) -> PathBuf {
        self.dir.join(format!("{revision_id}.jsonl"))
    }

    fn append_line(&self, file: &Path, line: &str) -> Result<(), RecordError> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(file)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|source| RecordError::Io {
                path: file.to_path_buf(),
                source,
            })
    }

    pub fn append_row(&self, row: &Row) -> Result<(), RecordError> {
        let id = match row {
            Row::Eval(e) => &e.revision_id,
            Row::Build(b) => &b.revision_id,
        };
        self.append_line(&self.revision_file(id), &sorted_line(row))
    }

    /// The eval record (the last one, if a revision was evaluated more than
    /// once) and every build row, in append order.
    pub fn load_revision(&self, revision_id: &str) -> Result<(Option<EvalRecord>, Vec<BuildRecordRow>), RecordError> {
        let file = self.revision_file(revision_id);
        if !file.exists() {
            tracing::warn!(revision_id, "no records for revision");
        }
        let mut eval = None;
        let mut rows = Vec::new();
        for row in read_lines::<Row>(&file)? {
            match row {
                Row::Eval(e) => eval = Some(e),
                Row::Build(b) => rows.push(b),
            }
        }
        Ok((eval, rows))
    }

    pub fn append_revision(&self, entry: &RevisionEntry) -> Result<(), RecordError> {
        self.append_line(&self.dir.join(INDEX_FILE), &sorted_line(entry))
    }

    /// Recorded revisions, latest entry per id, in timestamp order.
    pub fn revisions(&self) -> Result<Vec<RevisionEntry>, RecordError> {
        let mut latest: BTreeMap<String, RevisionEntry> = BTreeMap::new();
        for e in read_lines::<RevisionEntry>(&self.dir.join(INDEX_FILE))? {
            latest.insert(e.revision_id.clone(), e);
        }
        let mut all: Vec<_> = latest.into_values().collect();
        all.sort_by(|a, b| (a.timestamp, &a.revision_id).cmp(&(b.timestamp, &b.revision_id)));
        Ok(all)
    }

    /// Resolve a revision by id, id prefix, or snapshot directory name.
    pub fn find_revision(&self, key: &str) -> Result<Option<RevisionEntry>, RecordError> {
        let all = self.revisions()?;
        if let Some(e) = all.iter().find(|e| e.revision_id == key || e.name == key) {
            return Ok(Some(e.clone()));
        }
        let mut prefixed = all.into_iter().filter(|e| e.revision_id.starts_with(key));
        Ok(match (prefixed.next(), prefixed.next()) {
            (Some(e), None) => Some(e),
            _ => None,
        })
    }
}
