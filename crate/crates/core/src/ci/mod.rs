//! A small Hydra: evaluate revisions in order, build what the cache lacks,
//! push results, promote the channel, keep the history.

mod records;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::archive::Tree;
use crate::builder::{realize, BuildStatus, RealizeOptions};
use crate::cache::{Cache, CacheError};
use crate::lang::{eval_job_set, parse_job_name, EvalConfig, Evaluator, Job};
use crate::store::Store;
use crate::store_path::{sha256, truncated_digest32};

pub use records::{BuildRecordRow, EvalRecord, JobRecord, RecordError, RecordStore, RevisionEntry, Row, RowStatus};

pub const ROOT_FILE: &str = "default.rcp";

#[derive(Debug, Error)]
pub enum CiError {
    #[error("manifest {}:{line}: {reason}", path.display())]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("revision {name} unreadable: {reason}")]
    RevisionUnreadable { name: String, reason: String },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("pushing to cache: {0}")]
    Cache(#[from] CacheError),
    #[error("i/o on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub timestamp: i64,
    pub name: String,
}

/// Parse `<timestamp>\t<dirname>` lines; blank lines and `#` comments are
/// skipped. The result is in timestamp order.
pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>, CiError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| CiError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.into(),
        };
        let (ts, name) = line
            .split_once('\t')
            .ok_or_else(|| err("expected <timestamp>\\t<dirname>"))?;
        let timestamp = ts.trim().parse().map_err(|_| err("timestamp is not an integer"))?;
        let name = name.trim();
        if name.is_empty() || name.contains('/') {
            return Err(err("bad directory name"));
        }
        entries.push(ManifestEntry {
            timestamp,
            name: name.to_string(),
        });
    }
    entries.sort_by(|a, b| (a.timestamp, &a.name).cmp(&(b.timestamp, &b.name)));
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CiError> {
    let text = fs::read_to_string(path).map_err(|source| CiError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(path, &text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Revision {
    pub id: String,
    pub name: String,
    pub timestamp: i64,
    pub root_file: PathBuf,
}

/// Truncated base32 SHA-256 of the canonical archive of `dir`.
pub fn revision_id(dir: &Path) -> io::Result<String> {
    Ok(truncated_digest32(&sha256(Tree::read_from(dir)?.encode())))
}

impl Revision {
    pub fn load(revisions_dir: &Path, entry: &ManifestEntry) -> Result<Revision, CiError> {
        let dir = revisions_dir.join(&entry.name);
        let unreadable = |reason: String| CiError::RevisionUnreadable {
            name: entry.name.clone(),
            reason,
        };
        let dir = dir
            .canonicalize()
            .map_err(|e| unreadable(format!("{}: {e}", dir.display())))?;
        let id = revision_id(&dir).map_err(|e| unreadable(e.to_string()))?;
        let root_file = dir.join(ROOT_FILE);
        if !root_file.is_file() {
            return Err(unreadable(format!("missing {ROOT_FILE}")));
        }
        Ok(Revision {
            id,
            name: entry.name.clone(),
            timestamp: entry.timestamp,
            root_file,
        })
    }
}

/// Whether some attribute-path segment of the job contains a dot; such jobs
/// were silently dropped by a historical Hydra bug.
pub fn is_dotted(display_name: &str) -> bool {
    parse_job_name(display_name)
        .map(|segs| segs.iter().any(|s| s.contains('.')))
        .unwrap_or(false)
}

#[derive(Debug, Clone, Default)]
pub struct CiOptions {
    pub important_jobs: Vec<String>,
    pub eval: EvalConfig,
    /// Base options for building; the CI cache is added as a substituter and
    /// logs go to `<state>/logs`.
    pub realize: RealizeOptions,
    /// Reproduce the historical bug that dropped dotted job names.
    pub drop_dotted_jobs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RevisionSummary {
    pub revision_id: String,
    pub name: String,
    pub jobs: usize,
    pub eval_errors: usize,
    pub built: usize,
    pub cached: usize,
    pub failed: usize,
    pub promoted: bool,
}

fn job_record(j: &Job) -> JobRecord {
    JobRecord {
        display_name: j.display_name.clone(),
        drv_path: j.drv_path.clone(),
        output_paths: j.output_paths.clone(),
    }
}

fn relative_ref(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

/// Process every revision in manifest order. An unreadable revision yields
/// an error entry and the run moves on.
pub fn ci_run(
    revisions_dir: &Path,
    manifest: &[ManifestEntry],
    opts: &CiOptions,
    store: &Arc<Store>,
    cache: &Cache,
    records: &RecordStore,
    state_dir: &Path,
) -> Vec<Result<RevisionSummary, CiError>> {
    let mut ordered = manifest.to_vec();
    ordered.sort_by(|a, b| (a.timestamp, &a.name).cmp(&(b.timestamp, &b.name)));
    ordered
        .iter()
        .map(|entry| {
            let summary = Revision::load(revisions_dir, entry)
                .and_then(|rev| run_revision(&rev, opts, store, cache, records, state_dir));
            if let Err(e) = &summary {
                tracing::error!(revision = %entry.name, error = %e, "revision aborted");
            }
            summary
        })
        .collect()
}

pub fn run_revision(
    rev: &Revision,
    opts: &CiOptions,
    store: &Arc<Store>,
    cache: &Cache,
    records: &RecordStore,
    state_dir: &Path,
) -> Result<RevisionSummary, CiError> {
    tracing::info!(revision = %rev.name, id = %rev.id, "evaluating");
    let unreadable = |reason: String| CiError::RevisionUnreadable {
        name: rev.name.clone(),
        reason,
    };
    let ev = Evaluator::new(store.clone(), opts.eval.clone()).map_err(|e| unreadable(e.to_string()))?;
    let (mut jobs, trace) = eval_job_set(&rev.root_file, &ev).map_err(|e| unreadable(e.to_string()))?;
    if opts.drop_dotted_jobs {
        jobs.retain(|j| !is_dotted(&j.display_name));
    }
    records.append_row(&Row::Eval(EvalRecord {
        revision_id: rev.id.clone(),
        jobs: jobs.iter().map(job_record).collect(),
        eval_errors: trace.errors.clone(),
        impure_jobs: jobs
            .iter()
            .filter(|j| j.impure)
            .map(|j| j.display_name.clone())
            .collect(),
    }))?;

    let in_cache = |j: &Job| {
        j.output_paths.values().all(|p| match cache.query(p) {
            Ok(hit) => hit.is_some(),
            Err(e) => {
                tracing::warn!(path = %p, error = %e, "cache query failed");
                false
            }
        })
    };
    let cached: Vec<bool> = jobs.iter().map(in_cache).collect();
    let mut targets: Vec<_> = jobs
        .iter()
        .zip(&cached)
        .filter(|(_, c)| !**c)
        .map(|(j, _)| j.drv_path.clone())
        .collect();
    targets.sort();
    targets.dedup();

    let mut realize_opts = opts.realize.clone();
    realize_opts.substituters.insert(0, cache.clone());
    realize_opts.log_dir = Some(state_dir.join("logs"));
    let results = match realize(&targets, &realize_opts, store, store.as_ref()) {
        Ok(r) => r,
        Err(e) => {
            tracing::error!(revision = %rev.name, error = %e, "cannot schedule builds");
            BTreeMap::new()
        }
    };

    let mut rows = Vec::with_capacity(jobs.len());
    let mut summary = RevisionSummary {
        revision_id: rev.id.clone(),
        name: rev.name.clone(),
        jobs: jobs.len(),
        eval_errors: trace.errors.len(),
        built: 0,
        cached: 0,
        failed: 0,
        promoted: false,
    };
    for (job, was_cached) in jobs.iter().zip(&cached) {
        let result = results.get(&job.drv_path);
        let status = match (was_cached, result) {
            (true, _) => RowStatus::Cached,
            (false, Some(r)) if r.status.is_ok() => RowStatus::Success,
            _ => RowStatus::Failure,
        };
        if status == RowStatus::Success {
            for out in job.output_paths.values() {
                for p in store.list_closure(out).map_err(|e| CiError::Cache(e.into()))? {
                    cache.push(store, &p)?;
                }
            }
        }
        match status {
            RowStatus::Cached => summary.cached += 1,
            RowStatus::Success => summary.built += 1,
            RowStatus::Failure => summary.failed += 1,
        }
        rows.push(BuildRecordRow {
            revision_id: rev.id.clone(),
            display_name: job.display_name.clone(),
            status,
            output_paths: job.output_paths.clone(),
            log_ref: result
                .filter(|r| r.status == BuildStatus::Success || r.status == BuildStatus::Failure)
                .and_then(|r| r.log_path.as_deref())
                .map(|p| relative_ref(p, state_dir)),
        });
    }
    for row in &rows {
        records.append_row(&Row::Build(row.clone()))?;
    }

    summary.promoted = opts.important_jobs.iter().all(|name| {
        rows.iter()
            .any(|r| &r.display_name == name && r.status != RowStatus::Failure)
    });
    records.append_revision(&RevisionEntry {
        revision_id: rev.id.clone(),
        name: rev.name.clone(),
        timestamp: rev.timestamp,
        root_file: rev.root_file.clone(),
        promoted: summary.promoted,
    })?;
    tracing::info!(
        revision = %rev.name,
        built = summary.built,
        cached = summary.cached,
        failed = summary.failed,
        promoted = summary.promoted,
        "revision done"
    );
    Ok(summary)
}
