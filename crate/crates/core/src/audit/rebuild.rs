use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use super::{rate_str, AuditError};
use crate::builder::{realize, BuildResult, BuildStatus, RealizeOptions, SandboxPolicy};
use crate::cache::Cache;
use crate::ci::{RecordStore, RevisionEntry, RowStatus};
use crate::derivation::DrvLookup;
use crate::lang::{eval_job_set, EvalConfig, Evaluator};
use crate::store::Store;
use crate::store_path::StorePath;

pub const CURRENT_LEAK_MARKER: &str = "REJECT-HOST-INFO:";
pub const MISSING_ENV_MARKER: &str = "MISSING-ENV:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureClass {
    CurrentSandboxLeakage,
    FlakyTest,
    PastSandboxLeakage,
    Unknown,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [
        FailureClass::CurrentSandboxLeakage,
        FailureClass::FlakyTest,
        FailureClass::PastSandboxLeakage,
        FailureClass::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::CurrentSandboxLeakage => "current-sandbox-leakage",
            FailureClass::FlakyTest => "flaky-test",
            FailureClass::PastSandboxLeakage => "past-sandbox-leakage",
            FailureClass::Unknown => "unknown",
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn reads_missing_v1_var(log: &str) -> bool {
    let v1_only = SandboxPolicy::v1_only_vars();
    log.lines().any(|line| {
        line.split_once(MISSING_ENV_MARKER)
            .map(|(_, rest)| rest.split_whitespace().next().unwrap_or(""))
            .is_some_and(|var| v1_only.contains(var))
    })
}

/// Classify a failed build from its log and the outcomes of retry probes.
///
/// Probes are pulled lazily and only when no current-leakage marker is
/// present; the caller bounds the iterator by the retry budget.
pub fn classify_failure(log: &str, probes: impl IntoIterator<Item = bool>) -> FailureClass {
    if log.lines().any(|l| l.contains(CURRENT_LEAK_MARKER)) {
        return FailureClass::CurrentSandboxLeakage;
    }
    if probes.into_iter().any(|ok| ok) {
        return FailureClass::FlakyTest;
    }
    if reads_missing_v1_var(log) {
        return FailureClass::PastSandboxLeakage;
    }
    FailureClass::Unknown
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FailedRebuild {
    pub display_name: String,
    pub class: FailureClass,
    pub log_ref: Option<String>,
    pub probe_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RebuildReport {
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: Vec<FailedRebuild>,
    #[serde(with = "rate_str")]
    pub success_rate: f64,
    pub class_counts: BTreeMap<FailureClass, usize>,
    /// Builder processes started for first attempts.
    pub builder_invocations: usize,
    pub probe_invocations: usize,
    /// Rebuilt jobs whose output archive digests equal the cached ones.
    pub digest_matches: usize,
    pub digest_mismatches: Vec<String>,
    pub sandbox_version: u8,
}

#[derive(Debug, Clone)]
pub struct RebuildOptions {
    pub cache: Cache,
    pub sandbox: SandboxPolicy,
    pub retries: u32,
    pub max_parallel: usize,
    pub seed: u64,
    pub source_mirror: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
    pub eval: EvalConfig,
}

struct Attempt {
    display_name: String,
    first: BuildResult,
    class: Option<FailureClass>,
    probes: u32,
    digests_match: bool,
}

fn forced(drv: &StorePath, opts: &RebuildOptions, attempt: u32) -> RealizeOptions {
    RealizeOptions {
        substituters: vec![opts.cache.clone()],
        force_rebuild: BTreeSet::from([drv.clone()]),
        sandbox: opts.sandbox.clone(),
        max_parallel: 1,
        retries: opts.retries,
        attempt,
        seed: opts.seed,
        source_mirror: opts.source_mirror.clone(),
        log_dir: opts.log_dir.clone(),
    }
}

fn relative_ref(path: &Path, base: Option<&Path>) -> String {
    base.and_then(|b| path.strip_prefix(b).ok())
        .unwrap_or(path)
        .display()
        .to_string()
}

/// Rebuild every historically successful job of a revision with its
/// dependencies substituted from the cache, and classify the failures.
pub fn audit_rebuild(
    revision: &RevisionEntry,
    records: &RecordStore,
    store: &Arc<Store>,
    opts: &RebuildOptions,
    state_dir: Option<&Path>,
) -> Result<RebuildReport, AuditError> {
    let (record, rows) = records.load_revision(&revision.revision_id)?;
    let record = record.ok_or_else(|| AuditError::MissingHistoricalRecord(revision.revision_id.clone()))?;

    let ev = Evaluator::new(store.clone(), opts.eval.clone())?;
    let (local_jobs, _) = eval_job_set(&revision.root_file, &ev)?;
    let local_drvs: BTreeMap<&str, &StorePath> = local_jobs
        .iter()
        .map(|j| (j.display_name.as_str(), &j.drv_path))
        .collect();

    let succeeded: BTreeSet<&str> = rows
        .iter()
        .filter(|r| r.status != RowStatus::Failure)
        .map(|r| r.display_name.as_str())
        .collect();
    let mut targets: Vec<(String, StorePath)> = Vec::new();
    for job in record
        .jobs
        .iter()
        .filter(|j| succeeded.contains(j.display_name.as_str()))
    {
        let drv = if store.lookup_drv(&job.drv_path).is_some() {
            job.drv_path.clone()
        } else {
            match local_drvs.get(job.display_name.as_str()) {
                Some(d) => (*d).clone(),
                None => return Err(AuditError::UnknownJob(job.display_name.clone())),
            }
        };
        targets.push((job.display_name.clone(), drv));
    }

    let prefetch = RealizeOptions {
        substituters: vec![opts.cache.clone()],
        sandbox: opts.sandbox.clone(),
        max_parallel: opts.max_parallel,
        seed: opts.seed,
        source_mirror: opts.source_mirror.clone(),
        log_dir: opts.log_dir.clone(),
        ..RealizeOptions::default()
    };
    let all: Vec<StorePath> = targets.iter().map(|(_, d)| d.clone()).collect();
    let fetched = realize(&all, &prefetch, store, store.as_ref())?;
    let builds_during_prefetch = fetched.values().filter(|r| r.executed).count();
    if builds_during_prefetch > 0 {
        tracing::warn!(builds_during_prefetch, "some dependencies were missing from the cache");
    }

    let next = AtomicUsize::new(0);
    let attempts = Mutex::new(Vec::new());
    let workers = opts.max_parallel.clamp(1, targets.len().max(1));
    let run_one = |name: &str, drv: &StorePath| -> Result<Attempt, AuditError> {
        let build = |attempt: u32| -> Result<BuildResult, AuditError> {
            let mut r = realize(
                std::slice::from_ref(drv),
                &forced(drv, opts, attempt),
                store,
                store.as_ref(),
            )?;
            Ok(r.remove(drv).expect("target has a result"))
        };
        let first = build(0)?;
        let mut attempt = Attempt {
            display_name: name.to_string(),
            class: None,
            probes: 0,
            digests_match: false,
            first,
        };
        if attempt.first.status == BuildStatus::Failure {
            let probes = &mut attempt.probes;
            let outcomes = (1..=opts.retries).map(|a| {
                *probes += 1;
                build(a).map(|r| r.status.is_ok()).unwrap_or(false)
            });
            attempt.class = Some(classify_failure(&attempt.first.log, outcomes));
        } else {
            let cached: BTreeMap<String, String> = attempt
                .first
                .output_paths
                .iter()
                .filter_map(|(o, p)| {
                    let e = opts.cache.query(p).ok().flatten()?;
                    Some((o.clone(), e.archive_digest))
                })
                .collect();
            attempt.digests_match = cached == attempt.first.output_digests;
        }
        Ok(attempt)
    };
    let errors = Mutex::new(Vec::new());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, drv)) = targets.get(i) else { break };
                match run_one(name, drv) {
                    Ok(a) => attempts.lock().expect("attempts poisoned").push(a),
                    Err(e) => errors.lock().expect("errors poisoned").push(e),
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().expect("errors poisoned").into_iter().next() {
        return Err(e);
    }
    let mut attempts = attempts.into_inner().expect("attempts poisoned");
    attempts.sort_by(|a, b| a.display_name.cmp(&b.display_name));

    let base = state_dir.map(Path::to_path_buf);
    let mut report = RebuildReport {
        attempted: attempts.len(),
        succeeded: 0,
        failed: Vec::new(),
        success_rate: 1.0,
        class_counts: FailureClass::ALL.iter().map(|c| (*c, 0)).collect(),
        builder_invocations: attempts.iter().filter(|a| a.first.executed).count(),
        probe_invocations: attempts.iter().map(|a| a.probes as usize).sum(),
        digest_matches: 0,
        digest_mismatches: Vec::new(),
        sandbox_version: opts.sandbox.version,
    };
    for a in attempts {
        match a.class {
            None => {
                report.succeeded += 1;
                if a.digests_match {
                    report.digest_matches += 1;
                } else {
                    report.digest_mismatches.push(a.display_name);
                }
            }
            Some(class) => {
                *report.class_counts.entry(class).or_default() += 1;
                report.failed.push(FailedRebuild {
                    display_name: a.display_name,
                    class,
                    log_ref: a.first.log_path.as_deref().map(|p| relative_ref(p, base.as_deref())),
                    probe_attempts: a.probes,
                });
            }
        }
    }
    if report.attempted > 0 {
        report.success_rate = report.succeeded as f64 / report.attempted as f64;
    }
    Ok(report)
}
