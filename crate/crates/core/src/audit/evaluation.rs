use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{rate_str, AuditError};
use crate::ci::{is_dotted, EvalRecord, RecordStore, RevisionEntry};
use crate::lang::{eval_job_set, EvalConfig, Evaluator, Job};
use crate::store::Store;
use crate::store_path::StorePath;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobSetDiff {
    pub identical: bool,
    pub missing_locally: Vec<String>,
    pub extra_locally: Vec<String>,
    pub known_bug_exclusions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PathDiff {
    pub display_name: String,
    pub historical_paths: BTreeMap<String, StorePath>,
    pub local_paths: BTreeMap<String, StorePath>,
    /// Outputs whose paths differ (or exist on one side only).
    pub differing_outputs: Vec<String>,
    pub impure_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PathDiffReport {
    pub total_jobs: usize,
    pub matching: usize,
    pub differing: Vec<PathDiff>,
    #[serde(with = "rate_str")]
    pub match_rate: f64,
}

/// Compare job names. With `hydra_dot_bug`, jobs with a dotted attribute
/// name are set aside on both sides and listed as exclusions.
pub fn diff_job_sets<'a>(
    historical: impl IntoIterator<Item = &'a str>,
    local: impl IntoIterator<Item = &'a str>,
    hydra_dot_bug: bool,
) -> JobSetDiff {
    let mut exclusions = BTreeSet::new();
    let mut split = |names: &mut dyn Iterator<Item = &'a str>| -> BTreeSet<&'a str> {
        names
            .filter(|n| {
                let excluded = hydra_dot_bug && is_dotted(n);
                if excluded {
                    exclusions.insert(n.to_string());
                }
                !excluded
            })
            .collect()
    };
    let hist = split(&mut historical.into_iter());
    let loc = split(&mut local.into_iter());
    let missing_locally: Vec<String> = hist.difference(&loc).map(|s| s.to_string()).collect();
    let extra_locally: Vec<String> = loc.difference(&hist).map(|s| s.to_string()).collect();
    JobSetDiff {
        identical: missing_locally.is_empty() && extra_locally.is_empty(),
        missing_locally,
        extra_locally,
        known_bug_exclusions: exclusions.into_iter().collect(),
    }
}

/// Compare output paths of the jobs present on both sides (after
/// exclusions).
pub fn diff_paths(record: &EvalRecord, local: &[Job], excluded: &BTreeSet<String>) -> PathDiffReport {
    let local_by_name: BTreeMap<&str, &Job> = local.iter().map(|j| (j.display_name.as_str(), j)).collect();
    let mut total_jobs = 0;
    let mut differing = Vec::new();
    for hist in record.jobs.iter().filter(|j| !excluded.contains(&j.display_name)) {
        let Some(loc) = local_by_name.get(hist.display_name.as_str()) else {
            continue;
        };
        total_jobs += 1;
        let names: BTreeSet<&String> = hist.output_paths.keys().chain(loc.output_paths.keys()).collect();
        let differing_outputs: Vec<String> = names
            .into_iter()
            .filter(|o| hist.output_paths.get(*o) != loc.output_paths.get(*o))
            .cloned()
            .collect();
        if !differing_outputs.is_empty() {
            differing.push(PathDiff {
                display_name: hist.display_name.clone(),
                historical_paths: hist.output_paths.clone(),
                local_paths: loc.output_paths.clone(),
                differing_outputs,
                impure_flag: loc.impure || record.impure_jobs.contains(&hist.display_name),
            });
        }
    }
    let matching = total_jobs - differing.len();
    PathDiffReport {
        total_jobs,
        matching,
        differing,
        match_rate: if total_jobs == 0 {
            1.0
        } else {
            matching as f64 / total_jobs as f64
        },
    }
}

#[derive(Debug, Clone)]
pub struct EvalAuditOptions {
    pub eval: EvalConfig,
    pub hydra_dot_bug: bool,
}

/// Re-evaluate a recorded revision and compare against its CI record.
pub fn audit_evaluation(
    revision: &RevisionEntry,
    records: &RecordStore,
    store: &Arc<Store>,
    opts: &EvalAuditOptions,
) -> Result<(JobSetDiff, PathDiffReport), AuditError> {
    let (record, _) = records.load_revision(&revision.revision_id)?;
    let record = record.ok_or_else(|| AuditError::MissingHistoricalRecord(revision.revision_id.clone()))?;
    let ev = Evaluator::new(store.clone(), opts.eval.clone())?;
    let (jobs, _) = eval_job_set(&revision.root_file, &ev)?;
    let jobs_diff = diff_job_sets(
        record.jobs.iter().map(|j| j.display_name.as_str()),
        jobs.iter().map(|j| j.display_name.as_str()),
        opts.hydra_dot_bug,
    );
    let excluded: BTreeSet<String> = jobs_diff.known_bug_exclusions.iter().cloned().collect();
    let paths = diff_paths(&record, &jobs, &excluded);
    Ok((jobs_diff, paths))
}
