//! Reproducibility audit: sample recorded revisions, re-evaluate them,
//! rebuild their jobs and compare with the CI history.

mod evaluation;
mod rebuild;
mod report;
mod sample;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::builder::BuildError;
use crate::ci::RecordError;
use crate::lang::{EvalError, JobSetError};

pub use evaluation::{
    audit_evaluation, diff_job_sets, diff_paths, EvalAuditOptions, JobSetDiff, PathDiff, PathDiffReport,
};
pub use rebuild::{
    audit_rebuild, classify_failure, FailedRebuild, FailureClass, RebuildOptions, RebuildReport, CURRENT_LEAK_MARKER,
    MISSING_ENV_MARKER,
};
pub use report::{emit_report, report_paths, AuditReport, Thresholds};
pub use sample::{sample_revisions, SamplePlan, SpacingStats};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("no historical evaluation record for revision {0}")]
    MissingHistoricalRecord(String),
    #[error("historical job {0} has no derivation in the store and is gone from the revision")]
    UnknownJob(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    JobSet(#[from] JobSetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("i/o on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

mod rate_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rate: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::util::rate4(*rate))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}
