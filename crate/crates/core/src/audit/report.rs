use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AuditError, FailureClass, JobSetDiff, PathDiffReport, RebuildReport};
use crate::util::{rate4, to_pretty_json};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Thresholds {
    pub require_identical_job_set: bool,
    pub min_match_rate: f64,
    pub min_success_rate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            require_identical_job_set: true,
            min_match_rate: 1.0,
            min_success_rate: 1.0,
        }
    }
}

/// Rates are compared at the precision they are reported with.
fn at_least(rate: f64, min: f64) -> bool {
    rate4(rate).parse::<f64>().unwrap_or(rate) >= min - 1e-9
}

impl Thresholds {
    pub fn eval_checks(&self, jobs: &JobSetDiff, paths: &PathDiffReport) -> BTreeMap<String, bool> {
        BTreeMap::from([
            (
                "jobSetIdentical".to_string(),
                jobs.identical || !self.require_identical_job_set,
            ),
            ("matchRate".to_string(), at_least(paths.match_rate, self.min_match_rate)),
        ])
    }

    pub fn rebuild_checks(&self, rebuild: &RebuildReport) -> BTreeMap<String, bool> {
        BTreeMap::from([(
            "successRate".to_string(),
            at_least(rebuild.success_rate, self.min_success_rate),
        )])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditReport {
    pub revision_id: String,
    pub revision_name: String,
    pub job_set: Option<JobSetDiff>,
    pub paths: Option<PathDiffReport>,
    pub rebuild: Option<RebuildReport>,
    pub checks: BTreeMap<String, bool>,
}

impl AuditReport {
    pub fn new(revision_id: &str, revision_name: &str) -> AuditReport {
        AuditReport {
            revision_id: revision_id.into(),
            revision_name: revision_name.into(),
            job_set: None,
            paths: None,
            rebuild: None,
            checks: BTreeMap::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.values().all(|ok| *ok)
    }

    /// Sections present in `newer` replace ours; checks are merged by name.
    pub fn merge(&mut self, newer: AuditReport) {
        self.revision_name = newer.revision_name;
        if newer.job_set.is_some() {
            self.job_set = newer.job_set;
        }
        if newer.paths.is_some() {
            self.paths = newer.paths;
        }
        if newer.rebuild.is_some() {
            self.rebuild = newer.rebuild;
        }
        self.checks.extend(newer.checks);
    }

    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let yes_no = |b: bool| if b { "yes" } else { "no" };
        let _ = writeln!(t, "audit of revision {} ({})", self.revision_name, self.revision_id);
        if let Some(j) = &self.job_set {
            let _ = writeln!(t);
            let _ = writeln!(t, "{:<28}{}", "job set identical", yes_no(j.identical));
            for (label, names) in [
                ("missing locally", &j.missing_locally),
                ("extra locally", &j.extra_locally),
                ("known-bug exclusions", &j.known_bug_exclusions),
            ] {
                let _ = writeln!(t, "  {:<26}{}", label, names.len());
                for n in names {
                    let _ = writeln!(t, "    {n}");
                }
            }
        }
        if let Some(p) = &self.paths {
            let _ = writeln!(t);
            let _ = writeln!(
                t,
                "{:<28}{} ({} of {} jobs)",
                "output path match rate",
                rate4(p.match_rate),
                p.matching,
                p.total_jobs
            );
            for d in &p.differing {
                let flag = if d.impure_flag { "  [impure]" } else { "" };
                let _ = writeln!(t, "    {} ({}){flag}", d.display_name, d.differing_outputs.join(", "));
            }
        }
        if let Some(r) = &self.rebuild {
            let _ = writeln!(t);
            let _ = writeln!(
                t,
                "{:<28}{} ({} of {} jobs, sandbox v{})",
                "rebuild success rate",
                rate4(r.success_rate),
                r.succeeded,
                r.attempted,
                r.sandbox_version
            );
            for c in FailureClass::ALL {
                let _ = writeln!(
                    t,
                    "  {:<26}{}",
                    c.as_str(),
                    r.class_counts.get(&c).copied().unwrap_or(0)
                );
            }
            for f in &r.failed {
                let _ = writeln!(t, "    {} [{}]", f.display_name, f.class);
            }
            let _ = writeln!(t, "  {:<26}{}", "builder invocations", r.builder_invocations);
            let _ = writeln!(t, "  {:<26}{}", "digest mismatches", r.digest_mismatches.len());
        }
        let _ = writeln!(t);
        for (name, ok) in &self.checks {
            let _ = writeln!(t, "check {:<22}{}", name, if *ok { "pass" } else { "FAIL" });
        }
        let _ = writeln!(t, "result {}", if self.passed() { "PASS" } else { "FAIL" });
        t
    }
}

pub fn report_paths(state_dir: &Path, revision_id: &str) -> (PathBuf, PathBuf) {
    let dir = state_dir.join("reports");
    (
        dir.join(format!("{revision_id}.json")),
        dir.join(format!("{revision_id}.txt")),
    )
}

/// Merge `report` into the revision's existing report (if any) and write
/// both the JSON and the text rendering. Returns the merged report.
pub fn emit_report(state_dir: &Path, report: AuditReport) -> Result<AuditReport, AuditError> {
    let (json_path, txt_path) = report_paths(state_dir, &report.revision_id);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AuditError::Io { path, source }
    };
    let mut merged = match fs::read_to_string(&json_path) {
        Ok(text) => match serde_json::from_str::<AuditReport>(&text) {
            Ok(old) if old.revision_id == report.revision_id => old,
            _ => {
                tracing::warn!(path = %json_path.display(), "replacing unreadable report");
                AuditReport::new(&report.revision_id, &report.revision_name)
            }
        },
        Err(_) => AuditReport::new(&report.revision_id, &report.revision_name),
    };
    merged.merge(report);
    let dir = json_path.parent().expect("report path has a parent");
    fs::create_dir_all(dir).map_err(io(dir))?;
    fs::write(&json_path, to_pretty_json(&merged)).map_err(io(&json_path))?;
    fs::write(&txt_path, merged.to_text()).map_err(io(&txt_path))?;
    Ok(merged)
}
