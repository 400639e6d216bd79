//! Realizing derivations: reuse what the store has, substitute from binary
//! caches, build the rest in dependency waves.

mod exec;
mod plan;
mod sandbox;
mod shell;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::Cache;
use crate::derivation::{Derivation, DrvError, DrvLookup};
use crate::store::{Store, StoreError};
use crate::store_path::StorePath;

pub use exec::{seed_byte, LOGICAL_BUILD_DIR, SEED_FILE, UNSET_MIRROR, UNSET_PATH};
pub use plan::build_plan;
pub use sandbox::{SandboxPolicy, V1_KERNEL_VERSION, V1_OS_NAME};
pub use shell::{render_rc, spawn_env};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("builder for {drv_path} failed{}", exit_code.map(|c| format!(" with exit code {c}")).unwrap_or_default())]
    BuildFailed {
        drv_path: StorePath,
        exit_code: Option<i32>,
        log: String,
    },
    #[error("hash mismatch in fixed-output derivation {drv_path}: expected {expected}, got {got}")]
    FixedOutputHashMismatch {
        drv_path: StorePath,
        expected: String,
        got: String,
    },
    #[error("substitute for {path} is corrupt: {reason}")]
    SubstituteCorrupt { path: StorePath, reason: String },
    #[error("dependency failed: {dependency}")]
    DependencyFailed { drv_path: StorePath, dependency: StorePath },
    #[error("builder for {drv_path} did not produce output `{output}`")]
    MissingOutput { drv_path: StorePath, output: String },
    #[error("store error: {0}")]
    Store(String),
    #[error(transparent)]
    Plan(#[from] DrvError),
}

impl From<StoreError> for BuildError {
    fn from(e: StoreError) -> Self {
        BuildError::Store(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildStatus {
    Success,
    Failure,
    Substituted,
    Reused,
}

impl BuildStatus {
    pub fn is_ok(self) -> bool {
        self != BuildStatus::Failure
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildResult {
    pub drv_path: StorePath,
    pub status: BuildStatus,
    pub output_paths: BTreeMap<String, StorePath>,
    /// Archive digest per output: of the tree this run produced when the
    /// builder ran, otherwise of the registered object.
    pub output_digests: BTreeMap<String, String>,
    pub log: String,
    pub log_path: Option<PathBuf>,
    pub duration_ms: u64,
    pub sandbox_version: u8,
    /// Whether the builder process was started.
    pub executed: bool,
    pub error: Option<BuildError>,
}

#[derive(Debug, Clone)]
pub struct RealizeOptions {
    pub substituters: Vec<Cache>,
    /// Build these even if their outputs are present or cached.
    pub force_rebuild: BTreeSet<StorePath>,
    pub sandbox: SandboxPolicy,
    pub max_parallel: usize,
    /// Retry budget for callers probing flaky builds; `realize` itself
    /// never retries.
    pub retries: u32,
    pub attempt: u32,
    pub seed: u64,
    pub source_mirror: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
}

impl Default for RealizeOptions {
    fn default() -> Self {
        RealizeOptions {
            substituters: Vec::new(),
            force_rebuild: BTreeSet::new(),
            sandbox: SandboxPolicy::default(),
            max_parallel: 1,
            retries: 3,
            attempt: 0,
            seed: 0,
            source_mirror: None,
            log_dir: None,
        }
    }
}

enum Action {
    Reuse,
    Substitute(usize),
    Build,
}

struct Planned {
    actions: BTreeMap<StorePath, Action>,
    drvs: BTreeMap<StorePath, Arc<Derivation>>,
}

fn classify(
    targets: &[StorePath],
    opts: &RealizeOptions,
    store: &Store,
    lookup: &dyn DrvLookup,
) -> Result<Planned, BuildError> {
    let mut planned = Planned {
        actions: BTreeMap::new(),
        drvs: BTreeMap::new(),
    };
    let mut visiting = HashSet::new();
    for t in targets {
        visit(t, opts, store, lookup, &mut planned, &mut visiting)?;
    }
    Ok(planned)
}

fn visit(
    path: &StorePath,
    opts: &RealizeOptions,
    store: &Store,
    lookup: &dyn DrvLookup,
    planned: &mut Planned,
    visiting: &mut HashSet<StorePath>,
) -> Result<(), BuildError> {
    if planned.actions.contains_key(path) {
        return Ok(());
    }
    if !visiting.insert(path.clone()) {
        return Err(DrvError::CycleDetected(path.clone()).into());
    }
    let drv = lookup
        .lookup_drv(path)
        .ok_or_else(|| DrvError::MissingInput(path.clone()))?;
    let outputs = drv.output_paths()?;
    let forced = opts.force_rebuild.contains(path);
    let action = if !forced && outputs.values().all(|o| store.has_path(o)) {
        Action::Reuse
    } else if let Some(i) = (!forced)
        .then(|| {
            opts.substituters
                .iter()
                .position(|c| outputs.values().all(|o| matches!(c.query(o), Ok(Some(_)))))
        })
        .flatten()
    {
        Action::Substitute(i)
    } else {
        for input in drv.input_drvs.keys() {
            visit(input, opts, store, lookup, planned, visiting)?;
        }
        Action::Build
    };
    visiting.remove(path);
    planned.drvs.insert(path.clone(), drv);
    planned.actions.insert(path.clone(), action);
    Ok(())
}

fn stored_digests(store: &Store, outputs: &BTreeMap<String, StorePath>) -> BTreeMap<String, String> {
    outputs
        .iter()
        .filter_map(|(n, p)| {
            store
                .query_info(p)
                .ok()
                .flatten()
                .map(|i| (n.clone(), i.archive_digest))
        })
        .collect()
}

/// Make the outputs of `targets` present in `store`.
///
/// Per-derivation failures are reported in the returned results; only
/// structural problems (cycles, unknown derivations) are errors.
pub fn realize(
    targets: &[StorePath],
    opts: &RealizeOptions,
    store: &Store,
    lookup: &dyn DrvLookup,
) -> Result<BTreeMap<StorePath, BuildResult>, BuildError> {
    let planned = classify(targets, opts, store, lookup)?;
    let mut results = BTreeMap::new();
    let result_for = |path: &StorePath, status| BuildResult {
        drv_path: path.clone(),
        status,
        output_paths: planned.drvs[path].output_paths().unwrap_or_default(),
        output_digests: BTreeMap::new(),
        log: String::new(),
        log_path: None,
        duration_ms: 0,
        sandbox_version: opts.sandbox.version,
        executed: false,
        error: None,
    };

    for (path, action) in &planned.actions {
        match action {
            Action::Reuse => {
                let mut r = result_for(path, BuildStatus::Reused);
                r.output_digests = stored_digests(store, &r.output_paths);
                results.insert(path.clone(), r);
            }
            Action::Substitute(i) => {
                let cache = &opts.substituters[*i];
                let mut r = result_for(path, BuildStatus::Substituted);
                for out in r.output_paths.values() {
                    if let Err(e) = cache.substitute(store, out) {
                        tracing::warn!(%path, error = %e, "substitution failed");
                        r.status = BuildStatus::Failure;
                        r.error = Some(BuildError::SubstituteCorrupt {
                            path: out.clone(),
                            reason: e.to_string(),
                        });
                        break;
                    }
                }
                r.output_digests = stored_digests(store, &r.output_paths);
                results.insert(path.clone(), r);
            }
            Action::Build => {}
        }
    }

    let to_build: Vec<StorePath> = planned
        .actions
        .iter()
        .filter(|(_, a)| matches!(a, Action::Build))
        .map(|(p, _)| p.clone())
        .collect();
    let is_build = |p: &StorePath| matches!(planned.actions.get(p), Some(Action::Build));
    let waves = plan::waves(&to_build, &planned.drvs, &is_build)?;
    let results = Mutex::new(results);
    for wave in waves {
        let next = AtomicUsize::new(0);
        let workers = opts.max_parallel.clamp(1, wave.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(path) = wave.get(i) else { break };
                    let drv = &planned.drvs[path];
                    let failed_dep = {
                        let done = results.lock().expect("results poisoned");
                        drv.input_drvs
                            .keys()
                            .find(|d| done.get(*d).is_none_or(|r| r.status == BuildStatus::Failure))
                            .cloned()
                    };
                    let r = match failed_dep {
                        Some(dep) => {
                            let mut r = result_for(path, BuildStatus::Failure);
                            r.error = Some(BuildError::DependencyFailed {
                                drv_path: path.clone(),
                                dependency: dep,
                            });
                            r
                        }
                        None => build_one(path, drv, store, &planned.drvs, opts),
                    };
                    results.lock().expect("results poisoned").insert(path.clone(), r);
                });
            }
        });
    }
    Ok(results.into_inner().expect("results poisoned"))
}

fn build_one(
    path: &StorePath,
    drv: &Derivation,
    store: &Store,
    lookup: &dyn DrvLookup,
    opts: &RealizeOptions,
) -> BuildResult {
    tracing::debug!(%path, attempt = opts.attempt, sandbox = %opts.sandbox, "building");
    let report = exec::execute(store, path, drv, lookup, opts);
    let output_paths = drv.output_paths().unwrap_or_default();
    let mut result = BuildResult {
        drv_path: path.clone(),
        status: BuildStatus::Success,
        output_paths: output_paths.clone(),
        output_digests: BTreeMap::new(),
        log: report.log.clone(),
        log_path: None,
        duration_ms: report.duration_ms,
        sandbox_version: opts.sandbox.version,
        executed: true,
        error: None,
    };
    if let Some(dir) = &opts.log_dir {
        let stem = match opts.attempt {
            0 => path.digest().to_string(),
            n => format!("{}.attempt{n}", path.digest()),
        };
        let log_path = dir.join(format!("{stem}.log"));
        let times: String = report.line_times.iter().map(|t| format!("{t}\n")).collect();
        let written = fs::create_dir_all(dir)
            .and_then(|_| fs::write(&log_path, &report.log))
            .and_then(|_| fs::write(dir.join(format!("{stem}.log.times")), times));
        match written {
            Ok(()) => result.log_path = Some(log_path),
            Err(e) => tracing::warn!(error = %e, "cannot write build log"),
        }
    }
    match report
        .outputs
        .and_then(|trees| register(path, drv, store, lookup, &output_paths, trees))
    {
        Ok(digests) => result.output_digests = digests,
        Err(e) => {
            tracing::info!(%path, error = %e, "build failed");
            result.status = BuildStatus::Failure;
            result.error = Some(e);
        }
    }
    result
}

fn register(
    drv_path: &StorePath,
    drv: &Derivation,
    store: &Store,
    lookup: &dyn DrvLookup,
    output_paths: &BTreeMap<String, StorePath>,
    trees: BTreeMap<String, crate::archive::Tree>,
) -> Result<BTreeMap<String, String>, BuildError> {
    let mut candidates = BTreeSet::new();
    for input in exec::input_paths(drv, lookup)? {
        candidates.extend(store.list_closure(&input)?);
    }
    candidates.extend(output_paths.values().cloned());
    let mut digests = BTreeMap::new();
    for (name, tree) in trees {
        let path = &output_paths[&name];
        digests.insert(name.clone(), tree.archive_digest());
        if store.has_path(path) {
            continue;
        }
        let mut refs = exec::scan_references(&tree, &candidates);
        refs.remove(path);
        match store.register_tree(path, &tree, refs, Some(drv_path.clone())) {
            Ok(_) | Err(StoreError::Immutable(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(digests)
}

#[cfg(test)]
mod tests;
