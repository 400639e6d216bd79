use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use mfpm_core::audit::{
    audit_evaluation, audit_rebuild, emit_report, sample_revisions, AuditReport, EvalAuditOptions, RebuildOptions,
    Thresholds,
};
use mfpm_core::builder::{realize, spawn_env, RealizeOptions};
use mfpm_core::cache::{Cache, CacheServer};
use mfpm_core::ci::{ci_run, read_manifest, CiOptions, RecordStore, RevisionEntry};
use mfpm_core::lang::{eval_job_set, EvalConfig, Evaluator, Job};
use mfpm_core::util::to_pretty_json;
use mfpm_core::{Store, StorePath, STORE_PREFIX};

use super::{ArchiveCommand, AuditCommand, CacheCommand, CiCommand, Command, EvalArgs, GlobalArgs, ThresholdArgs};

fn open_store(global: &GlobalArgs) -> Result<Arc<Store>> {
    if global.store == global.state {
        bail!("the state directory must differ from the store root");
    }
    let store = Store::open(&global.store).with_context(|| format!("opening store at {}", global.store.display()))?;
    Ok(Arc::new(store))
}

fn eval_config(args: &EvalArgs) -> Result<EvalConfig> {
    let mut config = EvalConfig {
        platform: args.platform.clone(),
        max_parallel: args.max_parallel.max(1),
        ..EvalConfig::default()
    };
    for stub in &args.impure_stubs {
        let (k, v) = stub
            .split_once('=')
            .ok_or_else(|| anyhow!("impure stub `{stub}` is not NAME=VALUE"))?;
        match k {
            "sysVersion" => config.sys_version = v.to_string(),
            "inShell" => {
                config.in_shell = v
                    .parse()
                    .map_err(|_| anyhow!("inShell stub must be true or false, got `{v}`"))?
            }
            _ => bail!("unknown impure builtin `{k}` (expected sysVersion or inShell)"),
        }
    }
    Ok(config)
}

fn thresholds(args: &ThresholdArgs) -> Thresholds {
    Thresholds {
        require_identical_job_set: !args.allow_job_set_diff,
        min_match_rate: args.min_match_rate,
        min_success_rate: args.min_success_rate,
    }
}

/// Accept `/mfpm/store/<base>` or a physical path inside the store root.
fn parse_store_path(store: &Store, text: &str) -> Result<StorePath> {
    if text.starts_with(STORE_PREFIX) {
        return text.parse().with_context(|| format!("bad store path `{text}`"));
    }
    let p = Path::new(text);
    let root = store.root();
    let base = p
        .canonicalize()
        .ok()
        .and_then(|c| c.strip_prefix(root).ok().map(Path::to_path_buf))
        .or_else(|| p.strip_prefix(root).ok().map(Path::to_path_buf))
        .and_then(|rel| rel.to_str().map(str::to_string))
        .ok_or_else(|| anyhow!("`{text}` is not inside the store"))?;
    StorePath::from_base_name(&base).with_context(|| format!("bad store path `{text}`"))
}

fn evaluate(file: &Path, store: &Arc<Store>, args: &EvalArgs) -> Result<Vec<Job>> {
    let ev = Evaluator::new(store.clone(), eval_config(args)?)?;
    let (jobs, trace) = eval_job_set(file, &ev)?;
    for (name, message) in &trace.errors {
        tracing::warn!(job = %name, "evaluation failed: {message}");
    }
    if !trace.impure_builtins_used.is_empty() {
        tracing::info!(builtins = ?trace.impure_builtins_used, "impure builtins used");
    }
    Ok(jobs)
}

fn select_jobs(jobs: Vec<Job>, attrs: &[String]) -> Result<Vec<Job>> {
    if attrs.is_empty() {
        return Ok(jobs);
    }
    attrs
        .iter()
        .map(|a| {
            jobs.iter()
                .find(|j| &j.display_name == a)
                .cloned()
                .ok_or_else(|| anyhow!("no job named `{a}`"))
        })
        .collect()
}

fn mirror_or(global: &GlobalArgs, fallback: Option<PathBuf>) -> Option<PathBuf> {
    global
        .source_mirror
        .clone()
        .or_else(|| fallback.filter(|p| p.is_dir()))
        .map(|p| p.canonicalize().unwrap_or(p))
}

fn print(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub(crate) fn run(global: GlobalArgs, command: Command) -> Result<bool> {
    match command {
        Command::Eval { file, eval } => {
            let store = open_store(&global)?;
            let jobs = evaluate(&file, &store, &eval)?;
            let mut text = String::new();
            for j in &jobs {
                let out = j.output_paths.get("out").or_else(|| j.output_paths.values().next());
                let out = out.map(ToString::to_string).unwrap_or_default();
                text.push_str(&format!("{} {} {}\n", j.display_name, j.drv_path, out));
            }
            print(&text)?;
            Ok(true)
        }
        Command::Build {
            file,
            attrs,
            eval,
            sandbox,
            substituters,
            force_rebuild,
            seed,
        } => {
            let store = open_store(&global)?;
            let all = evaluate(&file, &store, &eval)?;
            let forced = if force_rebuild.is_empty() {
                Vec::new()
            } else {
                select_jobs(all.clone(), &force_rebuild)?
            };
            let jobs = select_jobs(all, &attrs)?;
            let targets: Vec<StorePath> = jobs.iter().map(|j| j.drv_path.clone()).collect();
            let opts = RealizeOptions {
                substituters: substituters.iter().map(|s| Cache::open(s)).collect(),
                force_rebuild: forced.iter().map(|j| j.drv_path.clone()).collect(),
                sandbox,
                max_parallel: eval.max_parallel.max(1),
                seed,
                source_mirror: mirror_or(&global, file.parent().and_then(Path::parent).map(|p| p.join("mirror"))),
                log_dir: Some(global.state.join("logs")),
                ..RealizeOptions::default()
            };
            let results = realize(&targets, &opts, &store, store.as_ref())?;
            let mut ok = true;
            let mut text = String::new();
            for j in &jobs {
                let r = &results[&j.drv_path];
                ok &= r.status.is_ok();
                let status = serde_json::to_value(r.status)?;
                let outs: Vec<String> = r.output_paths.iter().map(|(o, p)| format!("{o}={p}")).collect();
                text.push_str(&format!(
                    "{} {} {}\n",
                    j.display_name,
                    status.as_str().unwrap_or("?"),
                    outs.join(" ")
                ));
                if let Some(e) = &r.error {
                    eprintln!("{}: {e}", j.display_name);
                    if !r.log.is_empty() {
                        eprint!("{}", r.log);
                    }
                }
            }
            print(&text)?;
            Ok(ok)
        }
        Command::ShellEnv {
            file,
            attr,
            eval,
            sandbox,
            substituters,
        } => {
            let store = open_store(&global)?;
            let job = select_jobs(evaluate(&file, &store, &eval)?, &[attr])?.remove(0);
            let opts = RealizeOptions {
                substituters: substituters.iter().map(|s| Cache::open(s)).collect(),
                sandbox,
                max_parallel: eval.max_parallel.max(1),
                source_mirror: mirror_or(&global, file.parent().and_then(Path::parent).map(|p| p.join("mirror"))),
                log_dir: Some(global.state.join("logs")),
                ..RealizeOptions::default()
            };
            let rc = spawn_env(&job.drv_path, &opts, &store, store.as_ref(), &global.state)?;
            print(&format!("{}\n", rc.display()))?;
            Ok(true)
        }
        Command::ShowDrv { path } => {
            let store = open_store(&global)?;
            let path = parse_store_path(&store, &path)?;
            let drv = store.read_derivation(&path)?;
            print(&drv.to_pretty_json())?;
            Ok(true)
        }
        Command::Ci(CiCommand::Run {
            revisions,
            manifest,
            cache,
            important,
            sandbox,
            seed,
            simulate_dot_bug,
            eval,
        }) => {
            let store = open_store(&global)?;
            let manifest_path = manifest.unwrap_or_else(|| revisions.join("revisions.tsv"));
            let entries = read_manifest(&manifest_path)?;
            let records = RecordStore::open(&global.state)?;
            let opts = CiOptions {
                important_jobs: important.into_iter().filter(|s| !s.is_empty()).collect(),
                eval: eval_config(&eval)?,
                realize: RealizeOptions {
                    sandbox,
                    max_parallel: eval.max_parallel.max(1),
                    seed,
                    source_mirror: mirror_or(&global, Some(revisions.join("mirror"))),
                    ..RealizeOptions::default()
                },
                drop_dotted_jobs: simulate_dot_bug,
            };
            let cache = Cache::open(&cache);
            let outcomes = ci_run(&revisions, &entries, &opts, &store, &cache, &records, &global.state);
            let mut ok = true;
            let mut text = String::new();
            for (entry, outcome) in entries.iter().zip(outcomes) {
                match outcome {
                    Ok(summary) => {
                        text.push_str(&serde_json::to_string(&serde_json::to_value(&summary)?)?);
                        text.push('\n');
                    }
                    Err(e) => {
                        ok = false;
                        eprintln!("revision {}: {e}", entry.name);
                    }
                }
            }
            print(&text)?;
            Ok(ok)
        }
        Command::Cache(CacheCommand::Serve { dir, listen }) => {
            fs::create_dir_all(&dir)?;
            let server = CacheServer::start(&dir, &listen)?;
            print(&format!("{}\n", server.url()))?;
            server.wait();
            Ok(true)
        }
        Command::Audit(AuditCommand::Sample { manifest, k }) => {
            let entries = read_manifest(&manifest)?;
            let available: Vec<(String, i64)> = entries.into_iter().map(|e| (e.name, e.timestamp)).collect();
            if available.is_empty() {
                bail!("manifest {} lists no revisions", manifest.display());
            }
            print(&to_pretty_json(&sample_revisions(&available, k)))?;
            Ok(true)
        }
        Command::Audit(AuditCommand::Eval {
            revision,
            hydra_dot_bug,
            eval,
            thresholds: th,
        }) => {
            let store = open_store(&global)?;
            let records = RecordStore::open(&global.state)?;
            let entry = find_revision(&records, &revision)?;
            let opts = EvalAuditOptions {
                eval: eval_config(&eval)?,
                hydra_dot_bug,
            };
            let (jobs, paths) = audit_evaluation(&entry, &records, &store, &opts)?;
            let mut report = AuditReport::new(&entry.revision_id, &entry.name);
            report.checks = thresholds(&th).eval_checks(&jobs, &paths);
            let passed = report.passed();
            report.job_set = Some(jobs);
            report.paths = Some(paths);
            let merged = emit_report(&global.state, report)?;
            print(&to_pretty_json(&merged))?;
            Ok(passed)
        }
        Command::Audit(AuditCommand::Rebuild {
            revision,
            cache,
            sandbox,
            retries,
            seed,
            eval,
            thresholds: th,
        }) => {
            let store = open_store(&global)?;
            let records = RecordStore::open(&global.state)?;
            let entry = find_revision(&records, &revision)?;
            let fallback = entry
                .root_file
                .parent()
                .and_then(Path::parent)
                .map(|p| p.join("mirror"));
            let opts = RebuildOptions {
                cache: Cache::open(&cache),
                sandbox,
                retries,
                max_parallel: eval.max_parallel.max(1),
                seed,
                source_mirror: mirror_or(&global, fallback),
                log_dir: Some(global.state.join("logs").join("audit")),
                eval: eval_config(&eval)?,
            };
            let rebuild = audit_rebuild(&entry, &records, &store, &opts, Some(&global.state))?;
            let mut report = AuditReport::new(&entry.revision_id, &entry.name);
            report.checks = thresholds(&th).rebuild_checks(&rebuild);
            let passed = report.passed();
            report.rebuild = Some(rebuild);
            let merged = emit_report(&global.state, report)?;
            print(&to_pretty_json(&merged))?;
            Ok(passed)
        }
        Command::Archive(ArchiveCommand::Export { path, output }) => {
            let store = open_store(&global)?;
            let path = parse_store_path(&store, &path)?;
            let bytes = store.export_archive(&path)?;
            match output {
                Some(f) => fs::write(&f, bytes).with_context(|| format!("writing {}", f.display()))?,
                None => {
                    let mut out = io::stdout().lock();
                    out.write_all(&bytes)?;
                    out.flush()?;
                }
            }
            Ok(true)
        }
        Command::Archive(ArchiveCommand::Import { path, file, references }) => {
            let store = open_store(&global)?;
            let path = parse_store_path(&store, &path)?;
            let refs = references
                .iter()
                .map(|r| parse_store_path(&store, r))
                .collect::<Result<BTreeSet<_>>>()?;
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let registered = store.import_archive(&path, &bytes, refs, None)?;
            print(&format!("{registered}\n"))?;
            Ok(true)
        }
    }
}

fn find_revision(records: &RecordStore, key: &str) -> Result<RevisionEntry> {
    records
        .find_revision(key)?
        .ok_or_else(|| anyhow!("no recorded revision matches `{key}` (run `mfpm ci run` first)"))
}
