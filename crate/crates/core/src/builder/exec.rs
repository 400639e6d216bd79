//! Running one builder process.
//!
//! Builders see physical locations: logical store paths in the environment
//! and arguments are translated to the configured store root, and outputs
//! point at a staging area. Afterwards every physical location in the
//! outputs and the log is rewritten back to its logical form, so the result
//! does not depend on where the store or the build directory happened to be.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use super::{BuildError, RealizeOptions};
use crate::archive::Tree;
use crate::derivation::{Derivation, DrvLookup};
use crate::store::Store;
use crate::store_path::{sha256, sha256_hex, StorePath, DIGEST32_LEN, STORE_PREFIX};

pub const UNSET_PATH: &str = "/path-not-set";
pub const UNSET_MIRROR: &str = "/source-mirror-not-set";
pub const LOGICAL_BUILD_DIR: &str = "/build";
pub const SEED_FILE: &str = ".seed";

/// The seed byte a build sees in `.seed` for a given attempt.
pub fn seed_byte(base: u64, attempt: u32) -> u8 {
    sha256(format!("seed:{base}:{attempt}"))[0]
}

/// Replace a logical store prefix with the physical store root.
pub(crate) fn to_physical(store: &Store, s: &str) -> String {
    s.replace(&format!("{STORE_PREFIX}/"), &format!("{}/", store.root().display()))
}

/// Output paths of the inputs a derivation declares, then its sources.
pub(crate) fn input_paths(drv: &Derivation, lookup: &dyn DrvLookup) -> Result<Vec<StorePath>, BuildError> {
    let mut paths = Vec::new();
    for (input, outs) in &drv.input_drvs {
        let d = lookup
            .lookup_drv(input)
            .ok_or_else(|| BuildError::Plan(crate::derivation::DrvError::MissingInput(input.clone())))?;
        for o in outs {
            let p = d.output_path(o).map_err(BuildError::Plan)?;
            paths.push(p.clone());
        }
    }
    paths.extend(drv.input_srcs.iter().cloned());
    Ok(paths)
}

/// `PATH` built from the `bin` directories of the inputs, or `None`.
pub(crate) fn search_path(store: &Store, inputs: &[StorePath]) -> Option<String> {
    let dirs: Vec<String> = inputs
        .iter()
        .map(|p| store.physical_path(p).join("bin"))
        .filter(|d| d.is_dir())
        .map(|d| d.display().to_string())
        .collect();
    (!dirs.is_empty()).then(|| dirs.join(":"))
}

/// The environment of a build, before output variables are added.
pub(crate) fn base_env(
    store: &Store,
    drv: &Derivation,
    inputs: &[StorePath],
    opts: &RealizeOptions,
) -> BTreeMap<String, String> {
    let mut env: BTreeMap<String, String> = drv
        .env
        .iter()
        .map(|(k, v)| (k.clone(), to_physical(store, v)))
        .collect();
    env.insert(
        "PATH".into(),
        search_path(store, inputs).unwrap_or_else(|| UNSET_PATH.into()),
    );
    for (k, v) in &opts.sandbox.exposed_host_info {
        env.insert(k.clone(), v.clone());
    }
    if opts.sandbox.network_allowed(drv) {
        let mirror = opts
            .source_mirror
            .as_ref()
            .map(|m| m.display().to_string())
            .unwrap_or_else(|| UNSET_MIRROR.into());
        env.insert("MFPM_SOURCE_MIRROR".into(), mirror);
    }
    env
}

/// Replace every occurrence of each pattern, trying longer patterns first.
pub(crate) fn rewrite(bytes: &[u8], rules: &[(Vec<u8>, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    'outer: while i < bytes.len() {
        for (from, to) in rules {
            if bytes[i..].starts_with(from) {
                out.extend_from_slice(to);
                i += from.len();
                continue 'outer;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    out
}

fn rules(pairs: Vec<(String, String)>) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut r: Vec<(Vec<u8>, Vec<u8>)> = pairs
        .into_iter()
        .filter(|(f, _)| !f.is_empty())
        .map(|(f, t)| (f.into_bytes(), t.into_bytes()))
        .collect();
    r.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    r
}

/// Store paths among `candidates` whose digest occurs in `tree`.
pub(crate) fn scan_references(tree: &Tree, candidates: &BTreeSet<StorePath>) -> BTreeSet<StorePath> {
    let by_digest: std::collections::HashMap<&[u8], &StorePath> =
        candidates.iter().map(|p| (p.digest().as_bytes(), p)).collect();
    let mut found = HashSet::new();
    tree.for_each_blob(&mut |blob| {
        if blob.len() < DIGEST32_LEN {
            return;
        }
        for w in blob.windows(DIGEST32_LEN) {
            if let Some(p) = by_digest.get(w) {
                found.insert((*p).clone());
            }
        }
    });
    found.into_iter().collect()
}

/// Make a directory tree writable so it can be removed.
pub(crate) fn remove_tree(path: &Path) {
    fn make_writable(p: &Path) {
        if let Ok(meta) = fs::symlink_metadata(p) {
            if meta.is_dir() {
                let _ = fs::set_permissions(p, fs::Permissions::from_mode(0o755));
                if let Ok(entries) = fs::read_dir(p) {
                    for e in entries.flatten() {
                        make_writable(&e.path());
                    }
                }
            }
        }
    }
    make_writable(path);
    let _ = fs::remove_dir_all(path);
}

pub(crate) struct ExecReport {
    pub log: String,
    /// Milliseconds since start, one per log line.
    pub line_times: Vec<u128>,
    pub duration_ms: u64,
    pub outputs: Result<BTreeMap<String, Tree>, BuildError>,
}

pub(crate) fn execute(
    store: &Store,
    drv_path: &StorePath,
    drv: &Derivation,
    lookup: &dyn DrvLookup,
    opts: &RealizeOptions,
) -> ExecReport {
    let start = Instant::now();
    let fail = |log: String, times: Vec<u128>, e: BuildError| ExecReport {
        log,
        line_times: times,
        duration_ms: start.elapsed().as_millis() as u64,
        outputs: Err(e),
    };
    let io_fail =
        |what: &str, e: std::io::Error| fail(String::new(), Vec::new(), BuildError::Store(format!("{what}: {e}")));

    let inputs = match input_paths(drv, lookup) {
        Ok(i) => i,
        Err(e) => return fail(String::new(), Vec::new(), e),
    };
    let build_dir = match tempfile::Builder::new().prefix("mfpm-build-").tempdir() {
        Ok(d) => d,
        Err(e) => return io_fail("creating build directory", e),
    };
    let build_path = fs::canonicalize(build_dir.path()).unwrap_or_else(|_| build_dir.path().to_path_buf());
    let stage_root = store.scratch_path(&drv_path.digest()[..8]);
    if let Err(e) = fs::create_dir_all(&stage_root) {
        return io_fail("creating staging directory", e);
    }
    let staged = |p: &StorePath| stage_root.join(p.base_name());

    let mut env = base_env(store, drv, &inputs, opts);
    let outputs: Vec<(String, StorePath)> = drv
        .outputs
        .iter()
        .filter_map(|(n, p)| p.clone().map(|p| (n.clone(), p)))
        .collect();
    for (name, path) in &outputs {
        env.insert(name.clone(), staged(path).display().to_string());
    }
    if let Err(e) = fs::write(
        build_path.join(SEED_FILE),
        format!("{}\n", seed_byte(opts.seed, opts.attempt)),
    ) {
        return io_fail("writing seed file", e);
    }

    let mut pairs: Vec<(String, String)> = outputs
        .iter()
        .map(|(_, p)| (staged(p).display().to_string(), p.to_string()))
        .collect();
    pairs.push((format!("{}/", store.root().display()), format!("{STORE_PREFIX}/")));
    pairs.push((build_path.display().to_string(), LOGICAL_BUILD_DIR.to_string()));
    let rules = rules(pairs);

    let (log_bytes, times, status) = match run(
        &to_physical(store, &drv.builder),
        drv.args.iter().map(|a| to_physical(store, a)),
        &env,
        &build_path,
        start,
    ) {
        Ok(r) => r,
        Err(e) => {
            remove_tree(&stage_root);
            let log = format!("cannot run builder {}: {e}\n", drv.builder);
            return fail(
                log.clone(),
                vec![0],
                BuildError::BuildFailed {
                    drv_path: drv_path.clone(),
                    exit_code: None,
                    log,
                },
            );
        }
    };
    let log = String::from_utf8_lossy(&rewrite(&log_bytes, &rules)).into_owned();

    let result = if status != Some(0) {
        Err(BuildError::BuildFailed {
            drv_path: drv_path.clone(),
            exit_code: status,
            log: log.clone(),
        })
    } else {
        collect_outputs(drv_path, drv, &outputs, &staged, &rules)
    };
    remove_tree(&stage_root);
    remove_tree(&build_path);
    ExecReport {
        log,
        line_times: times,
        duration_ms: start.elapsed().as_millis() as u64,
        outputs: result,
    }
}

type RunResult = (Vec<u8>, Vec<u128>, Option<i32>);

fn run(
    builder: &str,
    args: impl Iterator<Item = String>,
    env: &BTreeMap<String, String>,
    dir: &Path,
    start: Instant,
) -> std::io::Result<RunResult> {
    let (reader, writer) = os_pipe::pipe()?;
    let mut cmd = Command::new(builder);
    cmd.args(args)
        .env_clear()
        .envs(env)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(writer.try_clone()?)
        .stderr(writer);
    let mut child = cmd.spawn()?;
    // The command holds copies of the pipe's write end.
    drop(cmd);
    let mut reader = BufReader::new(reader);
    let mut log = Vec::new();
    let mut times = Vec::new();
    loop {
        let mut line = Vec::new();
        if reader.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        times.push(start.elapsed().as_millis());
        log.extend_from_slice(&line);
    }
    let status = child.wait()?;
    Ok((log, times, status.code()))
}

fn collect_outputs(
    drv_path: &StorePath,
    drv: &Derivation,
    outputs: &[(String, StorePath)],
    staged: &dyn Fn(&StorePath) -> PathBuf,
    rules: &[(Vec<u8>, Vec<u8>)],
) -> Result<BTreeMap<String, Tree>, BuildError> {
    let mut trees = BTreeMap::new();
    for (name, path) in outputs {
        let at = staged(path);
        if fs::symlink_metadata(&at).is_err() {
            return Err(BuildError::MissingOutput {
                drv_path: drv_path.clone(),
                output: name.clone(),
            });
        }
        let mut tree =
            Tree::read_from(&at).map_err(|e| BuildError::Store(format!("reading output {}: {e}", at.display())))?;
        if let Some(fixed) = &drv.fixed_output {
            let got = match &tree {
                Tree::File { contents, .. } if fixed.hash_algo == "sha256" => sha256_hex(contents),
                Tree::File { .. } => {
                    return Err(BuildError::Store(format!(
                        "unsupported hash algorithm {}",
                        fixed.hash_algo
                    )))
                }
                _ => String::from("<not a regular file>"),
            };
            if got != fixed.content_digest {
                return Err(BuildError::FixedOutputHashMismatch {
                    drv_path: drv_path.clone(),
                    expected: fixed.content_digest.clone(),
                    got,
                });
            }
        } else {
            tree.map_blobs(&mut |b| rewrite(b, rules));
        }
        trees.insert(name.clone(), tree);
    }
    Ok(trees)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewrite_prefers_longest_match() {
        let r = rules(vec![
            ("/s/".into(), "/mfpm/store/".into()),
            ("/s/.staging/1/abc-x".into(), "/mfpm/store/abc-x".into()),
            ("/tmp/b".into(), "/build".into()),
        ]);
        let out = rewrite(b"out=/s/.staging/1/abc-x dep=/s/def-y cwd=/tmp/b/src", &r);
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "out=/mfpm/store/abc-x dep=/mfpm/store/def-y cwd=/build/src"
        );
    }

    #[test]
    fn seed_bytes_are_fixed() {
        assert_eq!(seed_byte(0, 0), sha256("seed:0:0")[0]);
        assert_ne!(
            (0..5).map(|a| seed_byte(1, a)).collect::<Vec<_>>(),
            (0..5).map(|a| seed_byte(2, a)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn references_found_by_digest() {
        let a: StorePath = format!("{STORE_PREFIX}/{}-a", "a".repeat(32)).parse().unwrap();
        let b: StorePath = format!("{STORE_PREFIX}/{}-b", "b".repeat(32)).parse().unwrap();
        let tree = Tree::dir([
            ("f", Tree::file(format!("uses {a}/bin"))),
            ("l", Tree::symlink("elsewhere")),
        ]);
        let refs = scan_references(&tree, &BTreeSet::from([a.clone(), b]));
        assert_eq!(refs, BTreeSet::from([a]));
    }
}
