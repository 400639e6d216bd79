use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::exec::{input_paths, search_path, to_physical};
use super::{realize, BuildError, RealizeOptions};
use crate::derivation::{DrvError, DrvLookup};
use crate::store::Store;
use crate::store_path::StorePath;

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn shell_quote(value: &str) -> String {
    format!("'{}'", value.replace('\'', r"'\''"))
}

pub fn render_rc(drv_path: &StorePath, env: &BTreeMap<String, String>) -> String {
    let mut rc = format!("# build environment of {drv_path}\n");
    for (k, v) in env {
        if is_identifier(k) {
            rc.push_str(&format!("export {k}={}\n", shell_quote(v)));
        } else {
            rc.push_str(&format!("# skipped {k:?}: not a shell identifier\n"));
        }
    }
    rc
}

/// Realize the inputs of `drv_path` and write a shell rc file exporting its
/// build environment. Returns the rc file's path.
pub fn spawn_env(
    drv_path: &StorePath,
    opts: &RealizeOptions,
    store: &Store,
    lookup: &dyn DrvLookup,
    state_dir: &Path,
) -> Result<PathBuf, BuildError> {
    let drv = lookup
        .lookup_drv(drv_path)
        .ok_or_else(|| DrvError::MissingInput(drv_path.clone()))?;
    let inputs: Vec<StorePath> = drv.input_drvs.keys().cloned().collect();
    let results = realize(&inputs, opts, store, lookup)?;
    if let Some(failed) = inputs.iter().filter_map(|i| results.get(i)).find(|r| !r.status.is_ok()) {
        return Err(failed.error.clone().unwrap_or(BuildError::DependencyFailed {
            drv_path: drv_path.clone(),
            dependency: failed.drv_path.clone(),
        }));
    }

    let mut env: BTreeMap<String, String> = drv
        .env
        .iter()
        .map(|(k, v)| (k.clone(), to_physical(store, v)))
        .collect();
    if let Some(path) = search_path(store, &input_paths(&drv, lookup)?) {
        env.insert("PATH".into(), path);
    }
    for (k, v) in &opts.sandbox.exposed_host_info {
        env.insert(k.clone(), v.clone());
    }

    let dir = state_dir.join("shells");
    let rc_path = dir.join(format!("{}-{}.rc", drv_path.digest(), drv.name));
    fs::create_dir_all(&dir)
        .and_then(|_| fs::write(&rc_path, render_rc(drv_path, &env)))
        .map_err(|e| BuildError::Store(format!("writing {}: {e}", rc_path.display())))?;
    Ok(rc_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting_and_identifier_filter() {
        let p: StorePath = format!("/mfpm/store/{}-x.drv", "a".repeat(32)).parse().unwrap();
        let env = BTreeMap::from([
            ("a".to_string(), "it's".to_string()),
            ("b-c".to_string(), "x".to_string()),
        ]);
        let rc = render_rc(&p, &env);
        assert!(rc.contains("export a='it'\\''s'\n"));
        assert!(rc.contains("# skipped \"b-c\""));
        assert!(!rc.contains("export b-c"));
    }
}
