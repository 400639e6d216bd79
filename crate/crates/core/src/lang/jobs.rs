//! Job-set evaluation: walk a revision's top-level attribute set and
//! collect every derivation it exposes, isolating per-attribute failures.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::eval::{force, impure_names, impurity_pop, impurity_push, EvalError, Evaluator, Thunk};
use super::value::{DerivationValue, Value};
use super::{parse, SyntaxError};
use crate::store_path::StorePath;

const EVAL_STACK_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Job {
    pub attr_path: Vec<String>,
    pub display_name: String,
    pub drv_path: StorePath,
    pub output_paths: BTreeMap<String, StorePath>,
    pub impure: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalTrace {
    pub impure_builtins_used: BTreeSet<String>,
    /// (display name, message), sorted by name.
    pub errors: Vec<(String, String)>,
}

#[derive(Debug, Error)]
pub enum JobSetError {
    #[error("recipe file {0} not found")]
    FileNotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Syntax(#[from] SyntaxError),
    #[error("evaluating the top level failed: {0}")]
    TopLevel(EvalError),
    #[error("top-level value is {0}, not an attribute set")]
    TopLevelNotAttrs(&'static str),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("malformed job name `{name}`: {reason}")]
pub struct JobNameError {
    pub name: String,
    pub reason: String,
}

fn needs_quoting(segment: &str) -> bool {
    segment.is_empty() || segment.contains(['.', '"'])
}

pub fn job_display_name<S: AsRef<str>>(attr_path: &[S]) -> String {
    attr_path
        .iter()
        .map(|s| {
            let s = s.as_ref();
            if needs_quoting(s) {
                format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
            } else {
                s.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}

pub fn parse_job_name(name: &str) -> Result<Vec<String>, JobNameError> {
    let err = |reason: &str| JobNameError {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let mut segments = Vec::new();
    let mut chars = name.chars().peekable();
    loop {
        let mut seg = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    None => return Err(err("unterminated quoted segment")),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some(c @ ('\\' | '"')) => seg.push(c),
                        _ => return Err(err("invalid escape in quoted segment")),
                    },
                    Some(c) => seg.push(c),
                }
            }
            if !needs_quoting(&seg) {
                return Err(err("segment is quoted but does not need to be"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c == '.' {
                    break;
                }
                if c == '"' {
                    return Err(err("quote inside unquoted segment"));
                }
                seg.push(c);
                chars.next();
            }
            if seg.is_empty() {
                return Err(err("empty segment must be quoted"));
            }
        }
        segments.push(seg);
        match chars.next() {
            None => return Ok(segments),
            Some('.') => {}
            Some(_) => return Err(err("expected `.` after quoted segment")),
        }
    }
}

/// Run `f` on a thread with a stack large enough for deep evaluation.
pub fn with_big_stack<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    thread::scope(|s| {
        thread::Builder::new()
            .stack_size(EVAL_STACK_BYTES)
            .spawn_scoped(s, f)
            .expect("spawn evaluation thread")
            .join()
            .unwrap_or_else(|p| std::panic::resume_unwind(p))
    })
}

enum Outcome {
    Job(Job),
    Error(String, String),
}

/// Evaluate the recipe at `root` and list its jobs. Attributes that fail to
/// evaluate are recorded in the trace and skipped.
pub fn eval_job_set(root: &Path, ev: &Evaluator) -> Result<(Vec<Job>, EvalTrace), JobSetError> {
    let source = fs::read_to_string(root).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            JobSetError::FileNotFound(root.to_path_buf())
        } else {
            JobSetError::Io {
                path: root.to_path_buf(),
                source,
            }
        }
    })?;
    let expr = Arc::new(parse(&source)?);
    with_big_stack(|| {
        impurity_push();
        let top = ev.eval_root(&expr);
        let top_flags = impurity_pop();
        let attrs = match top {
            Ok(Value::Attrs(a)) => a,
            Ok(other) => return Err(JobSetError::TopLevelNotAttrs(other.type_name())),
            Err(e) => return Err(JobSetError::TopLevel(e)),
        };
        let items: Vec<(&String, &Thunk)> = attrs.iter().collect();
        let next = AtomicUsize::new(0);
        let outcomes = Mutex::new(Vec::new());
        let all_flags = Mutex::new(top_flags);
        let workers = ev.config().max_parallel.clamp(1, items.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                thread::Builder::new()
                    .stack_size(EVAL_STACK_BYTES)
                    .spawn_scoped(s, || {
                        let mut local = Vec::new();
                        let mut flags = 0;
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some((name, thunk)) = items.get(i) else { break };
                            flags |= walk(ev, vec![(*name).clone()], thunk, top_flags, &mut local);
                        }
                        outcomes.lock().expect("outcomes poisoned").extend(local);
                        *all_flags.lock().expect("flags poisoned") |= flags;
                    })
                    .expect("spawn evaluation worker");
            }
        });

        let mut jobs = Vec::new();
        let mut trace = EvalTrace {
            impure_builtins_used: impure_names(all_flags.into_inner().expect("flags poisoned")),
            errors: Vec::new(),
        };
        for o in outcomes.into_inner().expect("outcomes poisoned") {
            match o {
                Outcome::Job(j) => jobs.push(j),
                Outcome::Error(n, m) => trace.errors.push((n, m)),
            }
        }
        jobs.sort_by(|a, b| a.display_name.cmp(&b.display_name));
        trace.errors.sort();
        Ok((jobs, trace))
    })
}

/// Returns the impurity flags observed below this attribute.
fn walk(ev: &Evaluator, path: Vec<String>, thunk: &Thunk, parent_flags: u8, out: &mut Vec<Outcome>) -> u8 {
    let ctx = &ev.ctx;
    impurity_push();
    let result = force(ctx, thunk).and_then(|v| match &v {
        Value::Derivation(d) => supported_on(ev, d).map(|ok| (v.clone(), ok)),
        Value::Attrs(a) => match a.get("recurseForDerivations") {
            Some(t) => force(ctx, t).map(|r| (v.clone(), matches!(r, Value::Bool(true)))),
            None => Ok((v.clone(), false)),
        },
        _ => Ok((v.clone(), false)),
    });
    let flags = impurity_pop() | parent_flags;
    let display_name = job_display_name(&path);
    match result {
        Err(e) => out.push(Outcome::Error(display_name, e.to_string())),
        Ok((Value::Derivation(d), true)) => out.push(Outcome::Job(Job {
            attr_path: path,
            display_name,
            drv_path: d.drv_path.clone(),
            output_paths: d.outputs.clone(),
            impure: flags != 0,
        })),
        Ok((Value::Attrs(a), true)) => {
            let mut seen = flags;
            for (k, t) in a.iter().filter(|(k, _)| *k != "recurseForDerivations") {
                let mut child = path.clone();
                child.push(k.clone());
                seen |= walk(ev, child, t, flags, out);
            }
            return seen;
        }
        Ok(_) => {}
    }
    flags
}

fn supported_on(ev: &Evaluator, d: &DerivationValue) -> Result<bool, EvalError> {
    let Some(meta) = d.attrs.0.get("meta") else {
        return Ok(true);
    };
    let meta = force(&ev.ctx, meta)?;
    let Some(platforms) = ev.select(&meta, "platforms")? else {
        return Ok(true);
    };
    let Value::List(items) = platforms else {
        return Err(EvalError::msg("meta.platforms is not a list"));
    };
    for t in items.iter() {
        if force(&ev.ctx, t)?.as_str() == Some(ev.config().platform.as_str()) {
            return Ok(true);
        }
    }
    Ok(false)
}
