//! End-to-end acceptance run against the bundled corpus. Prints one
//! `criterion N: PASS|FAIL ...` line per criterion and exits non-zero if any
//! failed. Runs without the libtest harness so the lines are never captured.

#[path = "../../core/tests/common/golden_cases.rs"]
mod golden_cases;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use mfpm_core::ci::{BuildRecordRow, RecordStore, RowStatus};
use serde_json::Value;

const DOTTED: &str = "\"python3.9\"";
const IMPURE: [&str; 2] = ["impure-shell", "impure-version"];

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../corpus")
        .canonicalize()
        .unwrap()
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Result<Value> {
        serde_json::from_str(&self.stdout).with_context(|| format!("stdout is not JSON: {}", self.stderr))
    }
}

/// Run the binary in `cwd` with a store and state of our choosing.
fn mfpm(cwd: &Path, store: &Path, state: &Path, args: &[&str]) -> Run {
    fs::create_dir_all(cwd).unwrap();
    let out: Output = Command::new(env!("CARGO_BIN_EXE_mfpm"))
        .current_dir(cwd)
        .env_remove("MFPM_STORE_ROOT")
        .env_remove("MFPM_STATE_DIR")
        .env_remove("RUST_LOG")
        .arg("--store-root")
        .arg(store)
        .arg("--state")
        .arg(state)
        .args(args)
        .output()
        .expect("spawn mfpm");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A CI history of rev1 built under sandbox v1.
struct History {
    root: PathBuf,
    state: PathBuf,
    cache: PathBuf,
    ci_time: Duration,
}

fn ci_history(root: &Path, extra: &[&str]) -> Result<History> {
    fs::create_dir_all(root)?;
    let manifest = root.join("rev1.tsv");
    let line = fs::read_to_string(corpus().join("revisions.tsv"))?
        .lines()
        .find(|l| l.ends_with("\trev1"))
        .context("rev1 missing from corpus manifest")?
        .to_string();
    fs::write(&manifest, format!("{line}\n"))?;
    let (state, cache) = (root.join("ci/state"), root.join("cache"));
    let corpus = corpus();
    let mut args = vec![
        "ci",
        "run",
        "--revisions",
        s(&corpus),
        "--manifest",
        s(&manifest),
        "--cache",
        s(&cache),
        "--sandbox",
        "v1",
        "--max-parallel",
        "8",
        "--important",
        "hello,git",
    ];
    args.extend_from_slice(extra);
    let started = Instant::now();
    let r = mfpm(&root.join("ci"), &root.join("ci/store"), &state, &args);
    let ci_time = started.elapsed();
    ensure!(r.code == 0, "ci run exited {}: {}", r.code, r.stderr);
    Ok(History {
        root: root.to_path_buf(),
        state,
        cache,
        ci_time,
    })
}

impl History {
    /// Run an audit from a fresh working directory and store.
    fn audit(&self, tag: &str, args: &[&str]) -> Run {
        let cwd = self.root.join(format!("audit-{tag}"));
        mfpm(&cwd, &cwd.join("store"), &self.state, args)
    }

    fn build_rows(&self) -> Result<Vec<BuildRecordRow>> {
        let records = RecordStore::open(&self.state)?;
        let entry = records.find_revision("rev1")?.context("rev1 not recorded")?;
        Ok(records.load_revision(&entry.revision_id)?.1)
    }
}

fn differing(report: &Value) -> Vec<(String, bool)> {
    report["paths"]["differing"]
        .as_array()
        .map(|a| {
            a.iter()
                .map(|d| {
                    (
                        d["displayName"].as_str().unwrap_or("").to_string(),
                        d["impureFlag"] == true,
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

fn criterion_1(h: &History) -> Result<String> {
    let mut detail = Vec::new();
    for par in ["1", "8"] {
        let started = Instant::now();
        let r = h.audit(
            &format!("eval-p{par}"),
            &["audit", "eval", "--revision", "rev1", "--max-parallel", par],
        );
        let elapsed = started.elapsed() + h.ci_time;
        ensure!(
            r.code == 0,
            "audit eval (maxParallel {par}) exited {}: {}",
            r.code,
            r.stderr
        );
        let v = r.json()?;
        ensure!(v["jobSet"]["identical"] == true, "job sets differ at maxParallel {par}");
        ensure!(
            v["paths"]["matchRate"] == "1.0000",
            "matchRate {} at maxParallel {par}",
            v["paths"]["matchRate"]
        );
        ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
        detail.push(format!(
            "p{par}: {} jobs 1.0000 in {:.1}s",
            v["paths"]["totalJobs"],
            elapsed.as_secs_f64()
        ));
    }
    let r = h.audit(
        "eval-stubs",
        &[
            "audit",
            "eval",
            "--revision",
            "rev1",
            "--max-parallel",
            "8",
            "--impure-stub",
            "sysVersion=2.7",
            "--impure-stub",
            "inShell=true",
        ],
    );
    ensure!(
        r.code == 1,
        "changed stubs should fail the matchRate check, exit {}",
        r.code
    );
    let v = r.json()?;
    let diff = differing(&v);
    let names: BTreeSet<&str> = diff.iter().map(|(n, _)| n.as_str()).collect();
    ensure!(names == BTreeSet::from(IMPURE), "differing jobs {names:?}");
    ensure!(diff.iter().all(|(_, flag)| *flag), "impure flag missing: {diff:?}");
    detail.push(format!(
        "stubs changed: {} differ, both impure, matchRate {}",
        diff.len(),
        v["paths"]["matchRate"]
    ));
    Ok(detail.join("; "))
}

fn eval_lines(root: &Path, rev: &str) -> Result<BTreeMap<String, (String, String)>> {
    let file = corpus().join(rev).join("default.rcp");
    let r = mfpm(root, &root.join("store"), &root.join("state"), &["eval", s(&file)]);
    ensure!(r.code == 0, "eval {rev} exited {}: {}", r.code, r.stderr);
    r.stdout
        .lines()
        .map(|l| match l.split(' ').collect::<Vec<_>>()[..] {
            [name, drv, out] => Ok((name.to_string(), (drv.to_string(), out.to_string()))),
            _ => bail!("bad eval line `{l}`"),
        })
        .collect()
}

fn all_outputs(root: &Path, drv: &str) -> Result<Value> {
    let r = mfpm(root, &root.join("store"), &root.join("state"), &["show-drv", drv]);
    ensure!(r.code == 0, "show-drv {drv}: {}", r.stderr);
    Ok(r.json()?["outputs"].clone())
}

fn criterion_2(root: &Path) -> Result<String> {
    let rev1 = eval_lines(root, "rev1")?;
    let rev2 = eval_lines(root, "rev2")?;
    ensure!(rev1.keys().eq(rev2.keys()), "job sets of rev1 and rev2 differ");
    let fetchers: Vec<&String> = rev1.keys().filter(|k| k.starts_with("sources.")).collect();
    ensure!(!fetchers.is_empty(), "no fetcher jobs");
    for f in &fetchers {
        ensure!(rev1[*f].0 != rev2[*f].0, "{f}: fetcher drvPath unchanged");
    }
    let mut changed_drvs = 0;
    for (name, (drv1, _)) in &rev1 {
        let drv2 = &rev2[name].0;
        changed_drvs += usize::from(drv1 != drv2);
        let (o1, o2) = (all_outputs(root, drv1)?, all_outputs(root, drv2)?);
        let paths = |o: &Value| -> BTreeMap<String, Value> {
            o.as_object()
                .unwrap()
                .iter()
                .map(|(k, v)| (k.clone(), v["path"].clone()))
                .collect()
        };
        ensure!(paths(&o1) == paths(&o2), "{name}: output paths changed");
    }
    Ok(format!(
        "{} fetcher drvPaths changed ({changed_drvs} drvPaths in all), 0 of {} jobs changed any output path",
        fetchers.len(),
        rev1.len()
    ))
}

fn rebuild(h: &History, par: &str) -> Result<(Value, Duration)> {
    let cache = s(&h.cache);
    let started = Instant::now();
    let r = h.audit(
        &format!("rebuild-p{par}"),
        &[
            "audit",
            "rebuild",
            "--revision",
            "rev1",
            "--cache",
            cache,
            "--sandbox",
            "v2",
            "--retries",
            "3",
            "--max-parallel",
            par,
            "--min-success-rate",
            "0",
        ],
    );
    let elapsed = started.elapsed();
    ensure!(r.code == 0, "audit rebuild exited {}: {}", r.code, r.stderr);
    Ok((r.json()?["rebuild"].clone(), elapsed))
}

fn criterion_3(h: &History, report: &Value, elapsed: Duration) -> Result<String> {
    let rows = h.build_rows()?;
    let historical: BTreeSet<&str> = rows
        .iter()
        .filter(|r| r.status != RowStatus::Failure)
        .map(|r| r.display_name.as_str())
        .collect();
    let n = report["attempted"].as_u64().context("attempted")? as usize;
    ensure!(
        n == historical.len(),
        "attempted {n}, history has {} successful jobs",
        historical.len()
    );
    ensure!(report["succeeded"] == n - 3, "succeeded {}", report["succeeded"]);
    let expected = format!("{:.4}", (n - 3) as f64 / n as f64);
    ensure!(
        report["successRate"] == expected.as_str(),
        "successRate {} != {expected}",
        report["successRate"]
    );
    let counts = &report["classCounts"];
    for (class, want) in [
        ("current-sandbox-leakage", 1),
        ("past-sandbox-leakage", 1),
        ("flaky-test", 1),
        ("unknown", 0),
    ] {
        ensure!(counts[class] == want, "{class}: {}", counts[class]);
    }
    ensure!(elapsed + h.ci_time < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "successRate {expected} = ({n}-3)/{n}, classes current 1 / past 1 / flaky 1 / unknown 0, {:.1}s",
        (elapsed + h.ci_time).as_secs_f64()
    ))
}

fn export(root: &Path, store: &Path, path: &str) -> Result<Vec<u8>> {
    let file = root.join("export.arc");
    let r = mfpm(
        root,
        store,
        &root.join("state"),
        &["archive", "export", path, "-o", s(&file)],
    );
    ensure!(r.code == 0, "export {path}: {}", r.stderr);
    Ok(fs::read(file)?)
}

fn criterion_4(h: &History, report: &Value) -> Result<String> {
    ensure!(
        report["digestMismatches"].as_array().is_some_and(Vec::is_empty),
        "mismatches: {}",
        report["digestMismatches"]
    );
    ensure!(
        report["digestMatches"] == report["succeeded"],
        "only {} digests compared",
        report["digestMatches"]
    );

    let root = h.root.join("substitution");
    let rcp = corpus().join("rev1/default.rcp");
    let jobs = ["hello", "openssl", "curl", "\"python3.9\""];
    let (sub_store, forced_store) = (root.join("substituted"), root.join("forced"));
    let mut args = vec!["build", s(&rcp)];
    args.extend(jobs);
    args.extend(["--substituter", s(&h.cache)]);
    let sub = mfpm(&root, &sub_store, &root.join("state"), &args);
    ensure!(sub.code == 0, "substituting build: {}", sub.stderr);
    let mut args = vec!["build", s(&rcp)];
    args.extend(jobs);
    for j in jobs {
        args.extend(["--force-rebuild", j]);
    }
    args.extend(["--substituter", s(&h.cache)]);
    let forced = mfpm(&root, &forced_store, &root.join("state"), &args);
    ensure!(forced.code == 0, "forced build: {}", forced.stderr);
    let mut compared = 0;
    for (a, b) in sub.stdout.lines().zip(forced.stdout.lines()) {
        let (a, b): (Vec<_>, Vec<_>) = (a.split(' ').collect(), b.split(' ').collect());
        ensure!(
            a[1] == "substituted" && b[1] == "success",
            "statuses {} / {}",
            a[1],
            b[1]
        );
        for (pa, pb) in a[2..].iter().zip(&b[2..]) {
            ensure!(pa == pb, "paths differ");
            let path = pa.split_once('=').unwrap().1;
            ensure!(
                export(&root, &sub_store, path)? == export(&root, &forced_store, path)?,
                "{path} differs"
            );
            compared += 1;
        }
    }
    Ok(format!(
        "{} rebuilt jobs match the cache digest, 0 mismatches; {compared} outputs byte-identical substituted vs forced",
        report["digestMatches"]
    ))
}

fn criterion_5(h: &History, root: &Path) -> Result<String> {
    let rows = h.build_rows()?;
    ensure!(
        rows.iter().any(|r| r.display_name == DOTTED),
        "dotted job missing from history"
    );
    let plain = h.audit("dot-plain", &["audit", "eval", "--revision", "rev1"]).json()?;
    ensure!(plain["jobSet"]["identical"] == true, "identical=false without the bug");
    ensure!(
        plain["paths"]["totalJobs"].as_u64() == Some(eval_lines(root, "rev1")?.len() as u64),
        "dotted job not compared"
    );

    let buggy = ci_history(&root.join("buggy"), &["--simulate-dot-bug"])?;
    let rows = buggy.build_rows()?;
    ensure!(
        !rows.iter().any(|r| r.display_name == DOTTED),
        "buggy history still has the dotted job"
    );
    let without = buggy.audit("dot-without", &["audit", "eval", "--revision", "rev1"]);
    let v = without.json()?;
    ensure!(
        without.code == 1 && v["jobSet"]["identical"] == false,
        "buggy history not detected"
    );
    ensure!(
        v["jobSet"]["extraLocally"] == serde_json::json!([DOTTED]),
        "extra: {}",
        v["jobSet"]["extraLocally"]
    );
    let with = buggy.audit("dot-with", &["audit", "eval", "--revision", "rev1", "--hydra-dot-bug"]);
    let v = with.json()?;
    ensure!(
        with.code == 0 && v["jobSet"]["identical"] == true,
        "flag did not restore identity"
    );
    ensure!(
        v["jobSet"]["knownBugExclusions"] == serde_json::json!([DOTTED]),
        "exclusions"
    );
    Ok(format!(
        "{DOTTED} on both sides without flag; buggy history identical=false, with --hydra-dot-bug identical=true"
    ))
}

fn criterion_6(root: &Path) -> Result<String> {
    fs::create_dir_all(root)?;
    let manifest = root.join("sample.tsv");
    let mut rng: u64 = 0x2545_f491_4f6c_dd1d;
    let mut t: i64 = 1_262_304_000;
    let mut rows = Vec::new();
    for i in 0..2200 {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let jitter = (rng >> 33) as i64 % 7200 - 3600;
        t += 23 * 3600 + jitter;
        rows.push((format!("r{i:04}"), t));
    }
    let text: String = rows.iter().rev().map(|(n, t)| format!("{t}\t{n}\n")).collect();
    fs::write(&manifest, text)?;
    let r = mfpm(
        root,
        &root.join("store"),
        &root.join("state"),
        &["audit", "sample", "--manifest", s(&manifest), "-k", "200"],
    );
    ensure!(r.code == 0, "sample exited {}: {}", r.code, r.stderr);
    let plan = r.json()?;
    let by_name: BTreeMap<&str, i64> = rows.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let chosen: Vec<&str> = plan["chosen"]
        .as_array()
        .context("chosen")?
        .iter()
        .filter_map(Value::as_str)
        .collect();
    ensure!(chosen.len() == 200, "chose {}", chosen.len());
    ensure!(chosen.iter().collect::<BTreeSet<_>>().len() == 200, "duplicates");
    let mut ts: Vec<i64> = chosen.iter().map(|n| by_name[n]).collect();
    ts.sort();
    let (tmin, tmax) = (rows[0].1, rows[2199].1);
    ensure!(ts[0] == tmin && ts[199] == tmax, "endpoints missing");
    let ideal = (tmax - tmin) as f64 / 199.0;
    let gaps: Vec<i64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<i64>() as f64 / gaps.len() as f64;
    ensure!((mean - ideal).abs() <= 0.05 * ideal, "mean {mean} vs ideal {ideal}");
    let worst = ts
        .iter()
        .enumerate()
        .map(|(i, t)| (*t as f64 - (tmin as f64 + i as f64 * ideal)).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 26.0 * 3600.0, "a choice is {worst}s off its target");
    let (gmin, gmax) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
    Ok(format!(
        "200 chosen incl. endpoints, mean spacing {:.2}h vs ideal {:.2}h, gaps {:.0}h..{:.0}h",
        mean / 3600.0,
        ideal / 3600.0,
        *gmin as f64 / 3600.0,
        *gmax as f64 / 3600.0
    ))
}

fn criterion_7() -> Result<String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let cases = golden_cases::cases();
    for (name, bytes) in &cases {
        let frozen = fs::read(dir.join(name)).with_context(|| format!("golden {name}"))?;
        ensure!(&frozen == bytes, "{name} changed");
    }
    Ok(format!(
        "{} goldens (drv bytes, paths, archives, .info) unchanged",
        cases.len()
    ))
}

const DUMP_RECIPE: &str = r#"
let
  sh = "${bootstrapTools}/bin/sh";
  mk = name: script: derivation { inherit name; builder = sh; args = [ "-c" script ]; };
  tool = mk "tool" "mkdir -p $out/bin; echo 'echo tool' > $out/bin/tool";
in {
  dump = derivation {
    name = "env-dump"; builder = sh; flavour = "plain";
    args = [ "-c" "echo ${tool} > /dev/null; { env | sort; echo cwd=$PWD; ls -a; } > $out" ];
  };
}
"#;

fn criterion_8(root: &Path) -> Result<String> {
    let mut dumps = Vec::new();
    for (host, sandbox) in [("host-a", "v1"), ("host-b", "v1"), ("host-c", "v2"), ("host-d", "v2")] {
        let cwd = root.join(host).join("work");
        fs::create_dir_all(&cwd)?;
        fs::write(cwd.join("dump.rcp"), DUMP_RECIPE)?;
        let store = root.join(host).join("physical-store");
        let r = mfpm(
            &cwd,
            &store,
            &root.join(host).join("state"),
            &["build", "dump.rcp", "dump", "--sandbox", sandbox],
        );
        ensure!(r.code == 0, "{host}: {}", r.stderr);
        let out = r
            .stdout
            .split_whitespace()
            .find_map(|w| w.strip_prefix("out="))
            .context("no out path")?;
        let base = out.strip_prefix("/mfpm/store/").context("logical path")?;
        let dump = fs::read(store.join(base))?;
        let text = String::from_utf8_lossy(&dump);
        ensure!(!text.contains(host), "{host}: physical location leaked into the dump");
        ensure!(
            text.contains("flavour=plain") && text.contains("PATH=/mfpm/store/"),
            "{host}: {text}"
        );
        dumps.push((sandbox, out.to_string(), dump));
    }
    ensure!(dumps[0] == dumps[1], "v1 dumps differ across store roots");
    ensure!(dumps[2] == dumps[3], "v2 dumps differ across store roots");
    ensure!(dumps[0].2 != dumps[2].2, "v1 and v2 dumps should differ by host info");
    Ok(format!(
        "byte-identical dumps across 2 store roots for v1 ({} B) and v2 ({} B)",
        dumps[0].2.len(),
        dumps[2].2.len()
    ))
}

fn criterion_9(root: &Path, p1: &Value, p8: &Value) -> Result<String> {
    ensure!(p1 == p8, "rebuild reports differ between maxParallel 1 and 8");
    let records = Arc::new(RecordStore::open(&root.join("stress"))?);
    let writers: Vec<_> = (0..8)
        .map(|w| {
            let records = records.clone();
            thread::spawn(move || {
                for i in 0..100 {
                    records
                        .append_row(&mfpm_core::ci::Row::Build(BuildRecordRow {
                            revision_id: "stress".into(),
                            display_name: format!("w{w}-{i}"),
                            status: RowStatus::Success,
                            output_paths: BTreeMap::new(),
                            log_ref: None,
                        }))
                        .unwrap();
                }
            })
        })
        .collect();
    for w in writers {
        w.join().map_err(|_| anyhow::anyhow!("writer panicked"))?;
    }
    let (_, rows) = records.load_revision("stress")?;
    let unique: BTreeSet<&str> = rows.iter().map(|r| r.display_name.as_str()).collect();
    ensure!(
        rows.len() == 800 && unique.len() == 800,
        "{} rows, {} unique",
        rows.len(),
        unique.len()
    );
    Ok("criteria 1 and 3 at maxParallel 8; rebuild report identical at 1 and 8; 8x100 appends -> 800 rows".into())
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let history = ci_history(&root.join("history"), &[]);
    let rebuilds = history.as_ref().ok().map(|h| (rebuild(h, "8"), rebuild(h, "1")));

    let mut results: Vec<Result<String>> = Vec::new();
    let need = || -> Result<&History> { history.as_ref().map_err(|e| anyhow::anyhow!("ci run failed: {e:#}")) };
    let p8 = || -> Result<&(Value, Duration)> {
        match &rebuilds {
            Some((Ok(r), _)) => Ok(r),
            Some((Err(e), _)) => bail!("rebuild failed: {e:#}"),
            None => bail!("no CI history"),
        }
    };
    results.push(need().and_then(criterion_1));
    results.push(criterion_2(&root.join("insulation")));
    results.push(need().and_then(|h| p8().and_then(|(r, t)| criterion_3(h, r, *t))));
    results.push(need().and_then(|h| p8().and_then(|(r, _)| criterion_4(h, r))));
    results.push(need().and_then(|h| criterion_5(h, &root.join("dots"))));
    results.push(criterion_6(&root.join("sampler")));
    results.push(criterion_7());
    results.push(criterion_8(&root.join("hermetic")));
    let earlier_ok = results[0].is_ok() && results[2].is_ok();
    results.push(need().and_then(|_| {
        ensure!(earlier_ok, "criteria 1 or 3 failed at maxParallel 8");
        let p1 = match &rebuilds {
            Some((_, Ok((r, _)))) => r,
            _ => bail!("rebuild at maxParallel 1 failed"),
        };
        criterion_9(root, p1, &p8()?.0)
    }));

    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {}: PASS {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL {e:#}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
