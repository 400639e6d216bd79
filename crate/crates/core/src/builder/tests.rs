use std::path::Path;

use super::*;
use crate::cache::Cache;
use crate::lang::{EvalConfig, Evaluator, Value};
use crate::store_path::sha256_hex;

const SRC_URL: &str = "http://example.org/src.txt";
const SRC_BODY: &str = "source body\n";

fn recipe(src_hash: &str) -> String {
    format!(
        r#"
let
  sh = "${{bootstrapTools}}/bin/sh";
  mk = name: script: derivation {{ inherit name; builder = sh; args = [ "-c" script ]; }};
  src = fetchFile {{ url = "{SRC_URL}"; sha256 = "{src_hash}"; }};
  hello = mk "hello" "mkdir -p $out/bin; echo hi > $out/bin/hello";
in {{
  inherit hello src;
  useSrc = mk "use-src" "cat ${{src}} > $out";
  useHello = mk "use-hello" "echo ${{hello}}/bin/hello > $out";
  leakyPast = mk "leaky-past" ''
    if [ -z "$KERNEL_VERSION" ]; then echo "MISSING-ENV:KERNEL_VERSION"; exit 1; fi
    echo "$KERNEL_VERSION" > $out
  '';
  dump = mk "dump" "env | sort > $out; echo built in $PWD";
  broken = mk "broken" "echo nope; exit 3";
  afterBroken = mk "after-broken" "echo ${{(mk "broken" "echo nope; exit 3")}} > $out";
  ncurses = derivation {{
    name = "ncurses-6.4"; builder = sh; outputs = [ "out" "dev" ];
    args = [ "-c" "mkdir -p $out/bin $dev/bin; echo lib > $out/lib; echo h > $dev/curses.h" ];
  }};
  bare = derivation {{ name = "bare"; builder = "/bin/sh"; args = [ "-c" "echo > $out" ]; greeting = "hi"; }};
}}
"#
    )
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    store: Arc<Store>,
    ev: Evaluator,
    mirror: std::path::PathBuf,
}

fn fixture_at(root: &Path) -> Fixture {
    let store = Arc::new(Store::open(root.join("store")).unwrap());
    let ev = Evaluator::new(store.clone(), EvalConfig::default()).unwrap();
    let mirror = root.join("mirror");
    fs::create_dir_all(&mirror).unwrap();
    fs::write(mirror.join(sha256_hex(SRC_URL)), SRC_BODY).unwrap();
    Fixture {
        _dir: tempfile::tempdir().unwrap(),
        root: root.to_path_buf(),
        store,
        ev,
        mirror,
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut f = fixture_at(dir.path());
    f._dir = dir;
    f
}

impl Fixture {
    fn drv(&self, attr: &str) -> StorePath {
        self.drv_with(attr, &sha256_hex(SRC_BODY))
    }

    fn drv_with(&self, attr: &str, hash: &str) -> StorePath {
        let (v, _) = self.ev.eval_source(&recipe(hash)).unwrap();
        let d = self.ev.select(&v, attr).unwrap().unwrap();
        match d {
            Value::Derivation(d) => d.drv_path.clone(),
            other => panic!("{attr}: {other:?}"),
        }
    }

    fn opts(&self) -> RealizeOptions {
        RealizeOptions {
            source_mirror: Some(self.mirror.clone()),
            log_dir: Some(self.root.join("logs")),
            ..RealizeOptions::default()
        }
    }

    fn realize(&self, attr: &str, opts: &RealizeOptions) -> BuildResult {
        let p = self.drv(attr);
        let mut r = realize(std::slice::from_ref(&p), opts, &self.store, self.store.as_ref()).unwrap();
        r.remove(&p).unwrap()
    }
}

#[test]
fn builds_registers_and_then_reuses() {
    let f = fixture();
    let r = f.realize("hello", &f.opts());
    assert_eq!(r.status, BuildStatus::Success, "{:?}", r.error);
    assert!(r.executed);
    let out = &r.output_paths["out"];
    assert!(f.store.has_path(out));
    let tree = f.store.get_tree(out).unwrap();
    assert!(matches!(tree.get("bin/hello"), Some(crate::Tree::File { contents, .. }) if contents == b"hi\n"));
    assert!(r.log_path.as_ref().unwrap().is_file());

    let again = f.realize("hello", &f.opts());
    assert_eq!(again.status, BuildStatus::Reused);
    assert!(!again.executed);
    assert_eq!(again.output_digests, r.output_digests);
}

#[test]
fn fixed_output_is_verified() {
    let f = fixture();
    let ok = f.realize("useSrc", &f.opts());
    assert_eq!(ok.status, BuildStatus::Success, "{:?}", ok.error);
    let tree = f.store.get_tree(&ok.output_paths["out"]).unwrap();
    assert_eq!(tree, crate::Tree::file(SRC_BODY));

    let bad = f.drv_with("src", &sha256_hex("something else"));
    let r = realize(std::slice::from_ref(&bad), &f.opts(), &f.store, f.store.as_ref()).unwrap();
    assert!(matches!(
        r[&bad].error,
        Some(BuildError::FixedOutputHashMismatch { .. })
    ));
}

#[test]
fn references_are_scanned_and_closed_over() {
    let f = fixture();
    let r = f.realize("useHello", &f.opts());
    assert_eq!(r.status, BuildStatus::Success, "{:?}", r.error);
    let out = &r.output_paths["out"];
    let hello_out = f.realize("hello", &f.opts()).output_paths["out"].clone();
    let info = f.store.query_info(out).unwrap().unwrap();
    assert_eq!(info.references, BTreeSet::from([hello_out.clone()]));
    assert_eq!(
        f.store.list_closure(out).unwrap(),
        BTreeSet::from([out.clone(), hello_out])
    );
}

#[test]
fn v1_only_variable_fails_under_v2() {
    let f = fixture();
    let v2 = f.realize("leakyPast", &f.opts());
    assert_eq!(v2.status, BuildStatus::Failure);
    assert!(v2.log.contains("MISSING-ENV:KERNEL_VERSION"));
    assert!(matches!(
        v2.error,
        Some(BuildError::BuildFailed { exit_code: Some(1), .. })
    ));

    let v1 = f.realize(
        "leakyPast",
        &RealizeOptions {
            sandbox: SandboxPolicy::v1(),
            ..f.opts()
        },
    );
    assert_eq!(v1.status, BuildStatus::Success);
}

#[test]
fn failures_propagate_to_dependents() {
    let f = fixture();
    let p = f.drv("afterBroken");
    let r = realize(std::slice::from_ref(&p), &f.opts(), &f.store, f.store.as_ref()).unwrap();
    assert_eq!(r[&p].status, BuildStatus::Failure);
    assert!(!r[&p].executed);
    assert!(matches!(r[&p].error, Some(BuildError::DependencyFailed { .. })));
    let broken = r.values().find(|x| x.executed).unwrap();
    assert!(broken.log.contains("nope"));
}

#[test]
fn environment_dump_is_identical_across_roots() {
    let (a, b) = (fixture(), fixture());
    assert_ne!(a.store.root(), b.store.root());
    let ra = a.realize("dump", &a.opts());
    let rb = b.realize("dump", &b.opts());
    assert_eq!(ra.status, BuildStatus::Success, "{}", ra.log);
    let ta = a.store.get_tree(&ra.output_paths["out"]).unwrap();
    let tb = b.store.get_tree(&rb.output_paths["out"]).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ra.log, rb.log);
    assert!(ra.log.contains("built in /build"));
    let crate::Tree::File { contents, .. } = ta else {
        panic!()
    };
    let dump = String::from_utf8(contents).unwrap();
    assert!(dump.contains("PWD=/build\n"), "{dump}");
    assert!(dump.contains("out=/mfpm/store/"), "{dump}");
    assert!(!dump.contains("HOME="), "{dump}");
    assert!(!dump.contains("KERNEL_VERSION"), "{dump}");
}

#[test]
fn substitution_matches_forced_rebuild() {
    let producer = fixture();
    let cache_dir = producer.root.join("cache");
    let cache = Cache::open(cache_dir.to_str().unwrap());
    let built = producer.realize("useHello", &producer.opts());
    for p in producer.store.list_closure(&built.output_paths["out"]).unwrap() {
        cache.push(&producer.store, &p).unwrap();
    }

    let consumer = fixture();
    let opts = RealizeOptions {
        substituters: vec![cache.clone()],
        ..consumer.opts()
    };
    let sub = consumer.realize("useHello", &opts);
    assert_eq!(sub.status, BuildStatus::Substituted);
    assert!(!sub.executed);

    let target = consumer.drv("useHello");
    let forced = RealizeOptions {
        force_rebuild: BTreeSet::from([target.clone()]),
        ..opts
    };
    let all = realize(
        std::slice::from_ref(&target),
        &forced,
        &consumer.store,
        consumer.store.as_ref(),
    )
    .unwrap();
    let rebuilt = &all[&target];
    assert_eq!(rebuilt.status, BuildStatus::Success);
    assert!(rebuilt.executed);
    assert_eq!(rebuilt.output_digests, sub.output_digests);
    assert_eq!(all.values().filter(|r| r.executed).count(), 1);
}

#[test]
fn parallelism_does_not_change_outcomes() {
    let attrs = ["useSrc", "useHello", "leakyPast", "dump", "broken", "ncurses"];
    let run = |n: usize| {
        let f = fixture();
        let targets: Vec<StorePath> = attrs.iter().map(|a| f.drv(a)).collect();
        let opts = RealizeOptions {
            max_parallel: n,
            ..f.opts()
        };
        let r = realize(&targets, &opts, &f.store, f.store.as_ref()).unwrap();
        r.into_iter()
            .map(|(p, r)| (p, r.status, r.output_digests))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn shell_env_exports_build_environment() {
    let f = fixture();
    let src = r#"
let
  ncurses = derivation {
    name = "ncurses-6.4"; builder = "${bootstrapTools}/bin/sh"; outputs = [ "out" "dev" ];
    args = [ "-c" "mkdir -p $out/bin $dev/bin" ];
  };
in derivation {
  name = "nano-7.2"; builder = "${bootstrapTools}/bin/sh";
  buildInputs = [ ncurses.dev ]; configureFlags = [ "--sysconfdir=/etc" ];
}"#;
    let (v, _) = f.ev.eval_source(src).unwrap();
    let nano = v.as_derivation().unwrap().drv_path.clone();
    let state = f.root.join("state");
    let rc = spawn_env(&nano, &f.opts(), &f.store, f.store.as_ref(), &state).unwrap();
    let text = fs::read_to_string(&rc).unwrap();
    assert!(text.contains("export configureFlags='--sysconfdir=/etc'\n"));
    let path_line = text.lines().find(|l| l.starts_with("export PATH=")).unwrap();
    assert!(path_line.contains("-ncurses-6.4-dev/bin"), "{path_line}");
    assert!(path_line.contains(&f.store.root().display().to_string()));
    let rc2 = spawn_env(&nano, &f.opts(), &f.store, f.store.as_ref(), &state).unwrap();
    assert_eq!(rc, rc2);
    assert_eq!(text, fs::read_to_string(&rc2).unwrap());

    let bare = f.drv("bare");
    let rc = spawn_env(&bare, &f.opts(), &f.store, f.store.as_ref(), &state).unwrap();
    let exported: Vec<_> = fs::read_to_string(rc)
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("export "))
        .map(|l| l.split('=').next().unwrap().to_string())
        .collect();
    assert_eq!(exported, ["builder", "greeting", "name"]);
}
