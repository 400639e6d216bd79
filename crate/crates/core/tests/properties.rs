use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use mfpm_core::archive::Tree;
use mfpm_core::derivation::{
    compute_output_path, fill_outputs, hash_modulo, Derivation, DrvError, FixedOutput, HashModuloCache,
};
use mfpm_core::{Store, StorePath};
use proptest::prelude::*;

const SH: &str = "/mfpm/store/aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa-sh";

#[derive(Debug, Clone)]
struct Node {
    fixed: Option<String>,
    deps: Vec<usize>,
    outputs: Vec<String>,
    builder: String,
    args: Vec<String>,
    env: Vec<(String, String)>,
}

fn arb_dag() -> impl Strategy<Value = Vec<Node>> {
    (1usize..=6).prop_flat_map(|n| {
        let nodes: Vec<_> = (0..n)
            .map(|i| {
                (
                    any::<bool>(),
                    "[0-9a-f]{8}",
                    proptest::collection::vec(any::<bool>(), i),
                    any::<bool>(),
                    prop::sample::select(vec!["sh", "bash"]),
                    proptest::collection::vec("[a-z;,]{0,4}", 0..3),
                    proptest::collection::btree_map("[a-z]{1,3}", "[a-z=:()]{0,4}", 0..4),
                )
                    .prop_map(move |(fixed, digest, edges, dev, builder, args, env)| {
                        let fixed = (fixed && i < n.saturating_sub(1)).then_some(digest);
                        let deps = if fixed.is_some() {
                            vec![]
                        } else {
                            edges.iter().enumerate().filter(|(_, e)| **e).map(|(j, _)| j).collect()
                        };
                        let mut outputs = vec!["out".to_string()];
                        if dev && fixed.is_none() {
                            outputs.push("dev".into());
                        }
                        Node {
                            fixed,
                            deps,
                            outputs,
                            builder: format!("{SH}/bin/{builder}"),
                            args,
                            env: env.into_iter().collect(),
                        }
                    })
            })
            .collect();
        nodes
    })
}

struct Built {
    drv_paths: Vec<StorePath>,
    outputs: Vec<BTreeMap<String, StorePath>>,
}

/// Instantiate the DAG in index order. `reverse_env` inserts environment
/// entries back to front; `cold` computes every output path with a fresh memo.
fn build(dag: &[Node], reverse_env: bool, cold: bool) -> Built {
    let mut lookup: BTreeMap<StorePath, Arc<Derivation>> = BTreeMap::new();
    let shared = HashModuloCache::new();
    let mut built = Built {
        drv_paths: vec![],
        outputs: vec![],
    };
    for (i, node) in dag.iter().enumerate() {
        let mut drv = Derivation::new(format!("n{i}"), node.builder.clone());
        drv.args = node.args.clone();
        let mut env = node.env.clone();
        if reverse_env {
            env.reverse();
        }
        for (k, v) in env {
            drv.env.insert(k, v);
        }
        for o in &node.outputs {
            drv.outputs.insert(o.clone(), None);
        }
        drv.fixed_output = node.fixed.as_ref().map(|d| FixedOutput {
            hash_algo: "sha256".into(),
            content_digest: d.clone(),
        });
        for &j in &node.deps {
            drv.input_drvs
                .insert(built.drv_paths[j].clone(), dag[j].outputs.iter().cloned().collect());
        }
        let fresh = HashModuloCache::new();
        fill_outputs(&mut drv, &lookup, if cold { &fresh } else { &shared }).unwrap();
        let path = drv.drv_path().unwrap();
        built.outputs.push(drv.output_paths().unwrap());
        built.drv_paths.push(path.clone());
        lookup.insert(path, Arc::new(drv));
    }
    built
}

fn all_outputs(b: &Built) -> Vec<&BTreeMap<String, StorePath>> {
    b.outputs.iter().collect()
}

proptest! {
    #[test]
    fn derivation_hashing_is_a_pure_function(dag in arb_dag()) {
        let a = build(&dag, false, false);
        let b = build(&dag, true, true);
        prop_assert_eq!(&a.drv_paths, &b.drv_paths);
        prop_assert_eq!(all_outputs(&a), all_outputs(&b));
    }

    #[test]
    fn fixed_output_inputs_insulate_downstream_paths(
        dag in arb_dag(),
        pick in any::<prop::sample::Index>(),
        field in 0usize..3,
    ) {
        let fixed: Vec<usize> = dag.iter().enumerate().filter(|(_, n)| n.fixed.is_some()).map(|(i, _)| i).collect();
        prop_assume!(!fixed.is_empty());
        let victim = fixed[pick.index(fixed.len())];
        let mut mutated = dag.clone();
        let node = &mut mutated[victim];
        match field {
            0 => node.builder.push_str("-v2"),
            1 => node.args.push("--mirror".into()),
            _ => node.env.push(("fetcherVersion".into(), "7.55.1".into())),
        }
        let before = build(&dag, false, false);
        let after = build(&mutated, false, false);
        prop_assert_ne!(&before.drv_paths[victim], &after.drv_paths[victim]);
        prop_assert_eq!(all_outputs(&before), all_outputs(&after));
    }

    #[test]
    fn non_fixed_changes_reach_output_paths(
        dag in arb_dag(),
        pick in any::<prop::sample::Index>(),
        field in 0usize..4,
    ) {
        let plain: Vec<usize> = dag.iter().enumerate().filter(|(_, n)| n.fixed.is_none()).map(|(i, _)| i).collect();
        let victim = plain[pick.index(plain.len())];
        let mut mutated = dag.clone();
        let node = &mut mutated[victim];
        match field {
            0 => node.builder.push_str("-v2"),
            1 => node.args.push("-x".into()),
            2 => node.env.push(("zzzExtra".into(), "1".into())),
            _ => match node.env.first_mut() {
                Some((_, v)) => v.push('!'),
                None => node.env.push(("patched".into(), "yes".into())),
            },
        }
        let before = build(&dag, false, false);
        let after = build(&mutated, false, false);
        for (o, p) in &before.outputs[victim] {
            prop_assert_ne!(p, &after.outputs[victim][o]);
        }
        for (i, node) in dag.iter().enumerate() {
            if node.deps.contains(&victim) {
                prop_assert_ne!(&before.outputs[i], &after.outputs[i]);
            }
        }
    }
}

#[test]
fn cycles_are_detected() {
    let a_path: StorePath = "/mfpm/store/aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa-a.drv".parse().unwrap();
    let b_path: StorePath = "/mfpm/store/bbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbb-b.drv".parse().unwrap();
    let mut a = Derivation::new("a", SH);
    a.input_drvs.insert(b_path.clone(), BTreeSet::from(["out".to_string()]));
    let mut b = Derivation::new("b", SH);
    b.input_drvs.insert(a_path.clone(), BTreeSet::from(["out".to_string()]));
    let lookup = BTreeMap::from([(a_path, Arc::new(a.clone())), (b_path, Arc::new(b))]);
    let err = hash_modulo(&a, &lookup, &HashModuloCache::new()).unwrap_err();
    assert!(matches!(err, DrvError::CycleDetected(_)), "{err}");
    let err = compute_output_path(&a, "out", &lookup, &HashModuloCache::new()).unwrap_err();
    assert!(matches!(err, DrvError::CycleDetected(_)), "{err}");
}

fn arb_tree() -> impl Strategy<Value = Tree> {
    let leaf = prop_oneof![
        ("[a-z]{0,3}", any::<bool>()).prop_map(|(s, x)| if x { Tree::executable(s) } else { Tree::file(s) }),
        "[a-z./]{1,4}".prop_map(Tree::symlink),
    ];
    let tree = leaf.prop_recursive(3, 12, 3, |inner| {
        proptest::collection::btree_map("[a-c]{1,2}", inner, 0..3).prop_map(Tree::dir)
    });
    proptest::collection::btree_map("[a-c]{1,2}", tree, 0..3).prop_map(Tree::dir)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn store_paths_address_tree_content(a in arb_tree(), b in arb_tree()) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("store")).unwrap();
        let pa = store.add_tree("t", &a).unwrap();
        let pb = store.add_tree("t", &b).unwrap();
        prop_assert_eq!(a == b, pa == pb);
        prop_assert_eq!(store.add_tree("t", &a.clone()).unwrap(), pa.clone());
        prop_assert_eq!(store.get_tree(&pa).unwrap(), a);
    }

    #[test]
    fn archives_ignore_mtimes(t in arb_tree()) {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = (dir.path().join("x"), dir.path().join("y"));
        t.write_to(&x).unwrap();
        t.write_to(&y).unwrap();
        let old = std::time::SystemTime::UNIX_EPOCH + std::time::Duration::from_secs(1_000_000);
        std::fs::File::open(&y).unwrap().set_modified(old).unwrap();
        let store = Store::open(dir.path().join("store")).unwrap();
        prop_assert_eq!(store.add_path("t", &x).unwrap(), store.add_path("t", &y).unwrap());
    }
}
