use std::collections::{BTreeMap, HashMap};

use crate::derivation::{DrvError, DrvLookup};
use crate::store_path::StorePath;

/// Group the dependency closure of `targets` into waves: every derivation's
/// inputs are in earlier waves. Each wave is sorted by derivation path.
pub fn build_plan(targets: &[StorePath], lookup: &dyn DrvLookup) -> Result<Vec<Vec<StorePath>>, DrvError> {
    waves(targets, lookup, &|_| true)
}

/// Like [`build_plan`], restricted to derivations accepted by `include`;
/// edges into excluded derivations are ignored.
pub(crate) fn waves(
    targets: &[StorePath],
    lookup: &dyn DrvLookup,
    include: &dyn Fn(&StorePath) -> bool,
) -> Result<Vec<Vec<StorePath>>, DrvError> {
    let mut depth: HashMap<StorePath, Option<usize>> = HashMap::new();
    for t in targets {
        if include(t) {
            visit(t, lookup, include, &mut depth)?;
        }
    }
    let mut by_depth: BTreeMap<usize, Vec<StorePath>> = BTreeMap::new();
    for (p, d) in depth {
        by_depth.entry(d.expect("all visits finished")).or_default().push(p);
    }
    Ok(by_depth
        .into_values()
        .map(|mut w| {
            w.sort();
            w
        })
        .collect())
}

fn visit(
    path: &StorePath,
    lookup: &dyn DrvLookup,
    include: &dyn Fn(&StorePath) -> bool,
    depth: &mut HashMap<StorePath, Option<usize>>,
) -> Result<usize, DrvError> {
    match depth.get(path) {
        Some(Some(d)) => return Ok(*d),
        Some(None) => return Err(DrvError::CycleDetected(path.clone())),
        None => {}
    }
    depth.insert(path.clone(), None);
    let drv = lookup
        .lookup_drv(path)
        .ok_or_else(|| DrvError::MissingInput(path.clone()))?;
    let mut d = 0;
    for input in drv.input_drvs.keys().filter(|p| include(p)) {
        d = d.max(visit(input, lookup, include, depth)? + 1);
    }
    depth.insert(path.clone(), Some(d));
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derivation::Derivation;
    use std::sync::Arc;

    fn sp(n: &str) -> StorePath {
        format!(
            "/mfpm/store/{}-{n}.drv",
            n.repeat(32).chars().take(32).collect::<String>()
        )
        .parse()
        .unwrap()
    }

    fn graph(edges: &[(&str, &[&str])]) -> BTreeMap<StorePath, Arc<Derivation>> {
        edges
            .iter()
            .map(|(n, deps)| {
                let mut d = Derivation::new(*n, "/bin/sh");
                for dep in *deps {
                    d.input_drvs.entry(sp(dep)).or_default().insert("out".into());
                }
                (sp(n), Arc::new(d))
            })
            .collect()
    }

    #[test]
    fn single_node() {
        let g = graph(&[("a", &[])]);
        assert_eq!(build_plan(&[sp("a")], &g).unwrap(), vec![vec![sp("a")]]);
    }

    #[test]
    fn chain_builds_dependency_first() {
        let g = graph(&[("n", &["c"]), ("c", &[])]);
        assert_eq!(build_plan(&[sp("n")], &g).unwrap(), vec![vec![sp("c")], vec![sp("n")]]);
    }

    #[test]
    fn diamond() {
        let g = graph(&[("a", &["b", "c"]), ("b", &["d"]), ("c", &["d"]), ("d", &[])]);
        assert_eq!(
            build_plan(&[sp("a")], &g).unwrap(),
            vec![vec![sp("d")], vec![sp("b"), sp("c")], vec![sp("a")]]
        );
    }

    #[test]
    fn cycles_are_reported() {
        let g = graph(&[("a", &["b"]), ("b", &["a"])]);
        assert!(matches!(build_plan(&[sp("a")], &g), Err(DrvError::CycleDetected(_))));
    }

    #[test]
    fn excluded_nodes_cut_edges() {
        let g = graph(&[("a", &["b"]), ("b", &["c"]), ("c", &[])]);
        let w = waves(&[sp("a")], &g, &|p| *p != sp("b")).unwrap();
        assert_eq!(w, vec![vec![sp("a")]]);
    }
}
