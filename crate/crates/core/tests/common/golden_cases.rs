use std::collections::{BTreeMap, BTreeSet};

use mfpm_core::archive::Tree;
use mfpm_core::cache::CacheEntry;
use mfpm_core::derivation::{fill_outputs, hash_modulo, Derivation, FixedOutput, HashModuloCache};
use mfpm_core::store::source_path;
use mfpm_core::StorePath;

pub const SH: &str = "/mfpm/store/aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa-sh";

pub fn minimal_drv() -> Derivation {
    let mut drv = Derivation::new("a", SH);
    let none: BTreeMap<StorePath, std::sync::Arc<Derivation>> = BTreeMap::new();
    fill_outputs(&mut drv, &none, &HashModuloCache::new()).unwrap();
    drv
}

pub fn sample_tree() -> Tree {
    Tree::dir([
        ("b", Tree::file("hello\n")),
        ("a", Tree::executable("#!/bin/sh\n")),
        ("lib", Tree::dir([("link", Tree::symlink("../b"))])),
    ])
}

/// `(file name under tests/golden, current bytes)` for every frozen format.
pub fn cases() -> Vec<(&'static str, Vec<u8>)> {
    let minimal = minimal_drv();
    let drv_path = minimal.drv_path().unwrap();

    let mut nano = Derivation::new("nano-7.2.tar.xz", SH);
    nano.fixed_output = Some(FixedOutput {
        hash_algo: "sha256".into(),
        content_digest: "86f3442768bd2873cec693f83cdf80b4b444ad3cc14760b74361474fc87a4526".into(),
    });
    let none: BTreeMap<StorePath, std::sync::Arc<Derivation>> = BTreeMap::new();
    let nano_modulo = hash_modulo(&nano, &none, &HashModuloCache::new()).unwrap();

    let empty = Tree::empty_dir();
    let empty_path = source_path("empty", &empty).unwrap();
    let sample = sample_tree();
    let sample_path = source_path("sample", &sample).unwrap();
    let entry = CacheEntry {
        store_path: sample_path.clone(),
        archive_digest: sample.archive_digest(),
        archive_size: sample.encode().len() as u64,
        compressed_size: 97,
        references: BTreeSet::from([empty_path.clone()]),
        deriver: Some(drv_path.clone()),
    };
    let line = |s: String| format!("{s}\n").into_bytes();

    vec![
        ("minimal.drv", minimal.canonical_bytes()),
        ("minimal.drvpath", line(drv_path.to_string())),
        ("minimal.out", line(minimal.output_path("out").unwrap().to_string())),
        (
            "nano-fixed.modulo",
            line(nano_modulo.iter().map(|b| format!("{b:02x}")).collect()),
        ),
        ("empty-dir.mfpmar", empty.encode()),
        ("empty-dir.path", line(empty_path.to_string())),
        ("sample-tree.mfpmar", sample.encode()),
        ("sample-tree.path", line(sample_path.to_string())),
        ("sample-tree.digest", line(sample.archive_digest())),
        ("sample.info", entry.to_info().into_bytes()),
    ]
}
