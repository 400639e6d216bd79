//! Frozen byte formats. Regenerate with `MFPM_BLESS=1 cargo test --test golden`
//! only for a deliberate format break.

#[path = "common/golden_cases.rs"]
mod golden_cases;

use std::fs;
use std::path::PathBuf;

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn formats_match_goldens() {
    let bless = std::env::var_os("MFPM_BLESS").is_some();
    let mut broken = Vec::new();
    for (name, bytes) in golden_cases::cases() {
        let path = golden_dir().join(name);
        if bless {
            fs::write(&path, &bytes).unwrap();
            continue;
        }
        let frozen = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        if frozen != bytes {
            broken.push(name);
        }
    }
    assert!(broken.is_empty(), "format changed: {broken:?}");
}

#[test]
fn minimal_derivation_parses_back() {
    let bytes = fs::read(golden_dir().join("minimal.drv")).unwrap();
    let drv = mfpm_core::derivation::Derivation::parse(&bytes).unwrap();
    assert_eq!(drv, golden_cases::minimal_drv());
}

#[test]
fn archives_decode_back() {
    let bytes = fs::read(golden_dir().join("sample-tree.mfpmar")).unwrap();
    assert_eq!(
        mfpm_core::archive::Tree::decode(&bytes).unwrap(),
        golden_cases::sample_tree()
    );
}
