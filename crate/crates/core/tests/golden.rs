// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use partprobe::experiment::{run_experiment, ExperimentConfig, Overrides};
use partprobe::toy::write_toy_workspace;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn committed_fixture_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_workspace(dir.path(), 7).unwrap();
    let mut committed = tree(&fixture());
    committed.retain(|p, _| !p.starts_with("golden") && !p.starts_with("reports"));
    assert_eq!(tree(dir.path()), committed);
}

#[test]
fn reports_match_golden_files() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&fixture().join("experiment.toml")).unwrap();
    Overrides {
        out: Some(out.path().to_path_buf()),
        ..Default::default()
    }
    .apply(&mut cfg);
    run_experiment(cfg).unwrap();
    let got = tree(out.path());
    let want = tree(&fixture().join("golden"));
    assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (name, bytes) in &want {
        assert!(got[name] == *bytes, "{} differs from golden", name.display());
    }
}
