use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};
use wemoe_cli::run_cli;
use wemoe_core::checkpoint::read_manifest;

const TINY: &str = "\
# two small tasks on a two-block model
tasks=stripe-orientation,glyph-template
classes=3
n_train=24
n_test=12
generic_train=48
image_size=16
patch_size=8
d_model=16
n_heads=2
n_blocks=2
mlp_hidden=32
pretrain_epochs=1
finetune_epochs=1
probe_epochs=1
steps=3
batch=4
grid=3
landscape_samples=8
";

fn wemoe(dir: &Path, args: &[&str]) -> i32 {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    let out = dir.join("out");
    let mut argv = vec!["wemoe".to_string(), "--config".into(), cfg.display().to_string(), "--out".into(), out.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_cli(argv)
}

const PIPELINE: &[&[&str]] = &[
    &["pretrain"],
    &["finetune"],
    &["taskvec"],
    &["merge", "--strategy", "mlp-only"],
    &["tta"],
    &["eval"],
    &["analyze"],
    &["landscape", "--pair", "0,1"],
];

fn hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn no_arguments_is_a_usage_error() {
    let status = Command::new(env!("CARGO_BIN_EXE_wemoe")).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));
    assert_eq!(run_cli(["wemoe", "--help"]), 0);
    assert_eq!(run_cli(["wemoe", "frobnicate"]), 1);
}

#[test]
fn exit_codes_for_bad_config_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "colour=red\n").unwrap();
    assert_eq!(run_cli(["wemoe", "--config", bad.to_str().unwrap(), "pretrain"]), 1);
    assert_eq!(wemoe(dir.path(), &["merge", "--strategy", "sideways"]), 2, "inputs are checked before the strategy");
    assert_eq!(wemoe(dir.path(), &["finetune"]), 2);
    assert_eq!(wemoe(dir.path(), &["--precision", "f16", "pretrain"]), 1);
    assert_eq!(wemoe(dir.path(), &["eval", "--methods", "magic"]), 1);
    assert_eq!(wemoe(dir.path(), &["landscape", "--pair", "0,0"]), 1);
}

#[test]
fn pipeline_outputs_are_pinned_and_reruns_are_no_ops() {
    let dir = tempfile::tempdir().unwrap();
    for args in PIPELINE {
        assert_eq!(wemoe(dir.path(), args), 0, "{args:?}");
    }
    let out = dir.path().join("out");
    let first = hashes(&out);
    for f in [
        "analyze/drift.csv",
        "analyze/firstchoice.csv",
        "analyze/magnitudes.csv",
        "analyze/routing.csv",
        "eval/standard.csv",
        "eval/standard.md",
        "landscape/landscape.csv",
        "tta/trace.csv",
        "finetune/summary.csv",
    ] {
        assert!(first.contains_key(f), "missing {f}");
    }
    let mtimes: Vec<_> = first.keys().map(|k| fs::metadata(out.join(k)).unwrap().modified().unwrap()).collect();
    for args in PIPELINE {
        assert_eq!(wemoe(dir.path(), args), 0, "{args:?}");
    }
    assert_eq!(hashes(&out), first);
    let again: Vec<_> = first.keys().map(|k| fs::metadata(out.join(k)).unwrap().modified().unwrap()).collect();
    assert_eq!(mtimes, again, "a completed stage rewrote its outputs");

    // A second directory reproduces every byte.
    let other = tempfile::tempdir().unwrap();
    for args in PIPELINE {
        assert_eq!(wemoe(other.path(), args), 0);
    }
    assert_eq!(hashes(&other.path().join("out")), first);

    for (file, pinned) in PINNED {
        assert_eq!(first[*file], *pinned, "{file}");
    }
}

/// Output hashes of the tiny pipeline on x86-64.
const PINNED: &[(&str, &str)] = &[
    ("pretrain/theta0.wemc", "ad7162425bc2a7130b1bbf5d2f93db49767575dd9d536bc1977953daf8ae27ef"),
    ("finetune/expert-1.wemc", "44be659fdd89f15ae611d3f5aadd8375aa72a404d2a71eebec58959d146c9b76"),
    ("merge/merged.wemc", "2de774123e7d05b838ae32ebe71e6aac3d78a2a44d4f13bbb06244cc7e1adeaa"),
    ("tta/trace.csv", "9f140461df2fe13eb5daaa249835bc14aad23e5b5c5a62fe1855146df577574b"),
    ("eval/standard.csv", "787c976058c2fe6833567947bd610406ebfa70e360054834b0490ab6791d0172"),
    ("analyze/firstchoice.csv", "dba1e84af1abdc946933ad6bba8d27ddd15de27987731059a57bb621955f874f"),
    ("landscape/landscape.csv", "eb6afeb2355484f9b2019b7efb96439b89c4cf3a2d617230ca2acde5a754790d"),
];

#[test]
fn changed_settings_rerun_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    for args in &PIPELINE[..4] {
        assert_eq!(wemoe(dir.path(), args), 0);
    }
    let out = dir.path().join("out");
    let theta0 = fs::read(out.join("pretrain/theta0.wemc")).unwrap();
    let merged = fs::read(out.join("merge/merged.wemc")).unwrap();
    assert_eq!(wemoe(dir.path(), &["merge", "--strategy", "mlp-only", "--lambda", "0.5"]), 0);
    assert_eq!(fs::read(out.join("pretrain/theta0.wemc")).unwrap(), theta0);
    assert_ne!(fs::read(out.join("merge/merged.wemc")).unwrap(), merged);
    let mf = read_manifest(&out.join("merge/merged.wemc")).unwrap();
    assert_eq!(mf.get("lambda_init"), Some("0.5"));
}

#[test]
fn e_wemoe_90_merge_manifest() {
    let dir = tempfile::tempdir().unwrap();
    for args in &PIPELINE[..3] {
        assert_eq!(wemoe(dir.path(), args), 0);
    }
    assert_eq!(wemoe(dir.path(), &["merge", "--strategy", "mlp-only", "--rho", "0.9", "--shared-router"]), 0);
    let mf = read_manifest(&dir.path().join("out/merge/merged.wemc")).unwrap();
    assert_eq!(mf.get("kind"), Some("merged"));
    assert_eq!(mf.get("strategy"), Some("mlp-only"));
    assert_eq!(mf.get("rho"), Some("0.9"));
    assert_eq!(mf.get("shared_router"), Some("true"));
    assert_eq!(mf.get("n_routers"), Some("1"));
    assert_eq!(mf.get("method"), Some("e-wemoe-90%"));

    assert_eq!(wemoe(dir.path(), &["merge", "--strategy", "task-arithmetic"]), 0);
    let mf = read_manifest(&dir.path().join("out/merge/merged.wemc")).unwrap();
    assert_eq!(mf.get("kind"), Some("static"));
    assert_eq!(wemoe(dir.path(), &["tta"]), 1, "a static merge has no routers");
}

#[test]
fn f64_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    for args in &PIPELINE[..5] {
        let mut a = vec!["--precision", "f64"];
        a.extend_from_slice(args);
        assert_eq!(wemoe(dir.path(), &a), 0, "{args:?}");
    }
}
