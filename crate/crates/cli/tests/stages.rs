use std::path::Path;
use std::process::{Command, Output};

fn dtlns(args: &[&str], out: &Path, sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtlns"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn settings(input: &Path) -> Vec<String> {
    vec![
        format!("data.input={}", input.display()),
        "noise.fraction=0.2".into(),
        "pretrain.epochs=5".into(),
        "train.epochs=3".into(),
        "run.seeds=1,2".into(),
    ]
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let input = dir.join("input.tsv");
    ok(&dtlns(&["synth", "--seed", "3"], &input, &[]));
    input
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sets = settings(&synth(dir.path()));
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for run in &runs {
        for stage in ["prepare", "build-trees", "identify-fn"] {
            ok(&dtlns(&[stage], run, &sets));
        }
    }
    for file in ["data/train.tsv", "trees/codes.tsv", "trees/collab.tree", "fni/train_aug.tsv", "fni/report.json", "fni/stage.json"] {
        let a = std::fs::read(runs[0].join(file)).unwrap();
        let b = std::fs::read(runs[1].join(file)).unwrap();
        assert!(a == b, "{file} differs between reruns");
    }
    let codes = std::fs::read_to_string(runs[0].join("trees/codes.tsv")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(runs[0].join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(codes.lines().filter(|l| !l.starts_with('#')).count(), manifest["item_count"].as_u64().unwrap() as usize);
    let tree_header = std::fs::read_to_string(runs[0].join("trees/collab.tree")).unwrap();
    assert!(tree_header.starts_with("# k=4 m=30"));
}

#[test]
fn stale_upstream_artifacts_abort() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut sets = settings(&synth(dir.path()));
    ok(&dtlns(&["prepare"], &run, &sets));
    ok(&dtlns(&["build-trees"], &run, &sets));
    sets.push("tree.leaf_size=10".into());
    let o = dtlns(&["identify-fn"], &run, &sets);
    assert_eq!(o.status.code(), Some(12));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
    let o = dtlns(&["build-trees"], &run, &sets);
    assert!(o.status.success());
    ok(&dtlns(&["identify-fn"], &run, &sets));
}

#[test]
fn full_pipeline_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let sets = settings(&synth(dir.path()));
    for stage in ["prepare", "build-trees", "identify-fn", "train", "evaluate", "fn-accuracy"] {
        ok(&dtlns(&[stage], &run, &sets));
    }
    let results = std::fs::read_to_string(run.join("train/results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next(), Some("run_id,dataset,sampler,seed,recall@10,ndcg@10,recall@20,ndcg@20"));
    assert_eq!(lines.count(), 2);
    for seed in [1, 2] {
        let metrics = std::fs::read_to_string(run.join(format!("train/seed-{seed}/metrics.csv"))).unwrap();
        assert_eq!(metrics.lines().next(), Some("epoch,loss,recall@20,ndcg@20"));
        assert_eq!(metrics.lines().count(), 4);
        assert!(run.join(format!("train/seed-{seed}/timing.csv")).exists());
    }
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("train/aggregate.json")).unwrap()).unwrap();
    assert!(agg.to_string().contains("std"));
    assert!(run.join("eval/results.csv").exists());
    let acc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("fn_accuracy/accuracy.json")).unwrap()).unwrap();
    assert!(acc["random_baseline"].as_f64().unwrap() > 0.0);

    let missing = dtlns(&["evaluate", "--checkpoint", "/nonexistent.ckpt"], &run, &sets);
    assert_eq!(missing.status.code(), Some(14));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# desk run\ntrain.lr = 0.01\nsampler.kind = bogus\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dtlns")).args(["prepare", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampler.kind"));
}
