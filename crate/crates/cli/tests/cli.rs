use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bucketmux(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bucketmux"))
        .args(args)
        .output()
        .expect("spawn bucketmux")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn memory_model() -> String {
    s(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/memory_model.json"))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A small corpus (1/20 of the preset) and its manifest path.
fn small_corpus(dir: &Path) -> PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/synthetic.json")).unwrap();
    for src in cfg["sources"].as_array_mut().unwrap() {
        let n = src["num_examples"].as_u64().unwrap();
        src["num_examples"] = (n / 20).into();
    }
    std::fs::create_dir_all(dir).unwrap();
    let cfg_path = dir.join("small.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = bucketmux(&[
        "gen-synthetic",
        "--config",
        &s(&cfg_path),
        "--out-dir",
        &s(&dir.join("corpus")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("corpus/manifest.json")
}

#[test]
fn estimate_buckets_writes_one_tree_per_modality() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let trees = dir.path().join("trees.json");
    let out = bucketmux(&[
        "estimate-buckets",
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&trees),
        "--sample-size",
        "600",
        "--num-buckets",
        "6",
        "--num-subbuckets",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&trees);
    for m in ["audio", "text"] {
        let tree = &v["modalities"][m];
        assert_eq!(tree["input_edges"].as_array().unwrap().len(), 6);
        let rows = tree["output_edges"].as_array().unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 4));
    }
}

#[test]
fn oversized_sample_warns_about_wrapping() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let out = bucketmux(&[
        "estimate-buckets",
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&dir.path().join("t.json")),
        "--sample-size",
        "5000",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wraps"));
}

#[test]
fn full_chain_and_single_step_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let p = |n: &str| s(&dir.path().join(n));
    assert!(bucketmux(&[
        "estimate-buckets",
        "--manifest",
        &s(&manifest),
        "--out",
        &p("trees.json"),
        "--sample-size",
        "500"
    ])
    .status
    .success());
    let out = bucketmux(&[
        "oomptimize",
        "--trees",
        &p("trees.json"),
        "--memory-model",
        &memory_model(),
        "--out",
        &p("prof.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let prof = json(&dir.path().join("prof.json"));
    for m in ["audio", "text"] {
        let grid = prof["modalities"][m]["grid"].as_array().unwrap();
        assert_eq!(grid.len(), 10);
        assert!(grid
            .iter()
            .flat_map(|r| r.as_array().unwrap())
            .all(|b| b.as_u64().unwrap() >= 1));
    }
    let out = bucketmux(&[
        "simulate",
        "--manifest",
        &s(&manifest),
        "--trees",
        &p("trees.json"),
        "--profiles",
        &p("prof.json"),
        "--out",
        &p("r.json"),
        "--steps",
        "1",
        "--window",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("r.json"));
    assert_eq!(report["steps_simulated"], 1);
    let batches: u64 = report["batches_per_modality"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(batches, 1);
    assert!(dir.path().join("r.txt").exists());
}

#[test]
fn unsatisfiable_memory_model_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let trees = dir.path().join("trees.json");
    std::fs::write(
        &trees,
        r#"{"version":1,"modalities":{"text":{"version":1,"input_edges":[10.0,100.0],"output_edges":[[10],[100]]}}}"#,
    )
    .unwrap();
    let model = dir.path().join("mm.json");
    std::fs::write(
        &model,
        r#"{"version":1,"models":{"text":{"c0":0.0,"c1":0.0,"c2":0.0,"c3":1.0,"c4":0.0,"c5":0.0,"capacity_bytes":5000.0}}}"#,
    )
    .unwrap();
    let out = bucketmux(&[
        "oomptimize",
        "--trees",
        &s(&trees),
        "--memory-model",
        &s(&model),
        "--out",
        &s(&dir.path().join("p.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(1, 0)") && err.contains("even batch size 1"), "{err}");
}

#[test]
fn exit_codes() {
    assert_eq!(bucketmux(&["--help"]).status.code(), Some(0));
    assert_eq!(bucketmux(&["estimate-buckets"]).status.code(), Some(1));
    assert_eq!(bucketmux(&["no-such-command"]).status.code(), Some(1));
    let out = bucketmux(&[
        "estimate-buckets",
        "--manifest",
        "/nonexistent/manifest.json",
        "--out",
        "/tmp/x.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = bucketmux(&[
        "compare-profiles",
        "--a",
        "/nonexistent/a.json",
        "--b",
        "/nonexistent/b.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_synthetic_is_deterministic_and_seedable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_corpus(&dir.path().join("a"));
    let b = small_corpus(&dir.path().join("b"));
    let shard = |m: &Path| std::fs::read(m.parent().unwrap().join("asr_en/shard-0000.jsonl")).unwrap();
    assert_eq!(shard(&a), shard(&b));
    let c = dir.path().join("c");
    let out = bucketmux(&["gen-synthetic", "--seed", "5", "--out-dir", &s(&c)]);
    assert!(out.status.success());
    assert_ne!(std::fs::read(c.join("asr_en/shard-0000.jsonl")).unwrap(), shard(&a));
}
