use std::fs;
use std::path::Path;

use sdd_tta::cli::run;
use serde_json::Value;

/// Runs one command line, split on whitespace.
fn sdd(line: &str) -> i32 {
    run(std::iter::once("sdd-tta").chain(line.split_whitespace()))
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Tiny benchmark and a two-epoch checkpoint under `root`.
fn prepare(root: &Path) {
    let r = root.display();
    let gen =
        format!("gen-data --out {r}/data --seed 3 --source-samples 10 --target-samples 12 --height 32 --width 32");
    assert_eq!(sdd(&gen), 0);
    let train = format!("pretrain --data {r}/data/source/manifest.jsonl --out {r}/model --epochs 2 --seed 1");
    assert_eq!(sdd(&train), 0);
}

#[test]
fn pipeline_is_reproducible_and_keeps_the_supervisor() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    prepare(root);
    let r = root.display();
    let ckpt = root.join("model/model.sddckpt");
    let before = fs::read(&ckpt).unwrap();
    let adapt = format!("adapt --ckpt {r}/model/model.sddckpt --stream {r}/data/target/manifest.jsonl");

    for dir in ["a", "b"] {
        assert_eq!(sdd(&format!("{adapt} --report {r}/{dir} --seed 4")), 0);
    }
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    for f in ["steps.jsonl", "report.json", "adapted.sddckpt", "config.json"] {
        let (a, b) = (root.join("a").join(f), root.join("b").join(f));
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{f}");
    }
    let meta = json(&root.join("a/meta.json"));
    assert!(meta["samples_per_s"].as_f64().unwrap() > 0.0);

    // the effective config loads back and reproduces the run
    assert_eq!(sdd(&format!("{adapt} --report {r}/c --config {r}/a/config.json")), 0);
    let steps = |d: &str| fs::read(root.join(d).join("steps.jsonl")).unwrap();
    assert_eq!(steps("a"), steps("c"));

    // scoring the recorded steps reproduces the adapt report
    let data = format!("--data {r}/data/target/manifest.jsonl");
    assert_eq!(
        sdd(&format!("eval {data} --steps {r}/a/steps.jsonl --report {r}/ev")),
        0
    );
    let adapted = json(&root.join("a/report.json"));
    assert_eq!(json(&root.join("ev/report.json"))["metrics"], adapted["metrics"]);

    assert_eq!(
        sdd(&format!(
            "eval {data} --ckpt {r}/model/model.sddckpt --report {r}/frozen"
        )),
        0
    );
    assert_eq!(
        json(&root.join("frozen/report.json"))["metrics"],
        adapted["frozen_metrics"]
    );
    let preds = fs::read_to_string(root.join("frozen/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 12);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path().display();
    assert_eq!(sdd(&format!("adapt --stream s.jsonl --report {r}/x")), 1);
    assert_eq!(sdd("no-such-command"), 1);
    assert_eq!(sdd("--help"), 0);
    assert_eq!(
        sdd(&format!(
            "adapt --ckpt missing.sddckpt --stream missing.jsonl --report {r}/x"
        )),
        2
    );

    let bad_cfg = tmp.path().join("bad.json");
    let with_cfg = format!(
        "adapt --ckpt m --stream s --report {r}/x --config {}",
        bad_cfg.display()
    );
    fs::write(&bad_cfg, r#"{"p_th": 0.2}"#).unwrap();
    assert_eq!(sdd(&with_cfg), 1);
    fs::write(&bad_cfg, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(sdd(&with_cfg), 1);

    fs::write(tmp.path().join("junk.sddckpt"), b"not a checkpoint").unwrap();
    fs::write(tmp.path().join("m.jsonl"), "").unwrap();
    assert_eq!(
        sdd(&format!(
            "adapt --ckpt {r}/junk.sddckpt --stream {r}/m.jsonl --report {r}/x"
        )),
        2
    );
}

#[test]
fn gradcheck_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path().display();
    assert_eq!(sdd(&format!("gradcheck --input-size 8 --report {r}/gc")), 0);
    let report = json(&tmp.path().join("gc/report.json"));
    assert_eq!(report["passed"], Value::Bool(true));
}
