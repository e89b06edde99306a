use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgc_core::bridge::serve_tcp;
use kgc_core::scorers::checkpoint::Checkpoint;
use kgc_core::scorers::Model;
use serde_json::Value;

fn umls() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/umls")
}

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgc-forge"))
        .args(args)
        .env_remove("KGC_FORGE_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = forge(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_lp_report_has_rank_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lp");
    ok(&[
        "eval-lp",
        "--scorer",
        "transe",
        "--data",
        s(&umls()),
        "--hits",
        "10",
        "--epochs",
        "20",
        "--out",
        s(&out),
    ]);
    let report = json(&out.join("report.json"));
    assert!(report["mr"].as_f64().unwrap() >= 1.0);
    assert!(report["hits"]["10"].as_f64().is_some());
    assert_eq!(report["scorer"], "transe");
    for table in ["tables/per_relation.csv", "tables/per_cardinality.csv"] {
        let text = fs::read_to_string(out.join(table)).unwrap();
        assert!(
            text.lines().next().unwrap().ends_with(",side,metric,value"),
            "{table}"
        );
    }
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "eval-lp");
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(
        outputs,
        [
            "report.json",
            "tables/per_relation.csv",
            "tables/per_cardinality.csv"
        ]
    );
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    assert!(inputs
        .iter()
        .all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert!(manifest["started_at"].is_u64());
}

#[test]
fn train_echoes_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    ok(&[
        "train",
        "--task",
        "tc",
        "--negatives",
        "1",
        "--epochs",
        "3",
        "--batch",
        "32",
        "--lr",
        "5e-5",
        "--dropout",
        "0.1",
        "--data",
        s(&umls()),
        "--out",
        s(&out),
    ]);
    let report = json(&out.join("report.json"));
    let cfg = &report["config"];
    assert_eq!(
        (
            cfg["negative_ratio"].as_u64(),
            cfg["epochs"].as_u64(),
            cfg["batch_size"].as_u64()
        ),
        (Some(1), Some(3), Some(32))
    );
    assert_eq!(
        (cfg["learning_rate"].as_f64(), cfg["dropout"].as_f64()),
        (Some(5e-5), Some(0.1))
    );
    let manifest = json(&out.join("manifest.json"));
    let train = &manifest["config"]["command"]["train"];
    assert_eq!(train["hyper"]["lr"].as_f64(), Some(5e-5));
    assert_eq!(train["task"], "tc");
    assert!(Checkpoint::load(out.join("model.json")).is_ok());
}

#[test]
fn ablate_on_one_to_one_fixture_has_one_category() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    let lines = |range: std::ops::Range<usize>| -> String {
        range.map(|i| format!("a{i}\tpairs_with\tb{i}\n")).collect()
    };
    fs::write(data.join("train.tsv"), lines(0..30)).unwrap();
    fs::write(data.join("dev.tsv"), lines(30..35)).unwrap();
    fs::write(data.join("test.tsv"), lines(35..40)).unwrap();
    let out = dir.path().join("ablate");
    ok(&[
        "ablate",
        "--by",
        "cardinality",
        "--scorer",
        "transe",
        "--epochs",
        "5",
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("tables/cardinality.csv")).unwrap();
    let categories: std::collections::BTreeSet<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(categories.into_iter().collect::<Vec<_>>(), ["1-1"]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rp");
    let data = umls();
    let args = [
        "eval-rp",
        "--scorer",
        "distmult",
        "--epochs",
        "10",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--deterministic",
    ];
    let read = |name: &str| fs::read(out.join(name)).unwrap();
    ok(&args);
    let first: Vec<Vec<u8>> = ["report.json", "manifest.json", "tables/per_relation.csv"]
        .map(read)
        .to_vec();
    ok(&args);
    let second: Vec<Vec<u8>> = ["report.json", "manifest.json", "tables/per_relation.csv"]
        .map(read)
        .to_vec();
    assert_eq!(first, second);
    assert!(json(&out.join("manifest.json")).get("started_at").is_none());
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tc");
    let status = Command::new(env!("CARGO_BIN_EXE_kgc-forge"))
        .args([
            "eval-tc",
            "--scorer",
            "distmult",
            "--epochs",
            "5",
            "--data",
            s(&umls()),
            "--out",
            s(&out),
        ])
        .env("KGC_FORGE_SEED", "7")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(json(&out.join("manifest.json"))["seed"], 7);
    let report = json(&out.join("report.json"));
    assert_eq!(report["seed"], 7);
    assert!(report["accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn exit_codes() {
    assert_eq!(forge(&["eval-lp", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(forge(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(forge(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = forge(&[
        "eval-lp",
        "--data",
        "/definitely/not/here",
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/definitely/not/here"));
    let bridge = forge(&[
        "eval-tc",
        "--scorer",
        "bridge",
        "--data",
        s(&umls()),
        "--out",
        s(&out),
    ]);
    assert_eq!(bridge.status.code(), Some(1));
}

#[test]
fn bridge_endpoint_matches_local_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("train");
    ok(&[
        "train",
        "--task",
        "rp",
        "--epochs",
        "2",
        "--lr",
        "1e-3",
        "--data",
        s(&umls()),
        "--out",
        s(&trained),
    ]);
    let model_path = trained.join("model.json");
    let Model::Classifier(state) = Checkpoint::load(&model_path).unwrap().model else {
        panic!("classifier checkpoint expected")
    };
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = std::thread::spawn(move || serve_tcp(&state, &listener, Some(1)).unwrap());

    let remote = dir.path().join("remote");
    let local = dir.path().join("local");
    ok(&[
        "eval-rp",
        "--scorer",
        "bridge",
        "--endpoint",
        &addr,
        "--data",
        s(&umls()),
        "--out",
        s(&remote),
    ]);
    ok(&[
        "eval-rp",
        "--model",
        s(&model_path),
        "--data",
        s(&umls()),
        "--out",
        s(&local),
    ]);
    server.join().unwrap();
    let (r, l) = (
        json(&remote.join("report.json")),
        json(&local.join("report.json")),
    );
    assert_eq!(r["scorer"], "bridge");
    for key in ["mr", "mrr"] {
        assert!(
            (r[key].as_f64().unwrap() - l[key].as_f64().unwrap()).abs() < 1e-9,
            "{key}"
        );
    }
    assert_eq!(r["hits"], l["hits"]);
}

#[test]
fn export_writes_labeled_items() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("export");
    ok(&[
        "export",
        "--data",
        s(&umls()),
        "--negatives",
        "2",
        "--out",
        s(&out),
    ]);
    let train = fs::read_to_string(out.join("items/train.ndjson")).unwrap();
    let lines: Vec<Value> = train
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5216 * 3);
    assert_eq!(lines.iter().filter(|l| l["label"] == 1).count(), 5216);
    assert!(lines[0]["item"]["relation_text"].is_string());
    assert!(out.join("dataset/train.tsv").is_file());
    ok(&[
        "ingest",
        "--data",
        s(&out.join("dataset")),
        "--out",
        s(&dir.path().join("again")),
    ]);
    let report = json(&dir.path().join("again/report.json"));
    assert_eq!(
        (report["entities"].as_u64(), report["train"].as_u64()),
        (Some(135), Some(5216))
    );
}
