use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use voicelens::distributions::GmmModel;
use voicelens::flow::FlowModel;
use voicelens::io::read_embeddings;
use voicelens::tacospawn::ConditionalGmm;

fn voicelens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voicelens"))
        .args(args)
        .current_dir(dir)
        .env_remove("VOICELENS_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = voicelens(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = voicelens(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// Small corpus, both mixtures and a briefly trained flow in `dir`.
fn pipeline(dir: &Path) {
    ok(dir, &["synth", "--preset", "easy", "--n-items", "200", "--dim", "10", "--keep", "0.6", "-o", "corpus"]);
    ok(dir, &["fit-gmm", "--corpus", "corpus", "-k", "3", "-o", "gmm"]);
    ok(dir, &["fit-gmm", "--kind", "conditional", "--corpus", "corpus", "-k", "2", "-o", "cgmm"]);
    ok(dir, &["train", "--corpus", "corpus", "--gmm", "gmm/gmm.json", "--epochs", "2", "--hidden", "16,16", "-o", "flow"]);
}

#[test]
fn model_files_round_trip_and_match_cli_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);

    let text = fs::read_to_string(dir.join("flow/flow.json")).unwrap();
    let flow = FlowModel::from_json(&text).unwrap();
    assert_eq!(flow.to_json().unwrap(), text);
    let text = fs::read_to_string(dir.join("gmm/gmm.json")).unwrap();
    let gmm = GmmModel::from_json(&text).unwrap();
    assert_eq!(gmm.to_json().unwrap(), text);
    let text = fs::read_to_string(dir.join("cgmm/conditional_gmm.json")).unwrap();
    let cgmm = ConditionalGmm::from_json(&text).unwrap();
    assert_eq!(cgmm.to_json().unwrap(), text);
    assert_eq!(cgmm.conditions().len(), 2);

    ok(dir, &["classify", "--model", "flow/flow.json", "--input", "corpus", "-o", "cls"]);
    let emb = read_embeddings(&dir.join("corpus/embeddings.bin")).unwrap();
    let table = fs::read_to_string(dir.join("cls/predictions.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "id,gender,age,snr,p(gender=F),p(gender=M),p(age=child),p(age=adult)");
    for (r, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let e = emb.row(r);
        let p = flow.classify(e, 0).unwrap();
        assert!((cells[4].parse::<f64>().unwrap() - p[0]).abs() <= 1e-12);
        let snr: f64 = cells[3].parse().unwrap();
        assert!((snr - flow.read_continuous(e, 2).unwrap()).abs() <= 1e-12);
        assert_eq!(cells[1], if flow.predict_class(e, 0).unwrap() == 0 { "F" } else { "M" });
    }

    ok(dir, &["edit", "--model", "flow/flow.json", "--input", "corpus", "--attr", "snr", "--delta", "-5", "--rows", "3,4", "-o", "ed"]);
    let edited = read_embeddings(&dir.join("ed/embeddings.bin")).unwrap();
    assert_eq!(edited.rows(), 2);
    let expected = flow.edit(emb.row(4), 2, voicelens::flow::EditRequest::Delta(-5.0)).unwrap();
    assert!(edited.row(1).iter().zip(&expected).all(|(a, b)| (a - b).abs() <= 1e-12));
}

#[test]
fn sampling_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    ok(dir, &["sample", "--model", "flow/flow.json", "--label", "gender=F,age=_,snr=_", "-n", "100", "-o", "s"]);
    let emb = read_embeddings(&dir.join("s/embeddings.bin")).unwrap();
    assert_eq!((emb.rows(), emb.cols()), (100, 10));
    let labels = fs::read_to_string(dir.join("s/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 101);
    assert_eq!(labels.lines().nth(1).unwrap(), "0,F,,");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sample");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["inputs"][0]["path"], "flow/flow.json");
    assert_eq!(manifest["inputs"][0]["hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["count"], 100);

    ok(dir, &["sample", "--model", "cgmm/conditional_gmm.json", "--label", "gender=M,age=child", "-n", "5", "-o", "c"]);
    let labels = fs::read_to_string(dir.join("c/labels.csv")).unwrap();
    assert_eq!(labels.lines().nth(5).unwrap(), "4,M,child");
    ok(dir, &["sample", "--model", "gmm/gmm.json", "--label", "gender=_", "-n", "5", "-o", "g"]);
    assert!(!dir.join("g/labels.csv").exists());
}

#[test]
fn seed_flag_and_environment_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--n-items", "50", "--dim", "8", "--seed", "4", "-o", "a"]);
    let out = Command::new(env!("CARGO_BIN_EXE_voicelens"))
        .args(["synth", "--n-items", "50", "--dim", "8", "-o", "b"])
        .current_dir(dir)
        .env("VOICELENS_SEED", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(dir, &["synth", "--n-items", "50", "--dim", "8", "-o", "c"]);
    let a = fs::read(dir.join("a/embeddings.bin")).unwrap();
    assert_eq!(a, fs::read(dir.join("b/embeddings.bin")).unwrap());
    assert_ne!(a, fs::read(dir.join("c/embeddings.bin")).unwrap());
}

#[test]
fn eval_reports_metrics_and_clique_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    ok(dir, &["sample", "--model", "flow/flow.json", "--sweep", "snr", "-n", "60", "-o", "sw"]);
    let stdout = ok(
        dir,
        &[
            "eval", "--real", "corpus", "--generated", "sw", "--generator", "corpus/generator.json", "--model",
            "flow/flow.json", "--clique", "--snr-bins", "10", "-o", "ev",
        ],
    );
    assert!(stdout.contains("s2s\t"));
    let csv = fs::read_to_string(dir.join("ev/metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"), "{csv}");
    for key in ["s2s,", "s2g,", "g2g,", "s2t_s,\n", "pearson_snr,", "flow_accuracy_gender,", "oracle_accuracy_age,", "clique_threshold,"] {
        assert!(csv.contains(key), "missing {key} in {csv}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("ev/metrics.json")).unwrap()).unwrap();
    assert!(json["s2t_s"].is_null());
    let clique = fs::read_to_string(dir.join("ev/clique.csv")).unwrap();
    let lines: Vec<&str> = clique.lines().collect();
    assert_eq!(lines[0], "bin_low,bin_high,count,omega");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("25,35,"));
    assert!(lines[3].starts_with("45,55,"));
    let total: usize = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 60);
}

#[test]
fn errors_name_the_offending_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let err = fails(dir, &["sample", "--model", "nope.json", "-o", "x"]);
    assert!(err.contains("nope.json"), "{err}");
    assert!(err.starts_with("voicelens: error:"));

    let err = fails(dir, &["synth", "--bogus", "-o", "x"]);
    assert!(err.contains("--bogus"), "{err}");

    pipeline(dir);
    ok(dir, &["synth", "--n-items", "20", "--dim", "6", "-o", "small"]);
    let err = fails(dir, &["classify", "--model", "flow/flow.json", "--input", "small", "-o", "x"]);
    assert!(err.contains("dimension"), "{err}");
    let err = fails(dir, &["edit", "--model", "flow/flow.json", "--input", "corpus", "--attr", "gender", "--delta", "1", "-o", "x"]);
    assert!(err.contains("gender") || err.contains("delta"), "{err}");
    let err = fails(dir, &["sample", "--model", "flow/flow.json", "--label", "colour=red", "-o", "x"]);
    assert!(err.contains("colour"), "{err}");
    let err = fails(dir, &["sample", "--model", "cgmm/conditional_gmm.json", "--label", "gender=F", "-o", "x"]);
    assert!(err.contains("age"), "{err}");
    let err = fails(dir, &["sample", "--model", "gmm/gmm.json", "--label", "gender=F", "-o", "x"]);
    assert!(err.contains("unconditional"), "{err}");
    let err = fails(dir, &["synth", "--keep", "1.5", "-o", "x"]);
    assert!(err.contains("--keep"), "{err}");
    let err = fails(dir, &["eval", "--real", "flow/flow.json", "-o", "x"]);
    assert!(err.contains("flow/flow.json"), "{err}");
}
