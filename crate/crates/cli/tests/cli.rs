use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn triphash(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triphash"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = triphash(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen_blobs(dir: &Path) {
    ok(
        dir,
        &["gen-data", "--mode", "multiclass", "--classes", "3", "--per-class", "20", "--dim", "16", "--seed", "7"],
    );
}

#[test]
fn gen_data_writes_two_files_with_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    gen_blobs(dir.path());
    let data = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    let trip = fs::read_to_string(dir.path().join("data.triplets.csv")).unwrap();
    for text in [&data, &trip] {
        assert!(text.contains("# seed=7\n"));
        assert!(text.contains("# classes=3\n"));
        assert!(text.contains("# per-class=20\n"));
    }
    assert_eq!(data.lines().filter(|l| !l.starts_with('#')).count(), 60);
    assert!(trip.lines().any(|l| l == "i,j,k"));

    let again = tempfile::tempdir().unwrap();
    gen_blobs(again.path());
    assert_eq!(fs::read(dir.path().join("data.jsonl")).unwrap(), fs::read(again.path().join("data.jsonl")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("data.triplets.csv")).unwrap(),
        fs::read(again.path().join("data.triplets.csv")).unwrap()
    );
}

#[test]
fn gen_data_multilabel_and_split() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["gen-data", "--mode", "multilabel", "--tags", "8", "--points", "50", "--test-fraction", "0.2", "--seed", "1"],
    );
    let train = fs::read_to_string(dir.path().join("data.train.jsonl")).unwrap();
    let test = fs::read_to_string(dir.path().join("data.test.jsonl")).unwrap();
    assert_eq!(train.lines().filter(|l| !l.starts_with('#')).count(), 40);
    assert_eq!(test.lines().filter(|l| !l.starts_with('#')).count(), 10);
    assert!(dir.path().join("data.test.triplets.csv").exists());
    assert!(train.contains("# mode=multilabel\n"));
}

#[test]
fn infer_codes_shape_log_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    gen_blobs(dir.path());
    ok(
        dir.path(),
        &["infer-codes", "--data", "data.jsonl", "--triplets", "data.triplets.csv", "--bits", "16", "--out", "codes.txt", "--log", "obj.csv"],
    );
    let codes = fs::read_to_string(dir.path().join("codes.txt")).unwrap();
    assert_eq!(codes.lines().find(|l| !l.starts_with('#')), Some("16 60"));
    let out = ok(dir.path(), &["verify", "--log", "obj.csv"]);
    assert!(out.starts_with("ok:"));

    // an objective that rises within a bit is a contract violation
    let log = fs::read_to_string(dir.path().join("obj.csv")).unwrap();
    let tampered = log.replacen("1,1,", "1,1,1000", 1);
    fs::write(dir.path().join("bad.csv"), tampered).unwrap();
    assert_eq!(triphash(dir.path(), &["verify", "--log", "bad.csv"]).status.code(), Some(2));
}

#[test]
fn brute_force_certificate_on_small_instance() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["gen-data", "--classes", "3", "--per-class", "4", "--dim", "4", "--triplets-per-anchor", "5", "--seed", "2"],
    );
    let out = ok(
        dir.path(),
        &["infer-codes", "--data", "data.jsonl", "--triplets", "data.triplets.csv", "--bits", "6", "--out", "c.txt", "--verify-brute-force"],
    );
    assert!(out.contains("certificate: every checked block is optimal"), "{out}");
}

#[test]
fn train_then_evaluate_held_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--per-class", "40", "--test-fraction", "0.25", "--triplets-per-anchor", "20", "--seed", "3"]);
    let table = ok(
        d,
        &[
            "train", "--data", "data.train.jsonl", "--triplets", "data.train.triplets.csv", "--bits", "16", "--group-len", "8",
            "--hidden", "32", "--epochs", "30", "--model", "model.bin", "--codes", "train_codes.txt", "--stages", "stages.csv",
        ],
    );
    assert!(table.lines().next().unwrap().contains("stage"));
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count(), 2);

    let eval = |out: &str| {
        ok(
            d,
            &[
                "evaluate", "--model", "model.bin", "--gallery", "data.train.jsonl", "--probes", "data.test.jsonl",
                "--triplets", "data.test.triplets.csv", "--bits-sweep", "8,16", "--out", out, "--curve", "curve.csv",
            ],
        )
    };
    eval("m1.json");
    eval("m2.json");
    let m1 = fs::read_to_string(d.join("m1.json")).unwrap();
    let m2 = fs::read_to_string(d.join("m2.json")).unwrap().replace("m2.json", "m1.json");
    assert_eq!(m1, m2);
    assert!(m1.contains("\"similarity_precision\""));
    let curve = fs::read_to_string(d.join("curve.csv")).unwrap();
    assert!(curve.lines().any(|l| l == "bits,metric,value"));
    assert!(curve.contains("16,map,"));

    // stored training codes equal the checkpoint's predictions on the training set
    let from_model = ok(d, &["evaluate", "--model", "model.bin", "--gallery", "data.train.jsonl", "--out", "a.json"]);
    let from_codes = ok(d, &["evaluate", "--codes", "train_codes.txt", "--gallery", "data.train.jsonl", "--out", "b.json"]);
    assert_eq!(from_model.lines().next(), from_codes.lines().next());
}

#[test]
fn inspect_decomposition_examples() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["inspect-decomposition", "--bit-index", "1", "--prev-gap", "0"]);
    assert!(out.contains("alpha: ii=5/8 ij=-3/8 ik=3/8 jk=-1/8"), "{out}");
    let out = ok(dir.path(), &["inspect-decomposition", "--table", "0,0,0,0"]);
    assert!(out.contains("alpha: ii=0 ij=0 ik=0 jk=0"));
    let out = ok(dir.path(), &["inspect-decomposition", "--table", "1.5,-2,0.25,7"]);
    assert!(out.contains("max reconstruction error 0.0e0"), "{out}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "classes=2\nper-class=5\nseed=11\n").unwrap();
    ok(dir.path(), &["--config", "run.cfg", "gen-data", "--per-class", "6"]);
    let data = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    assert!(data.contains("# per-class=6\n"));
    assert!(data.contains("# seed=11\n"));
    assert_eq!(data.lines().filter(|l| !l.starts_with('#')).count(), 12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(triphash(d, &["gen-data", "--classes", "0"]).status.code(), Some(1));
    assert_eq!(triphash(d, &["infer-codes", "--data", "missing.jsonl", "--triplets", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(triphash(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(triphash(d, &["inspect-decomposition", "--table", "1,2"]).status.code(), Some(1));
    assert_eq!(triphash(d, &["--help"]).status.code(), Some(0));
}
