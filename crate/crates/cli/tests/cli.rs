use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flate2::write::GzEncoder;
use flate2::Compression;

fn sample(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/sample").join(rel)
}

fn cogtran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogtran"))
        .arg("--single-thread")
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cogtran(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_proto(out: &Path, seed: &str) -> String {
    let data = sample("proto");
    ok(&[
        "train", "--task", "proto", "--proto-lang", "Latin", "--size", "tiny", "--data", path(&data),
        "--test-prop", "0.1", "--seed", seed, "--epochs", "2", "--out", path(out),
    ])
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r1");
    let stdout = train_proto(&run, "7");
    assert!(stdout.contains("test\tED"));
    for f in ["config.json", "losses.tsv", "report.json", "predictions.tsv", "model/weights.bin", "model/vocab.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["run"]["task"], "proto");
    assert_eq!(config["run"]["seed"], 7);
    assert_eq!(config["model"]["hidden_size"], 128);
    assert!(config["version"].is_string() && config["git"].is_string());
    let losses = fs::read_to_string(run.join("losses.tsv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    // 50 sets at 0.1 leave 5 for testing
    assert_eq!(report["n"], 5);
    assert!(report["per_family"]["Romance"].is_object());
}

#[test]
fn identical_runs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_proto(&a, "7");
    train_proto(&b, "7");
    for f in ["report.json", "losses.tsv", "predictions.tsv", "model/weights.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = dir.path().join("c");
    train_proto(&c, "8");
    assert_ne!(fs::read(a.join("losses.tsv")).unwrap(), fs::read(c.join("losses.tsv")).unwrap());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let run = dir.path().join("run");
    let json = serde_json::json!({
        "task": "proto",
        "proto_language": "Latin",
        "data": sample("proto"),
        "seed": 1,
        "train": {"epochs": 1, "batch_size": 16},
        "model": {
            "hidden_size": 16, "intermediate_size": 32, "num_heads": 2, "num_layers": 1,
            "vocab_size": 0, "max_row_positions": 64, "dropout": 0.0
        }
    });
    fs::write(&cfg, json.to_string()).unwrap();
    ok(&["train", "--config", path(&cfg), "--epochs", "2", "--out", path(&run)]);
    assert_eq!(fs::read_to_string(run.join("losses.tsv")).unwrap().lines().count(), 3);
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["batch_size"], 16);
    assert_eq!(config["train"]["epochs"], 2);
    assert_eq!(config["model"]["hidden_size"], 16);
}

#[test]
fn predict_and_eval_from_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    train_proto(&run, "7");
    let out = ok(&[
        "predict", "--model", path(&run), "--set", "Italian:d͡ʒ i n e p r o", "French:ʒ ə n j ɛ v ʁ", "--target", "Latin",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let (lang, form) = lines[0].split_once('\t').unwrap();
    assert_eq!(lang, "Latin");
    assert!(!form.contains('\t'));

    let eval_dir = dir.path().join("eval");
    let out = ok(&[
        "eval", "--model", path(&run), "--data", path(&sample("proto/Romance.tsv")), "--proto-lang", "Latin",
        "--per-family", "--out", path(&eval_dir),
    ]);
    assert!(out.contains("family\ted\tned\tbc\tn"));
    assert!(out.contains("\nRomance\t"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 50);

    let out = ok(&["errors", "--predictions", path(&eval_dir.join("predictions.tsv")), "--top", "3"]);
    assert!(out.lines().count() <= 3);
    let table = fs::read_to_string(eval_dir.join("errors.tsv")).unwrap();
    assert!(table.starts_with("rank\tpair\tfrequency\n"));
}

#[test]
fn pretrain_then_finetune_and_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let proto = sample("proto");
    let reflex = sample("reflex");
    let common = ["--proto-lang", "Latin", "--test-prop", "0.2", "--seed", "3"];
    let mut args = vec![
        "pretrain", "--reflex-data", path(&reflex), "--data", path(&proto), "--epochs", "1", "--out", path(&pre),
    ];
    args.extend_from_slice(&common);
    ok(&args);
    let vocab = fs::read_to_string(pre.join("model/vocab.txt")).unwrap();
    assert!(vocab.contains("[Latin]") && vocab.contains("[English]"));

    let zero = dir.path().join("zero");
    let mut args = vec!["finetune", "--model", path(&pre), "--data", path(&proto), "--epochs", "0", "--out", path(&zero)];
    args.extend_from_slice(&common);
    ok(&args);
    assert_eq!(fs::read_to_string(zero.join("losses.tsv")).unwrap(), "epoch\tloss\n");
    assert!(zero.join("report.json").is_file());

    let fine = dir.path().join("fine");
    let mut args = vec!["finetune", "--model", path(&pre), "--data", path(&proto), "--epochs", "1", "--out", path(&fine)];
    args.extend_from_slice(&common);
    ok(&args);
    assert_eq!(fs::read_to_string(fine.join("losses.tsv")).unwrap().lines().count(), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(fine.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 10);
}

#[test]
fn cross_validation_reports_folds() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("cv");
    let out = ok(&[
        "cv", "--task", "reflex", "--data", path(&sample("reflex")), "--folds", "2", "--epochs", "1", "--seed", "2",
        "--out", path(&run),
    ]);
    assert!(out.contains("fold 1") && out.contains("fold 2") && out.contains("mean"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
}

#[test]
fn align_trim_and_vocab() {
    let out = ok(&["align", "--set", "a:p a t e r", "b:f a d a r", "c:v a t e r"]);
    assert_eq!(out, "a\tp\ta\tt\te\tr\nb\tf\ta\td\ta\tr\nc\tv\ta\tt\te\tr\n");
    let out = ok(&["trim", "--data", path(&sample("reflex/Germanic.tsv"))]);
    assert_eq!(out.matches("# Germanic\t").count(), 20);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("vocab.txt");
    ok(&["vocab", "--data", path(&sample("reflex")), "--out", path(&file)]);
    let vocab = fs::read_to_string(file).unwrap();
    assert_eq!(vocab.lines().take(6).collect::<Vec<_>>(), ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "-"]);
}

#[test]
fn exit_codes() {
    let usage = cogtran(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
    let usage = cogtran(&["train", "--task", "proto", "--out", "/nonexistent/x"]);
    assert_eq!(usage.status.code(), Some(2));
    let unknown = cogtran(&["train", "--task", "cloze", "--data", path(&sample("proto")), "--out", "/tmp/x"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("UnknownTask"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "COGID\ta\tb\n1\tp a\n").unwrap();
    let data = cogtran(&["train", "--data", path(&bad), "--out", path(&dir.path().join("r"))]);
    assert_eq!(data.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&data.stderr).contains("RowWidthMismatch"));

    let no_proto = cogtran(&["train", "--task", "proto", "--data", path(&sample("reflex")), "--out", path(&dir.path().join("p"))]);
    assert_eq!(no_proto.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_proto.stderr).contains("NoProtoLanguage"));
}

fn tarball(files: &[(&str, &str)]) -> Vec<u8> {
    let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
    for (name, text) in files {
        let mut header = tar::Header::new_gnu();
        header.set_size(text.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, name, text.as_bytes()).unwrap();
    }
    builder.into_inner().unwrap().finish().unwrap()
}

#[test]
fn fetch_converts_local_archives() {
    let dir = tempfile::tempdir().unwrap();
    let wide = tarball(&[
        ("repo-main/data/Germanic/cognates.tsv", "COGID\tEnglish\tGerman\n1\th æ n d\th a n t\n2\tw ɔː t ə\t\n"),
        ("repo-main/data-surprise/Celtic/cognates.tsv", "COGID\tIrish\tWelsh\n1\tk a t\tk a θ\n"),
        ("repo-main/data/Germanic/solutions.tsv", "ignored"),
        ("repo-main/README.md", "ignored"),
    ]);
    let long = tarball(&[(
        "other-main/data/romance.tsv",
        "ID\tDOCULECT\tCONCEPT\tTOKENS\tCOGID\n1\tLatin\tnight\tn ɔ k s\t1\n2\tItalian\tnight\tn ɔ t t e\t1\n",
    )]);
    let (wide_path, long_path) = (dir.path().join("wide.tar.gz"), dir.path().join("long.tar.gz"));
    fs::write(&wide_path, &wide).unwrap();
    fs::write(&long_path, &long).unwrap();
    let manifest = serde_json::json!({"sources": [
        {"name": "wide", "url": "https://example.invalid/wide.tar.gz", "sha256": null, "members": [
            {"pattern": "data/*/cognates.tsv", "format": "wide", "dest": "reflex/training"},
            {"pattern": "data-surprise/*/cognates.tsv", "format": "wide", "dest": "reflex/surprise"}]},
        {"name": "long", "url": "https://example.invalid/long.tar.gz", "sha256": null,
         "members": [{"pattern": "data/*.tsv", "format": "wordlist", "dest": "proto"}],
         "proto_languages": {"romance": "Latin"}}
    ]});
    let manifest_path = dir.path().join("manifest.json");
    fs::write(&manifest_path, manifest.to_string()).unwrap();
    let out = dir.path().join("fetched");
    let wide_arg = format!("wide={}", wide_path.display());
    let long_arg = format!("long={}", long_path.display());
    let stdout = ok(&[
        "fetch", "--manifest", path(&manifest_path), "--out", path(&out), "--source", &wide_arg, "--source", &long_arg,
    ]);
    assert!(stdout.contains("reflex/training\t1 families\t3 words\t2 cognate sets"));
    assert_eq!(
        fs::read_to_string(out.join("reflex/training/Germanic.tsv")).unwrap(),
        "COGID\tEnglish\tGerman\n1\th æ n d\th a n t\n2\tw ɔː t ə\t\n"
    );
    assert!(out.join("reflex/surprise/Celtic.tsv").is_file());
    assert_eq!(
        fs::read_to_string(out.join("proto/romance.tsv")).unwrap(),
        "COGID\tProto-Latin\tItalian\n1\tn ɔ k s\tn ɔ t t e\n"
    );
    let lock: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.lock.json")).unwrap()).unwrap();
    assert_eq!(lock[0]["sha256"].as_str().unwrap().len(), 64);

    let mut pinned = manifest.clone();
    pinned["sources"][0]["sha256"] = serde_json::json!("00".repeat(32));
    fs::write(&manifest_path, pinned.to_string()).unwrap();
    let bad = cogtran(&[
        "fetch", "--manifest", path(&manifest_path), "--out", path(&out), "--source", &wide_arg, "--source", &long_arg,
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ChecksumMismatch"));
}
