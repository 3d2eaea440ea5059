use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn latbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latbridge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MICRO: &str = r#"{
  "data": {"n1": 24, "n2": 24, "n_paired": 8, "height": 32, "width": 32, "num_classes": 3, "seed": 5},
  "train": {"batch_size": 4, "max_steps": 3, "arch": {"widths": [8, 16], "latent_channels": 4,
            "translator_blocks": 2, "translator_hidden": 8}},
  "eval": {"test_images": 6}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, text).unwrap();
    p(&path).to_string()
}

fn config_echo(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_the_dataset_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MICRO);
    let out = tmp.path().join("d");
    let o = latbridge(&["gen-data", "--config", &cfg, "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for entry in ["manifest.json", "domain1", "domain2", "labels", "config.json"] {
        assert!(out.join(entry).exists(), "missing {entry}");
    }
    let echo = config_echo(&out);
    assert_eq!(echo["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(echo["config"]["data"]["n1"], 24);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let o = latbridge(&[
        "train-translator",
        "--data",
        p(tmp.path()),
        "--ckpt1",
        p(&missing),
        "--ckpt2",
        p(&missing),
        "--out",
        p(&tmp.path().join("t")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&format!("checkpoint not found: {}", missing.display())), "{}", stderr(&o));
}

#[test]
fn typo_in_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"lamda_f": 30}}"#);
    let o = latbridge(&["gen-data", "--config", &cfg, "--out", p(&tmp.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("unknown key") && err.contains("lamda_f"), "{err}");
}

#[test]
fn type_mismatch_and_bad_usage_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"lambda_f": "sixty"}}"#);
    let o = latbridge(&["gen-data", "--config", &cfg, "--out", p(&tmp.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(latbridge(&["frobnicate"]).status.code(), Some(2));
    let o = latbridge(&["train-vaegan", "--data", "x", "--domain", "3", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"lambda_f": 45}, "data": {"n1": 16, "n2": 16, "n_paired": 4, "height": 16, "width": 16}}"#);
    let out = tmp.path().join("d");
    let o = latbridge(&["gen-data", "--config", &cfg, "--out", p(&out), "--lambda-f", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(config_echo(&out)["config"]["train"]["lambda_f"], 30.0);
    assert_eq!(config_echo(&out)["config"]["train"]["learning_rate"], 1e-4);
}

/// gen-data, both stage-one trainings, the translator, translate and two
/// evaluations on a few steps.
#[test]
fn micro_pipeline_runs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root, MICRO);
    let run = |args: &[&str]| {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", &cfg]);
        let o = latbridge(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    let data = root.join("data");
    run(&["gen-data", "--out", p(&data)]);
    run(&["train-vaegan", "--data", p(&data), "--domain", "1", "--out", p(&root.join("v1"))]);
    run(&["train-vaegan", "--data", p(&data), "--domain", "2", "--out", p(&root.join("v2"))]);
    let ckpt1 = root.join("v1/vaegan_domain1.ckpt");
    let ckpt2 = root.join("v2/vaegan_domain2.ckpt");
    run(&[
        "train-translator",
        "--data",
        p(&data),
        "--ckpt1",
        p(&ckpt1),
        "--ckpt2",
        p(&ckpt2),
        "--out",
        p(&root.join("t")),
    ]);
    let log = fs::read_to_string(root.join("t/log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    let ckpt = root.join("t/translator.ckpt");
    run(&[
        "translate",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&data.join("domain1")),
        "--num-samples",
        "2",
        "--out",
        p(&root.join("tr")),
    ]);
    let pngs = fs::read_dir(root.join("tr")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    });
    assert_eq!(pngs.count(), 24 * 3);
    for name in ["e1", "e2"] {
        run(&["evaluate", "--ckpt", p(&ckpt), "--out", p(&root.join(name))]);
    }
    let a = fs::read(root.join("e1/metrics.json")).unwrap();
    assert_eq!(a, fs::read(root.join("e2/metrics.json")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(m["n_images"], 6);
}
