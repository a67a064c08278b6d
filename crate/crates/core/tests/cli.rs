use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "vocabulary": {"size": 200},
  "dataset": {
    "frequencies": [1, 2],
    "canaries_per_freq": 3,
    "holdout_size": 16,
    "background_size": 40,
    "validation_size": 4
  },
  "model": {"hidden_dim": 8, "num_layers": 2},
  "training": {"steps": 3, "batch_size": 8, "per_core_batch": 4, "checkpoint_every": 2}
}
"#;

fn memaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memaudit"))
        .args(args)
        .env_remove("MEMAUDIT_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = memaudit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Setup {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Setup {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.json");
        fs::write(&path, config).unwrap();
        let out = tmp.path().join("run");
        Self {
            config: path,
            out,
            _tmp: tmp,
        }
    }

    fn args<'a>(&'a self, cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![
            cmd,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            self.out.to_str().unwrap(),
        ];
        v.extend_from_slice(extra);
        v
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    let p = p.as_ref();
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_is_deterministic_and_lists_groups() {
    let s = Setup::new(SMALL);
    ok(&s.args("generate", &[]));
    let maud = read(s.out.join("dataset/dataset.maud"));
    let manifest = read(s.out.join("dataset/manifest.json"));
    assert_eq!(&maud[..4], b"MAUD");
    let m: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(m["plan"]["frequencies"], serde_json::json!([1, 2]));
    let resolved: serde_json::Value = serde_json::from_slice(&read(s.out.join("config.json"))).unwrap();
    assert!(resolved["model"]["init_seed"].is_u64());
    assert!(resolved.get("threads").is_none());

    ok(&s.args("generate", &[]));
    assert_eq!(read(s.out.join("dataset/dataset.maud")), maud);
    assert_eq!(read(s.out.join("dataset/manifest.json")), manifest);
}

#[test]
fn default_config_has_five_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "generate",
        "--out",
        out.to_str().unwrap(),
        "--holdout-size",
        "20",
    ]);
    let m: serde_json::Value =
        serde_json::from_slice(&read(out.join("dataset/manifest.json"))).unwrap();
    let mut freqs: Vec<u64> = m["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|r| r["frequency"].as_u64())
        .collect();
    freqs.dedup();
    assert_eq!(freqs, [1, 2, 4, 8, 16]);
}

#[test]
fn bad_config_exits_2_naming_the_key() {
    let s = Setup::new(r#"{"training": {"stepz": 3}}"#);
    let out = memaudit(&s.args("generate", &[]));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let s = Setup::new(r#"{"model": {"hidden_dim": -1}}"#);
    let out = memaudit(&s.args("generate", &[]));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.hidden_dim"));
}

#[test]
fn missing_inputs_exit_3() {
    let s = Setup::new(SMALL);
    assert_eq!(code(&memaudit(&s.args("train", &[]))), 3);
    ok(&s.args("generate", &[]));
    assert_eq!(code(&memaudit(&s.args("audit", &[]))), 3);
    assert_eq!(code(&memaudit(&["report", "/nonexistent/audit.json"])), 3);
    assert_eq!(
        code(&memaudit(&["generate", "--config", "/nonexistent/config.json"])),
        3
    );
}

#[test]
fn train_audit_report_pipeline() {
    let s = Setup::new(SMALL);
    ok(&s.args("generate", &[]));
    for clip in ["baseline", "per-example", "per-core"] {
        ok(&s.args("train", &["--clip", clip]));
        ok(&s.args("audit", &["--clip", clip]));
    }
    let dir = s.out.join("train-baseline");
    assert!(dir.join("checkpoint-000002.mckp").exists());
    assert!(dir.join("checkpoint-final.mckp").exists());
    let csv = String::from_utf8(read(dir.join("training_log.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,mean_loss,pre_clip_norm_mean,pre_clip_norm_max,clipped_fraction,wall_ms\n"));

    let audit = s.out.join("audit-baseline");
    let report: serde_json::Value = serde_json::from_slice(&read(audit.join("audit.json"))).unwrap();
    assert_eq!(report["groups"].as_array().unwrap().len(), 2);
    assert_eq!(report["metadata"]["exposure_upper_bound"], 4.0);
    assert_eq!(report["metadata"]["cer_clamped"], false);
    let rows = String::from_utf8(read(audit.join("exposures.csv"))).unwrap();
    assert!(rows.starts_with("canary_id,frequency,cer,rank,exposure\n"));
    let summary = String::from_utf8(read(audit.join("exposure_summary.csv"))).unwrap();
    assert!(summary.starts_with("frequency,mean,std\n"));

    let before = read(audit.join("audit.json"));
    ok(&s.args("audit", &["--clip", "baseline"]));
    assert_eq!(read(audit.join("audit.json")), before);

    let one = ok(&["report", audit.join("audit.json").to_str().unwrap()]);
    let table = String::from_utf8(one.stdout).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().next().unwrap().contains("baseline"));

    let paths: Vec<String> = ["baseline", "per-example", "per-core"]
        .iter()
        .map(|c| s.out.join(format!("audit-{c}/audit.json")).display().to_string())
        .collect();
    let csv_dir = s.out.join("cmp");
    let mut args = vec!["report", "--out", csv_dir.to_str().unwrap()];
    args.extend(paths.iter().map(String::as_str));
    let three = ok(&args);
    let table = String::from_utf8(three.stdout).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["frequency", "baseline", "per-example", "per-core"]);
    assert!(table.lines().last().unwrap().starts_with("upper bound"));
    assert!(csv_dir.join("comparison.csv").exists());
}

#[test]
fn one_step_and_infinite_bound() {
    let config = SMALL.replace(
        r#""steps": 3"#,
        r#""steps": 1, "per_core_bound": "inf", "per_example_bound": "inf""#,
    );
    let s = Setup::new(&config);
    ok(&s.args("generate", &[]));
    for clip in ["per-core", "per-example"] {
        ok(&s.args("train", &["--clip", clip]));
        let csv = String::from_utf8(read(s.out.join(format!("train-{clip}/training_log.csv")))).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].split(',').nth(4), Some("0.0"));
    }
    ok(&s.args("train", &["--clip", "baseline"]));
    let load = |clip: &str| {
        memaudit::model::load_checkpoint(&s.out.join(format!("train-{clip}/checkpoint-final.mckp")))
            .unwrap()
    };
    assert_eq!(load("per-core").params, load("baseline").params);
}

#[test]
fn checkpoint_from_other_dataset_exits_4() {
    let s = Setup::new(SMALL);
    ok(&s.args("generate", &[]));
    ok(&s.args("train", &[]));
    let ckpt = s.out.join("train-baseline/checkpoint-final.mckp");
    let other = s.out.with_file_name("other");
    let base = [
        "--config",
        s.config.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
        "--seed",
        "5",
    ];
    let mut gen = vec!["generate"];
    gen.extend_from_slice(&base);
    ok(&gen);
    let mut audit = vec!["audit", "--checkpoint", ckpt.to_str().unwrap()];
    audit.extend_from_slice(&base);
    assert_eq!(code(&memaudit(&audit)), 4);

    // Training against a dataset generated from another config.
    let mut train = vec!["train"];
    train.extend_from_slice(&base[..4]);
    assert_eq!(code(&memaudit(&train)), 4);
}

#[test]
fn report_with_mismatched_holdout_exits_5() {
    let s = Setup::new(SMALL);
    ok(&s.args("generate", &[]));
    ok(&s.args("train", &[]));
    ok(&s.args("audit", &[]));
    let small = Setup::new(SMALL);
    ok(&small.args("generate", &["--holdout-size", "8"]));
    ok(&small.args("train", &["--holdout-size", "8"]));
    ok(&small.args("audit", &["--holdout-size", "8"]));
    let a = s.out.join("audit-baseline/audit.json");
    let b = small.out.join("audit-baseline/audit.json");
    let report: serde_json::Value = serde_json::from_slice(&read(&b)).unwrap();
    assert_eq!(report["metadata"]["exposure_upper_bound"], 3.0);
    let out = memaudit(&["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 5);
}
