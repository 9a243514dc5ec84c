use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "synthetic": {"n_pretrain_texts": 2000, "n_pairs": 400, "n_eval_images": 50},
  "train": {"batch_pretrain": 128, "batch_xbt": 64},
  "eval": {"ks": [1, 5, 10]}
}"#;

fn xbt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xbt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn xbt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xbt(dir, args);
    assert!(
        out.status.success(),
        "xbt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), config).unwrap();
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_synth_writes_a_valid_corpus() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(p, &["gen-synth", "--config", "c.json", "--out", "d"]);
    let manifest = read_json(&p.join("d/manifest.json"));
    let files = manifest["embedding_files"].as_array().unwrap();
    assert_eq!(files.len(), 10);
    for f in files {
        let bytes = fs::read(p.join("d").join(f.as_str().unwrap())).unwrap();
        assert_eq!(&bytes[..4], b"XBTE");
    }
    for f in ["train_pairing.json", "eval_pairing.json"] {
        assert!(read_json(&p.join("d").join(f))["pair_of"].is_array());
    }
}

#[test]
fn gen_synth_is_byte_identical_for_a_seed() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(p, &["gen-synth", "--config", "c.json", "--out", "a"]);
    ok(p, &["gen-synth", "--config", "c.json", "--out", "b"]);
    for entry in fs::read_dir(p.join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(p.join("a").join(&name)).unwrap(),
            fs::read(p.join("b").join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let ws = workspace(r#"{"train": {"sigmma": 0.1}}"#);
    let out = xbt(
        ws.path(),
        &["gen-synth", "--config", "c.json", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmma"));
    assert!(!ws.path().join("d").exists());
}

#[test]
fn missing_inputs_exit_3() {
    let ws = workspace(SMALL);
    let out = xbt(
        ws.path(),
        &["pretrain", "--data", "nowhere", "--out", "p.xbtc"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!ws.path().join("p.xbtc").exists());
}

#[test]
fn diverging_training_exits_4() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(p, &["gen-synth", "--config", "c.json", "--out", "d"]);
    let cfg = SMALL.replace(
        r#""batch_pretrain": 128"#,
        r#""batch_pretrain": 128, "lr": 1e30"#,
    );
    fs::write(p.join("big.json"), cfg).unwrap();
    let out = xbt(
        p,
        &[
            "pretrain", "--config", "big.json", "--data", "d", "--out", "p.xbtc",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(!p.join("p.xbtc").exists());
}

#[test]
fn train_xbt_requires_a_pretrained_projection() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(p, &["gen-synth", "--config", "c.json", "--out", "d"]);
    let out = xbt(
        p,
        &[
            "train-xbt",
            "--config",
            "c.json",
            "--data",
            "d",
            "--out",
            "x.xbtc",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("XBT requires pretrained φ"));
}

#[test]
fn staged_commands_produce_logs_checkpoints_and_reports() {
    let ws = workspace(SMALL);
    let p = ws.path();
    let c = ["--config", "c.json", "--data", "d"];
    ok(p, &["gen-synth", "--config", "c.json", "--out", "d"]);
    ok(p, &[&["pretrain"][..], &c, &["--out", "phi.xbtc"]].concat());
    ok(
        p,
        &[
            &["train-xbt"][..],
            &c,
            &["--phi", "phi.xbtc", "--out", "x.xbtc"],
        ]
        .concat(),
    );
    ok(
        p,
        &[
            &["train-direct"][..],
            &c,
            &["--policy", "base", "--out", "b.xbtc"],
        ]
        .concat(),
    );

    let log = fs::read_to_string(p.join("phi.xbtc.log.jsonl")).unwrap();
    let entry: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let last = entry["steps"].as_array().unwrap().last().unwrap()["loss"]
        .as_f64()
        .unwrap();
    assert!(last.is_finite());

    ok(
        p,
        &[&["eval"][..], &c, &["--ckpt", "x.xbtc", "--out", "r1.json"]].concat(),
    );
    ok(
        p,
        &[&["eval"][..], &c, &["--ckpt", "x.xbtc", "--out", "r2.json"]].concat(),
    );
    assert_eq!(
        fs::read(p.join("r1.json")).unwrap(),
        fs::read(p.join("r2.json")).unwrap()
    );
    assert!(p.join("r1.csv").exists());

    let report = read_json(&p.join("r1.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["config"]["train"]["batch_xbt"], 64);
    // Defaults not named in c.json are echoed too.
    assert!(report["config"]["train"]["weight_decay"].is_number());
}

#[test]
fn adapters_removed_case_matches_raw_new_retrieval() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(p, &["gen-synth", "--config", "c.json", "--out", "d"]);
    ok(
        p,
        &[
            "pretrain", "--config", "c.json", "--data", "d", "--out", "phi.xbtc",
        ],
    );
    ok(
        p,
        &[
            "eval", "--config", "c.json", "--data", "d", "--ckpt", "phi.xbtc", "--out", "r.json",
        ],
    );
    let report = read_json(&p.join("r.json"));
    let cases = report["cases"].as_array().unwrap();
    let find = |name: &str| cases.iter().find(|c| c["name"] == name).unwrap().clone();
    // Untrained adapters are identities, so adapted retrieval equals raw retrieval.
    assert_eq!(
        find("wadapt_new/vadapt_new")["recall"],
        find("w_new/v_new")["recall"]
    );
    assert_eq!(
        find("vadapt_new/wadapt_new")["recall"],
        find("v_new/w_new")["recall"]
    );
}

#[test]
fn compare_reproduces_xbt_ahead_of_direct_baseline() {
    let ws = workspace("{}");
    let p = ws.path();
    let c = ["--config", "c.json", "--data", "d"];
    ok(p, &["gen-synth", "--config", "c.json", "--out", "d"]);
    ok(p, &[&["pretrain"][..], &c, &["--out", "phi.xbtc"]].concat());
    ok(
        p,
        &[
            &["train-xbt"][..],
            &c,
            &["--phi", "phi.xbtc", "--out", "x.xbtc"],
        ]
        .concat(),
    );
    ok(
        p,
        &[
            &["train-direct"][..],
            &c,
            &["--policy", "base", "--out", "b.xbtc"],
        ]
        .concat(),
    );
    ok(
        p,
        &[
            &["compare"][..],
            &c,
            &["--xbt", "x.xbtc", "--direct", "b.xbtc", "--out", "cmp.json"],
        ]
        .concat(),
    );
    let cmp = read_json(&p.join("cmp.json"));
    assert_eq!(cmp["xbt_ahead"], true, "{cmp}");
}

#[test]
fn ablate_emits_one_report_per_setting_and_seed() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(
        p,
        &[
            "ablate",
            "--config",
            "c.json",
            "--sweep",
            "sigma=0,0.1",
            "--seeds",
            "0..1",
            "--out",
            "ab",
        ],
    );
    let reports = fs::read_dir(p.join("ab"))
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().into_string().unwrap();
            name.starts_with("sigma=") && name.ends_with(".json")
        })
        .count();
    assert_eq!(reports, 4);
    let summary = read_json(&p.join("ab/summary.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn single_value_single_seed_ablation_equals_a_plain_run() {
    let ws = workspace(SMALL);
    let p = ws.path();
    ok(
        p,
        &[
            "ablate",
            "--config",
            "c.json",
            "--sweep",
            "sigma=0.1",
            "--seeds",
            "0",
            "--out",
            "ab",
        ],
    );
    ok(p, &["run", "--config", "c.json", "--out", "run"]);
    assert_eq!(
        fs::read(p.join("ab/sigma=0.1_seed0.json")).unwrap(),
        fs::read(p.join("run/report.json")).unwrap()
    );
}

#[test]
fn continual_writes_one_report_per_stage() {
    let ws = workspace(SMALL);
    let p = ws.path();
    let stdout = ok(
        p,
        &[
            "continual",
            "--config",
            "c.json",
            "--generations",
            "3",
            "--out",
            "ch",
        ],
    );
    assert_eq!(stdout.lines().count(), 2);
    for s in [1, 2] {
        assert!(p.join(format!("ch/stage{s}_report.json")).exists());
        assert!(p.join(format!("ch/stage{s}.xbtc")).exists());
    }
    assert!(!p.join("ch/stage1_vs_prev_report.json").exists());
    assert!(p.join("ch/stage2_vs_prev_report.json").exists());
}
