use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pafi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pafi"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pafi(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pafi(dir, args).status.code().unwrap()
}

/// An unpretrained default-size encoder; pretraining is exercised once below.
fn base(dir: &Path) -> PathBuf {
    ok(dir, &["init-model", "--no-pretrain", "--seed", "3", "--out", "base.pfrg"]);
    dir.join("base.pfrg")
}

fn json_value(line: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    v["value"].as_f64().unwrap()
}

#[test]
fn gen_mask_is_deterministic_and_validates_sparsity() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    ok(d, &["gen-mask", "--checkpoint", "base.pfrg", "--out", "a.pfmk"]);
    ok(d, &["gen-mask", "--checkpoint", "base.pfrg", "--out", "b.pfmk"]);
    assert_eq!(fs::read(d.join("a.pfmk")).unwrap(), fs::read(d.join("b.pfmk")).unwrap());
    assert_eq!(code(d, &["gen-mask", "--checkpoint", "base.pfrg", "--sparsity", "1.5", "--out", "c.pfmk"]), 2);
    assert_eq!(code(d, &["gen-mask", "--checkpoint", "base.pfrg", "--selector", "fisher", "--out", "c.pfmk"]), 2);
    assert_eq!(code(d, &["gen-mask", "--checkpoint", "missing.pfrg", "--out", "c.pfmk"]), 3);
    assert_eq!(code(d, &["gen-mask", "--checkpoint", "base.pfrg", "--out", "no/such/dir/m.pfmk"]), 4);
    assert!(d.join("a.manifest.json").exists());
}

#[test]
fn half_percent_mask_selects_half_a_percent_of_eligible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let ckpt = base(d);
    ok(d, &["gen-mask", "--checkpoint", "base.pfrg", "--no-tune-norm", "--sparsity", "0.005", "--out", "m.pfmk"]);
    let mask = pafi_core::mask::deserialize_mask(d.join("m.pfmk")).unwrap();
    let store = pafi_core::checkpoint::load_checkpoint(ckpt).unwrap();
    let eligible = pafi_core::mask::eligible_count(&store, mask.policy);
    let ratio = mask.selected() as f64 / eligible as f64;
    assert!((ratio - 0.005).abs() <= 0.5 / eligible as f64 + 1e-12, "{ratio}");
}

#[test]
fn train_flags_must_match_the_mode() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    assert_eq!(code(d, &["train", "--mode", "pafi", "--checkpoint", "base.pfrg", "--out", "t.pfrg"]), 2);
    assert_eq!(code(d, &["train", "--mode", "adapter", "--checkpoint", "base.pfrg", "--out", "t.pfrg"]), 2);
    assert_eq!(code(d, &["train", "--mode", "warp", "--checkpoint", "base.pfrg", "--out", "t.pfrg"]), 2);
    assert_eq!(code(d, &["train", "--checkpoint", "base.pfrg", "--task", "regression", "--out", "t.pfrg"]), 2);
    assert_eq!(code(d, &["train", "--checkpoint", "base.pfrg", "--lr", "-1", "--out", "t.pfrg"]), 2);
    assert_eq!(code(d, &["train", "--bogus"]), 2);
}

#[test]
fn mask_from_another_checkpoint_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    ok(d, &["init-model", "--no-pretrain", "--seed", "4", "--out", "other.pfrg"]);
    ok(d, &["gen-mask", "--checkpoint", "other.pfrg", "--out", "m.pfmk"]);
    let args = ["train", "--mode", "pafi", "--mask", "m.pfmk", "--checkpoint", "base.pfrg", "--out", "t.pfrg"];
    assert_eq!(code(d, &args), 2);
}

#[test]
fn hiwi_bias_artifact_size_does_not_depend_on_r() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    for r in ["4", "16"] {
        let out = format!("h{r}.pfrg");
        ok(d, &["train", "--mode", "hiwi_bias", "--r", r, "--epochs", "1", "--checkpoint", "base.pfrg", "--out", &out]);
    }
    let len = |p: &str| fs::metadata(d.join(p)).unwrap().len();
    assert_eq!(len("h4.bias.pfrg"), len("h16.bias.pfrg"));
    assert!(len("h4.adapters.pfrg") < len("h16.adapters.pfrg"));
}

#[test]
fn merge_round_trips() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    // a dry run leaves the adapters at their zero-output initialisation
    ok(d, &["train", "--mode", "hiwi_weight", "--r", "2", "--epochs", "0", "--checkpoint", "base.pfrg", "--out", "z.pfrg"]);
    ok(d, &["merge", "--checkpoint", "base.pfrg", "--adapter-weights", "z.adapters.pfrg", "--kind", "hiwi_weight", "--out", "zm.pfrg"]);
    assert_eq!(fs::read(d.join("zm.pfrg")).unwrap(), fs::read(d.join("base.pfrg")).unwrap());

    ok(d, &["train", "--mode", "hiwi_bias", "--r", "4", "--epochs", "2", "--checkpoint", "base.pfrg", "--out", "h.pfrg"]);
    ok(d, &["merge", "--checkpoint", "h.pfrg", "--adapter-weights", "h.adapters.pfrg", "--kind", "hiwi_bias", "--out", "hm.pfrg"]);
    let merged = ok(d, &["eval", "--checkpoint", "hm.pfrg"]);
    let unmerged = ok(d, &["eval", "--checkpoint", "h.pfrg", "--adapter-weights", "h.adapters.pfrg", "--kind", "hiwi_bias"]);
    assert_eq!(json_value(&merged), json_value(&unmerged));
    let names = |p: &str| {
        let s = pafi_core::checkpoint::load_checkpoint(d.join(p)).unwrap();
        s.iter().map(|g| g.name().to_owned()).collect::<Vec<_>>()
    };
    assert_eq!(names("hm.pfrg"), names("base.pfrg"));

    let wrong = ["merge", "--checkpoint", "h.pfrg", "--adapter-weights", "h.adapters.pfrg", "--kind", "lora", "--out", "x.pfrg"];
    assert_eq!(code(d, &wrong), 2);
    let houlsby = ["train", "--mode", "adapter", "--adapter-kind", "adapter", "--r", "2", "--epochs", "0", "--checkpoint", "base.pfrg", "--out", "a.pfrg"];
    ok(d, &houlsby);
    let unmergeable = ["merge", "--checkpoint", "base.pfrg", "--adapter-weights", "a.adapters.pfrg", "--kind", "adapter", "--out", "x.pfrg"];
    assert_eq!(code(d, &unmergeable), 2);
}

#[test]
fn count_params_tables() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let tsv = ok(d, &["count-params", "-V", "50", "-n", "16", "-d", "8", "-L", "2", "-r", "2", "-l", "4", "-m", "4", "--format", "tsv"]);
    let full = tsv.lines().find(|l| l.starts_with("full_ft\t")).unwrap();
    assert!(full.ends_with("\t100\t100"), "{full}");
    assert_eq!(tsv.lines().count(), 11);
    let stored: Vec<String> = ["1", "4", "16", "64"]
        .iter()
        .map(|r| {
            let t = ok(d, &["count-params", "--method", "hiwi_bias", "-V", "50", "-n", "16", "-d", "8", "-L", "2", "-r", r, "--format", "tsv"]);
            t.lines().nth(1).unwrap().split('\t').nth(2).unwrap().to_owned()
        })
        .collect();
    assert!(stored.iter().all(|s| s == "80"), "{stored:?}");
    let out = pafi(d, &["count-params", "--method", "lora", "-V", "50", "-n", "16", "-d", "8", "-L", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`r`"));
}

#[test]
fn eval_reports_metrics_and_load_failures() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    let acc = json_value(&ok(d, &["eval", "--checkpoint", "base.pfrg", "--out", "e.json"]));
    assert!((acc - 0.5).abs() < 0.1, "untrained accuracy {acc}");
    assert!(d.join("e.json").exists() && d.join("e.manifest.json").exists());
    assert_eq!(code(d, &["eval", "--checkpoint", "nope.pfrg"]), 3);
    fs::write(d.join("junk.pfrg"), b"PFRG garbage").unwrap();
    assert_eq!(code(d, &["eval", "--checkpoint", "junk.pfrg"]), 3);
    assert_eq!(code(d, &["eval", "--checkpoint", "base.pfrg", "--metric", "pearson"]), 2);
}

#[test]
fn regression_head_is_evaluated_with_pearson() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["init-model", "--no-pretrain", "--classes", "1", "--out", "reg.pfrg"]);
    let line = ok(d, &["eval", "--checkpoint", "reg.pfrg", "--task", "regression"]);
    assert!(line.contains("\"pearson\""), "{line}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), "[dump-task]\ntrain_size = 5\ndev_size = 3\n").unwrap();
    let tsv = ok(d, &["--config", "c.toml", "dump-task", "--dev-size", "2"]);
    assert_eq!(tsv.lines().count(), 1 + 5 + 2);
    assert!(tsv.starts_with("split\ttokens\tlabel\n"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("pafi-dump-task.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train_size"], 5);
    assert_eq!(manifest["config"]["dev_size"], 2);
    fs::write(d.join("bad.toml"), "[dump-task]\nsize = 5\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.toml", "dump-task"]), 2);
}

#[test]
fn replay_reproduces_outputs_and_notices_changed_inputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    base(d);
    ok(d, &["gen-mask", "--checkpoint", "base.pfrg", "--sparsity", "0.05", "--out", "m.pfmk"]);
    ok(d, &["train", "--mode", "pafi", "--mask", "m.pfmk", "--epochs", "2", "--checkpoint", "base.pfrg", "--out", "p.pfrg"]);
    let before = fs::read(d.join("p.pfrg")).unwrap();
    fs::remove_file(d.join("p.pfrg")).unwrap();
    ok(d, &["replay", "p.manifest.json"]);
    assert_eq!(fs::read(d.join("p.pfrg")).unwrap(), before);
    ok(d, &["init-model", "--no-pretrain", "--seed", "9", "--out", "base.pfrg"]);
    assert_eq!(code(d, &["replay", "p.manifest.json"]), 3);
}

#[test]
fn pretrained_init_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let small = ["--pretrain-size", "128", "--pretrain-epochs", "2"];
    for out in ["a.pfrg", "b.pfrg"] {
        let mut args = vec!["init-model", "--out", out];
        args.extend(small);
        ok(d, &args);
    }
    assert_eq!(fs::read(d.join("a.pfrg")).unwrap(), fs::read(d.join("b.pfrg")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "init-model");
    assert_eq!(m["config"]["pretrain"], true);
}
