use std::path::Path;
use std::process::{Command, Output};

fn dmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmf")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
model = "micro"
steps = 3
batch_size = 4
lr = 0.002
min_lr = 0.00001
warmup_steps = 1
weight_decay = 0.05
beta1 = 0.9
beta2 = 0.999
ema_momentum = 0.9
tau_start = 30.0
label_smoothing = 0.0
seed = 0
val_samples = 8
checkpoint_every = 0
prefetch = 0

[dataset]
image_size = 16
classes = 4
samples = 16
seed = 0
"#;

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn flops_prints_total() {
    let o = dmf(&["flops", "--model", "dmf-s"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("total: 499.7M MACs"), "{}", stdout(&o));
}

#[test]
fn flops_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dmf(&["flops", "--model", "micro", "--size", "32", "--out", out]);
    assert!(o.status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("flops.json")).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn gradcheck_primitive_passes() {
    let o = dmf(&["gradcheck", "--scope", "primitive"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn unknown_scope_is_an_error() {
    let o = dmf(&["gradcheck", "--scope", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dataset_gen_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    let o = dmf(&["dataset-gen", "--config", &cfg, "--out", out.to_str().unwrap(), "--with-val"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for split in ["train", "val"] {
        let d = out.join(split);
        assert!(std::fs::read_dir(&d).unwrap().count() > 0, "{split} is empty");
    }
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = dmf(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--steps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());
    for extra in [&[][..], &["--ema"][..]] {
        let mut args = vec!["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = dmf(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(json["step"], 2);
        let acc = json["val_acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn train_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = dmf(&["train", "--config", &cfg, "--steps", "1", "--f64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "steps = \"many\"\n").unwrap();
    let o = dmf(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let o = dmf(&["eval", "--checkpoint", "/nonexistent/final.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}
