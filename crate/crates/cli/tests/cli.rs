use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brokenbind::manifest::RunManifest;

const SMALL: &str = r#"
seed = 3

[data]
latent_dim = 3
num_classes = 4
center_scale = 1.0
within_class_std = 0.4
num_samples = 96
test_samples = 32
views = [
  { modality = "te", raw_dim = 6, nonlinearity = "tanh", noise_std = 0.1 },
  { modality = "vi", raw_dim = 5, nonlinearity = "tanh", noise_std = 0.1 },
  { modality = "ta", raw_dim = 7, nonlinearity = "tanh", noise_std = 0.1 },
]
datasets = [
  { id = "d1", observable = ["te", "vi"], hidden_target = "ta" },
  { id = "d2", observable = ["vi", "ta"], shift = 1.0 },
]

[model]
hidden_dim = 8
embed_dim = 8

[train]
epochs = 6
pretrain_epochs = 3
stage1_epochs = 1
batch_size = 8

[train.weights]
fro = 0.01

[eval]
flow = "te-vi-ta"
seeds = [0, 1]
arms = ["full", "clip_only"]
pretrain_sweep = [0, 3, 6]
"#;

const THREE: &str = r#"
seed = 5

[data]
latent_dim = 3
num_classes = 4
center_scale = 1.0
within_class_std = 0.4
num_samples = 72
test_samples = 24
views = [
  { modality = "te", raw_dim = 6, noise_std = 0.1 },
  { modality = "vi", raw_dim = 5, noise_std = 0.1 },
  { modality = "ta", raw_dim = 7, noise_std = 0.1 },
]
datasets = [
  { id = "d1", observable = ["te"], hidden_target = "ta" },
  { id = "d2", observable = ["te", "vi"] },
  { id = "d3", observable = ["vi", "ta"], shift = 1.0 },
]

[model]
hidden_dim = 8
embed_dim = 8

[train]
epochs = 3
pretrain_epochs = 1
stage1_epochs = 1
batch_size = 12

[eval]
flow = "te-vi-ta"
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Env { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

fn bb(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    bb_env(args, &[])
}

fn bb_env(args: &[&dyn AsRef<std::ffi::OsStr>], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_brokenbind"));
    c.env("RUST_LOG", "warn").env_remove("BB_THREADS");
    for a in args {
        c.arg(a);
    }
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(env: &Env, cfg: &Path, out: &str) -> PathBuf {
    let out = env.path(out);
    ok(bb(&[&"generate", &"--config", &cfg, &"--out", &out]));
    out
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    RunManifest::load(dir).unwrap().files.into_iter().map(|f| (f.path, f.sha256)).collect()
}

#[test]
fn generate_is_deterministic_and_seed_sensitive() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let a = generate(&env, &cfg, "a");
    let b = generate(&env, &cfg, "b");
    let da = digests(&a);
    assert_eq!(da.len(), 4);
    assert_eq!(da, digests(&b));
    let c = env.path("c");
    ok(bb(&[&"generate", &"--config", &cfg, &"--out", &c, &"--seed", &"4"]));
    assert_ne!(da, digests(&c));
    let m = RunManifest::load(&a).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.config_hash.len(), 64);
    assert!(m.verify(&a).unwrap().is_empty());
}

#[test]
fn missing_view_is_a_config_error_naming_the_field() {
    let env = Env::new();
    let bad = SMALL.replace("  { modality = \"ta\", raw_dim = 7, nonlinearity = \"tanh\", noise_std = 0.1 },\n", "");
    let cfg = env.config("bad.toml", &bad);
    let o = bb(&[&"generate", &"--config", &cfg, &"--out", &env.path("x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.datasets[0].hidden_target"), "{}", stderr(&o));
}

#[test]
fn toml_syntax_error_reports_line() {
    let env = Env::new();
    let cfg = env.config("bad.toml", &SMALL.replace("latent_dim = 3", "latent_dim = = 3"));
    let o = bb(&[&"generate", &"--config", &cfg, &"--out", &env.path("x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn train_resume_and_eval() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let data = generate(&env, &cfg, "data");
    let full = env.path("full");
    ok(bb(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &full]));
    let part = env.path("part");
    ok(bb(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &part, &"--stop-after", &"2"]));
    let log = std::fs::read_to_string(part.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    ok(bb(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &part, &"--resume"]));
    assert_eq!(digests(&full), digests(&part));

    let ckpt = full.join("checkpoint.bbckpt");
    let ev = env.path("eval");
    let o = ok(bb(&[&"eval", &"--config", &cfg, &"--checkpoint", &ckpt, &"--data", &data, &"--out", &ev]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("te-vi-ta mAP"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    for key in ["flow", "map", "n_queries", "seed", "arm"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert_eq!(summary["n_queries"], 32);

    // queries + gallery + pseudo rows (32 test rows, fidelity block 8).
    let proj = std::fs::read_to_string(ev.join("projection.csv")).unwrap();
    let lines: Vec<&str> = proj.lines().collect();
    assert_eq!(lines[0], "x,y,label");
    assert_eq!(lines.len() - 1, 32 * 3);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    let ret = std::fs::read_to_string(ev.join("retrieval.csv")).unwrap();
    assert_eq!(ret.lines().next(), Some("query_index,label,ap"));
    assert_eq!(ret.lines().count(), 33);
}

#[test]
fn invalid_flow_reports_position() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let data = generate(&env, &cfg, "data");
    let run = env.path("run");
    ok(bb(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &run, &"--stop-after", &"1"]));
    let o = bb(&[&"eval", &"--config", &cfg, &"--checkpoint", &run.join("checkpoint.bbckpt"), &"--data", &data, &"--out", &env.path("e"), &"--flow", &"te-vi-t@"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("position 7"), "{}", stderr(&o));
}

#[test]
fn modality_pattern_mismatch_fails_before_training() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let data = generate(&env, &cfg, "data");
    let three = env.config("three.toml", THREE);
    let out = env.path("run");
    let o = bb(&[&"train", &"--config", &three, &"--data", &data, &"--out", &out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("modality pattern"), "{}", stderr(&o));
    assert!(!out.join("checkpoint.bbckpt").exists());
}

#[test]
fn missing_data_file_is_a_data_error() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let o = bb(&[&"train", &"--config", &cfg, &"--data", &env.path("nowhere"), &"--out", &env.path("run")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn three_dataset_log_has_both_stages() {
    let env = Env::new();
    let cfg = env.config("three.toml", THREE);
    let data = generate(&env, &cfg, "data");
    let run = env.path("run");
    ok(bb(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &run]));
    let stages: Vec<String> = std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(stages, ["A", "A", "A", "B", "B", "B"]);
    let ev = env.path("eval");
    ok(bb(&[&"eval", &"--config", &cfg, &"--checkpoint", &run.join("checkpoint.bbckpt"), &"--data", &data, &"--out", &ev]));
    let proj = std::fs::read_to_string(ev.join("projection.csv")).unwrap();
    assert_eq!(proj.lines().count() - 1, 24 * 2);
}

#[test]
fn ablate_output_does_not_depend_on_thread_count() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let (one, two) = (env.path("one"), env.path("two"));
    ok(bb_env(&[&"ablate", &"--config", &cfg, &"--out", &one], &[("BB_THREADS", "1")]));
    ok(bb_env(&[&"ablate", &"--config", &cfg, &"--out", &two], &[("BB_THREADS", "3")]));
    assert_eq!(digests(&one), digests(&two));
    let runs = std::fs::read_to_string(one.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 2);
    let bad = bb_env(&[&"ablate", &"--config", &cfg, &"--out", &env.path("x")], &[("BB_THREADS", "zero")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sweep_and_export() {
    let env = Env::new();
    let cfg = env.config("small.toml", SMALL);
    let sw = env.path("sweep");
    ok(bb(&[&"sweep", &"--config", &cfg, &"--out", &sw, &"--seeds", &"0"]));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sw.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(doc["points"].as_array().unwrap().len(), 3);
    assert!(doc["interior_is_best"].is_boolean());

    let data = generate(&env, &cfg, "data");
    let ex = env.path("csv");
    ok(bb(&[&"export", &"--config", &cfg, &"--data", &data, &"--out", &ex]));
    let text = std::fs::read_to_string(ex.join("d1.test.csv")).unwrap();
    assert_eq!(text.lines().count(), 33);
    assert!(text.lines().next().unwrap().starts_with("label,z0,z1,z2,te_0"));
}
