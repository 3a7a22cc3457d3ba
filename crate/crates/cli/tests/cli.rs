use std::path::Path;
use std::process::{Command, Output};

const TINY_PLAN: &str = r#"
init_seed = 3

[dims]
d_model = 16
n_heads = 2
d_ff = 32
n_enc_layers = 1
n_dec_layers = 1

[[phases]]
mix = { size = 60, seed = 1 }
train = { epochs = 1, batch_size = 8 }
"#;

const TINY_STREAM: &str = r#"
method = "lfpt5"
seeds = [0, 1]
shots = 2
summary_shots = 4
steps_per_stage = 3
batch_size = 4
validations_per_stage = 1
prompt_len = 3
eval_max_len = 5
eval_limit = 4

[pseudo]
attempts_per_target = 1
max_len = 8

[[stages]]
task_type = "classification"
domain = "news"

[[stages]]
task_type = "classification"
domain = "wiki"
"#;

fn lplab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lplab")).arg("--out-dir").arg(out).args(args).output().unwrap()
}

fn setup() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    let stream = dir.path().join("stream.toml");
    std::fs::write(&plan, TINY_PLAN).unwrap();
    std::fs::write(&stream, TINY_STREAM).unwrap();
    (dir, plan.to_str().unwrap().to_string(), stream.to_str().unwrap().to_string())
}

fn pretrain(out: &Path, plan: &str) {
    let o = lplab(out, &["pretrain", "--config", plan]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn checksum(path: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["checksum"].as_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lplab(dir.path(), &["run", "--config", "/nonexistent/stream.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = lplab(dir.path(), &["pretrain", "--config", "/nonexistent/plan.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_and_unknown_toggle_are_config_errors() {
    let (dir, _, stream) = setup();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "method = \"pt\"\nsteps = 3\n").unwrap();
    assert_eq!(lplab(dir.path(), &["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(lplab(dir.path(), &["ablate", "--config", &stream, "--toggle", "no_such"]).status.code(), Some(2));
    assert_eq!(lplab(dir.path(), &["run", "--config", &stream]).status.code(), Some(2), "no backbone yet");
}

#[test]
fn pretraining_is_reproducible_and_tampering_is_caught() {
    let (dir, plan, stream) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pretrain(&a, &plan);
    pretrain(&b, &plan);
    assert_eq!(checksum(&a.join("backbone.json")), checksum(&b.join("backbone.json")));
    assert!(a.join("manifest.json").exists());
    let model = a.join("backbone.json");
    let text = std::fs::read_to_string(&model).unwrap();
    std::fs::write(&model, text.replacen("0.", "2.", 1)).unwrap();
    let o = lplab(&a, &["run", "--config", &stream]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn runs_write_per_seed_records_and_reproducible_aggregates() {
    let (dir, plan, stream) = setup();
    let out = dir.path().join("out");
    pretrain(&out, &plan);
    let o = lplab(&out, &["run", "--config", &stream, "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = out.join("lfpt5");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    let digest = manifest["digest"].as_str().unwrap().to_string();
    for seed in [0, 1] {
        let text = std::fs::read_to_string(run_dir.join(format!("seed-{seed}.jsonl"))).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l["manifest"] == digest.as_str() && l["seed"] == seed));
        assert!(run_dir.join(format!("prompts-seed-{seed}.json")).exists());
    }
    let tsv = std::fs::read_to_string(run_dir.join("aggregate.tsv")).unwrap();
    assert!(tsv.starts_with(&format!("# manifest {digest}\n")));
    assert!(std::fs::read_to_string(run_dir.join("plot.tsv")).unwrap().starts_with(&format!("# manifest {digest}\n")));
    let o = lplab(&out, &["run", "--config", &stream, "--workers", "1"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(run_dir.join("aggregate.tsv")).unwrap(), tsv);
}

#[test]
fn multitask_runs_have_a_single_stage() {
    let (dir, plan, stream) = setup();
    let out = dir.path().join("out");
    pretrain(&out, &plan);
    let o = lplab(&out, &["run", "--config", &stream, "--method", "mt-pt", "--seeds", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plot = std::fs::read_to_string(out.join("mt-pt/plot.tsv")).unwrap();
    let stages: Vec<&str> = plot.lines().skip(2).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(stages, vec!["0", "0"]);
    assert_eq!(std::fs::read_to_string(out.join("mt-pt/seed-4.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn ablations_write_to_their_own_directory() {
    let (dir, plan, stream) = setup();
    let out = dir.path().join("out");
    pretrain(&out, &plan);
    let o = lplab(&out, &["ablate", "--config", &stream, "--toggle", "no_kl", "--seeds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("lfpt5-no_kl/aggregate.tsv").exists());
}

#[test]
fn gen_data_writes_every_split() {
    let (dir, _, stream) = setup();
    let out = dir.path().join("out");
    let o = lplab(&out, &["gen-data", "--config", &stream, "--seeds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for d in ["news", "wiki"] {
        for s in ["train", "valid", "test"] {
            let p = out.join(format!("data/seed-0/{d}/{s}.jsonl"));
            assert!(!lplab_core::format::read_dataset(&p).unwrap().is_empty());
        }
    }
}

#[test]
fn out_dir_defaults_from_the_environment() {
    let (dir, _, stream) = setup();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_lplab"))
        .env("LPLAB_OUT_DIR", &out)
        .args(["gen-data", "--config", &stream, "--seeds", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("data/seed-1/news/train.jsonl").exists());
    let help = Command::new(env!("CARGO_BIN_EXE_lplab")).args(["run", "--help"]).output().unwrap();
    let help = String::from_utf8_lossy(&help.stdout);
    for flag in ["--config", "--seeds", "--method", "--out-dir", "--workers", "--backbone", "LPLAB_OUT_DIR"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}
