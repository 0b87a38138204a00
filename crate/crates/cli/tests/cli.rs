use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
preset = "mixtral-like"
seed = 2

[prompts]
n_templates = 2
n_professions = 2
surfaces_per_group = 1
n_facts = 4

[pipeline]
lambda_grid = [0.0, 1.0]
mask_group_size = 2
n_perm = 100
n_boot = 50
random_seeds = [0]
"#;

fn farelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_farelab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run(cfg: &str, out: &Path, stage: &str) -> Output {
    farelab(&["--config", cfg, "--out-dir", out.to_str().unwrap(), "--stage", stage])
}

#[test]
fn help_and_bad_flags() {
    assert!(farelab(&["--help"]).status.success());
    assert!(!farelab(&[]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = farelab(&["--config", &cfg, "--stage", "polish"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown stage"), "{}", stderr(&o));
}

#[test]
fn stage_out_of_order_fails_with_the_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = run(&cfg, &dir.path().join("run"), "profile");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run stage `extract` first"), "{}", stderr(&o));
}

#[test]
fn config_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("n_perm = 100", "n_perm = 0"));
    let o = run(&cfg, &dir.path().join("run"), "generate");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_perm"), "{}", stderr(&o));
    let o = run(&dir.path().join("missing.toml").display().to_string(), dir.path(), "generate");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn stages_chain_and_corruption_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    for stage in ["generate", "extract"] {
        let o = run(&cfg, &out, stage);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with(stage));
    }
    let manifest = std::fs::read_to_string(out.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("\"extract\""));
    let log = out.join("routing_log.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    std::fs::write(&log, &text[..text.len() / 2]).unwrap();
    let o = run(&cfg, &out, "profile");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("parse error"), "{}", stderr(&o));
}

#[test]
fn seed_override_changes_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    assert!(run(&cfg, &out, "generate").status.success());
    let o = farelab(&["--config", &cfg, "--out-dir", out.to_str().unwrap(), "--seed", "5", "--stage", "generate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("produced by config"), "{}", stderr(&o));
}
