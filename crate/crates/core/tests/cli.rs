use std::path::Path;
use std::process::Command;

use clap::Parser;
use mmict::cli::{self, Cli};
use mmict::config::RunConfig;
use mmict::Error;

fn tiny(dir: &Path) -> Vec<String> {
    let d = dir.display();
    vec![
        format!("data_dir={d}/data"),
        format!("lm_path={d}/lm.ckpt"),
        format!("checkpoint={d}/model.ckpt"),
        format!("out_dir={d}/out"),
        "n_f=2".into(),
        "train_samples=24".into(),
        "val_samples=4".into(),
        "test_samples=6".into(),
        "n_q=4".into(),
        "hub_blocks=1".into(),
        "lm_layers=1".into(),
        "pretrain.steps=3".into(),
        "pretrain.batch_size=2".into(),
        "pretrain.warmup_steps=1".into(),
        "epochs=1".into(),
        "warmup_steps=2".into(),
        "max_new_tokens=6".into(),
        "beam_width=2".into(),
    ]
}

fn run(cmd: &str, sets: &[String]) -> mmict::Result<String> {
    let mut argv = vec!["mmict".to_string(), cmd.to_string()];
    for s in sets {
        argv.push("--set".into());
        argv.push(s.clone());
    }
    cli::run(Cli::try_parse_from(argv).expect("valid arguments"))
}

fn with(base: &[String], extra: &[&str]) -> Vec<String> {
    let mut v = base.to_vec();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    run("gen-data", &base).unwrap();
    run("pretrain-lm", &base).unwrap();
    let summary = run("train", &base).unwrap();
    assert!(summary.contains("epoch"));
    let table = run("eval", &base).unwrap();
    assert!(table.contains("mmict"));
    let report = std::fs::read_to_string(dir.path().join("out/eval_report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1 + 6);

    let text = run("inspect", &with(&base, &["n_e=2"])).unwrap();
    assert!(text.contains("5 soft segments"), "{text}");
    let soft: Vec<&str> = text.lines().skip(1).take(5).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(soft, ["T^c", "EOC", "T^c", "EOC", "V^d"]);
}

#[test]
fn ablate_shared_cell_matches_standalone_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    run("gen-data", &base).unwrap();
    run("pretrain-lm", &base).unwrap();
    let sweep = with(&base, &["sweep.variant=mmict", "sweep.n_e=0,1,2", "sweep.strategy=random"]);
    let table = run("ablate", &sweep).unwrap();
    assert_eq!(table.lines().count(), 1 + 3, "{table}");
    let rows = std::fs::read_to_string(dir.path().join("out/ablate.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 3);

    let standalone = with(&base, &["variant=mmict", "n_e=2", "strategy=random"]);
    run("train", &standalone).unwrap();
    run("eval", &standalone).unwrap();
    let alone = std::fs::read_to_string(dir.path().join("out/eval_report.jsonl")).unwrap();
    let cell = std::fs::read_to_string(dir.path().join("out/mmict-ne2-random/eval_report.jsonl")).unwrap();
    assert_eq!(alone, cell);
}

#[test]
fn eval_without_demos_uses_the_bare_query_context() {
    let cfg = RunConfig::load(None, &["with_demos=false".into()]).unwrap();
    assert!(!cfg.eval_config().with_demos);
}

#[test]
fn usage_errors_exit_non_zero() {
    let bin = env!("CARGO_BIN_EXE_mmict");
    let out = Command::new(bin).arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(bin).args(["show-config", "--bogus"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(bin).args(["show-config", "--set", "nope=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).args(["show-config", "--set", "n_e=3"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("n_e = 3"));
    assert!(matches!(run("train", &["data_dir=/nonexistent".into()]), Err(Error::Usage(_))));
}
