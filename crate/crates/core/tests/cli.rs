use std::path::Path;
use std::process::Command;

use litevlm::pipeline::{BenchReport, PipelineConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_litevlm"))
}

fn run(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = bin().arg("--workdir").arg(dir).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn tiny_config(dir: &Path) {
    let mut c = PipelineConfig::tiny();
    c.max_new = 4;
    std::fs::write(dir.join("cfg.json"), c.to_json()).unwrap();
}

#[test]
fn every_flag_is_documented() {
    let mut cmd = litevlm::cli::command();
    cmd.build();
    let mut subs = vec![cmd.clone()];
    subs.extend(cmd.get_subcommands().filter(|s| s.get_name() != "help").cloned());
    assert_eq!(subs.len(), 8);
    for sub in subs {
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{id} has no help", sub.get_name());
        }
        let mut sub = sub;
        let help = sub.render_help().to_string();
        for arg in sub.get_arguments().filter_map(|a| a.get_long()) {
            assert!(help.contains(&format!("--{arg}")), "{} help lacks --{arg}", sub.get_name());
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).0, 0);
    assert_eq!(run(dir.path(), &["bench", "--help"]).0, 0);
    assert_eq!(run(dir.path(), &["bench", "--no-such-flag"]).0, 1);
    assert_eq!(run(dir.path(), &["frobnicate"]).0, 1);
    assert_eq!(run(dir.path(), &["synth", "--scenes", "many"]).0, 1);
    // Runtime failure: no corpus to read.
    let (code, _, err) = run(dir.path(), &["bench", "--init-missing"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn synth_bench_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, out, err) = run(d, &["--seed", "7", "synth", "--scenes", "10", "--queries", "3", "--out", "data"]);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("seed: 7"), "{err}");
    assert!(out.contains("train"));
    assert!(d.join("data/train.lvcs").exists() && d.join("data/val.lvcs").exists());

    tiny_config(d);
    // Without parameter files the error names the missing role.
    let (code, _, err) = run(d, &["bench", "--config", "cfg.json", "--variants", "baseline"]);
    assert_eq!(code, 2);
    assert!(err.contains("`vit.`"), "{err}");

    let args = [
        "--seed", "7", "bench", "--config", "cfg.json", "--init-missing", "--variants", "baseline,fastv@0.7,litevlm",
        "--limit", "2", "--out", "out/report.json",
    ];
    let (code, _, err) = run(d, &args);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("\"variant\""), "resolved config printed: {err}");
    let report = BenchReport::from_json(&std::fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.seed, 7);
    assert_eq!(report.rows[0].speedup, 1.0);

    let (code, md, _) = run(d, &["report", "--input", "out/report.json", "--format", "markdown"]);
    assert_eq!(code, 0);
    assert_eq!(md.lines().count(), 5);
    let (code, _, _) = run(d, &["report", "--input", "out/report.json", "--format", "csv", "--out", "out/r.csv"]);
    assert_eq!(code, 0);
    let rows = litevlm::pipeline::report::rows_from_csv(&std::fs::read_to_string(d.join("out/r.csv")).unwrap()).unwrap();
    assert_eq!(rows, report.rows);

    // More workers, same report.
    let mut threaded = args.to_vec();
    threaded.splice(0..0, ["--threads", "3"]);
    *threaded.last_mut().unwrap() = "out/threaded.json";
    assert_eq!(run(d, &threaded).0, 0);
    assert_eq!(
        std::fs::read(d.join("out/report.json")).unwrap(),
        std::fs::read(d.join("out/threaded.json")).unwrap()
    );
}

#[test]
fn training_commands_write_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["synth", "--scenes", "12", "--queries", "2"]).0, 0);
    tiny_config(d);
    let (code, out, err) = run(d, &["train-patchsel", "--config", "cfg.json", "--steps", "20", "--log", "ps.jsonl"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("macro_f1"));
    assert_eq!(std::fs::read_to_string(d.join("ps.jsonl")).unwrap().lines().count(), 20);

    let (code, out, err) = run(
        d,
        &["distill-draft", "--config", "cfg.json", "--init-missing", "--steps", "10", "--target-steps", "5", "--samples", "8"],
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("accepted_per_iteration"));

    let (code, _, err) = run(d, &["train-toksel", "--config", "cfg.json", "--init-missing", "--steps", "3", "--samples", "1"]);
    assert_eq!(code, 0, "{err}");
    for role in ["patchsel", "llm", "draft", "toksel"] {
        assert!(d.join(format!("params/{role}.lvlm")).exists(), "{role}");
    }
    // The trained parameters are picked up without --init-missing except for vit.
    let (code, _, err) = run(d, &["bench", "--config", "cfg.json", "--variants", "litevlm", "--limit", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("`vit.`"), "{err}");
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run(dir.path(), &["verify", "--prompts", "5"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("[PASS] speculative losslessness"));
    assert!(!out.contains("[FAIL]"));
}
