use std::path::Path;
use std::process::Command;

fn oneshot(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_oneshot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"{
  "phantom": {"shape": [16, 32, 32]},
  "subjects": {"unlabeled": 1, "validation": 0, "test": 1},
  "scribble": {"points_per_class": 4},
  "prnet": {"patch_size": [16, 16, 16], "encoder_channels": [2, 2, 4, 4], "decoder_channels": [4, 2, 2, 2]},
  "prnet_train": {"epochs": 1, "iters_per_epoch": 1, "batch": 1},
  "seg": {"depth": 2, "base_channels": 2, "crop": [8, 16, 16], "epochs": 1, "crops_per_epoch": 4, "batch": 4}
}"#;

#[test]
fn help_lists_every_subcommand() {
    let out = oneshot(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["phantom-gen", "train-prnet", "propagate", "geos", "train-seg", "evaluate", "pipeline", "sweep-tau"] {
        assert!(text.contains(cmd), "missing {cmd} in:\n{text}");
    }
}

#[test]
fn stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"];
    for stage in ["phantom-gen", "train-prnet", "propagate", "geos", "train-seg", "evaluate", "sweep-tau"] {
        let mut args = vec![stage];
        args.extend(common);
        let o = oneshot(&args);
        assert!(o.status.success(), "{stage} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["config.json", "data/split.json", "prnet/prnet.json", "propagation/audit.json", "report.json", "report.csv", "sweep_tau.csv"] {
        assert!(Path::new(&out).join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("stage,class_1,class_2,mean\npseudo_mask,"), "{csv}");
    assert_eq!(std::fs::read_to_string(out.join("sweep_tau.csv")).unwrap().lines().count(), 4);
}

#[test]
fn failures_exit_nonzero_with_the_stage_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = oneshot(&["train-prnet", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage `train-prnet` failed"), "{err}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"geos": {"neighborhood": 7}}"#).unwrap();
    let o = oneshot(&["pipeline", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("[config]"));
}
