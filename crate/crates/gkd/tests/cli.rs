use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = include_str!("common_tiny.toml");

fn gkd(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_gkd"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .env_remove("GKD_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_p1_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = gkd(tmp.path(), &["--phases", "P1", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (read_tree(&a.join("P1")), read_tree(&b.join("P1")));
    assert!(ta.iter().any(|(n, _)| n.ends_with(".bin")));
    assert_eq!(ta, tb);
}

#[test]
fn p4_without_p3_names_the_missing_phase() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = gkd(tmp.path(), &["--phases", "P1,P2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gkd(tmp.path(), &["--phases", "P4", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let rec: serde_json::Value = serde_json::from_str(stderr(&o).trim().lines().last().unwrap()).unwrap();
    assert_eq!(rec["error"], "missing_prerequisite");
    assert_eq!(rec["phase"], "P3");
    assert!(rec["message"].as_str().unwrap().contains("P3"));
    assert!(!out.join("P4").exists());
}

#[test]
fn unknown_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gkd(tmp.path(), &["--phases", "P1", "--learning-rate", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--learning-rate"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nmomentum = 0.9\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gkd")).arg("--config").arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("\"error\":\"config\""), "{}", stderr(&o));
}

#[test]
fn full_run_then_repeated_evaluation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = gkd(tmp.path(), &["--out", out.to_str().unwrap(), "--dump-masks", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for p in ["P1", "P2", "P3", "P4"] {
        assert!(out.join(p).join("manifest.json").is_file(), "{p}");
        let log = fs::read_to_string(out.join(p).join("losses.csv")).unwrap();
        assert!(log.starts_with("# config_hash "));
    }
    let first = fs::read(out.join("report.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    for model in ["teacher", "student_scratch", "student_gkd"] {
        for ds in ["test_A", "test_B", "GAP"] {
            assert!(text.contains(&format!("{model},{ds},")), "{model} {ds}");
        }
    }
    let masks = fs::read_dir(out.join("masks")).unwrap().count();
    assert_eq!(masks, 3 * 2 * 2);
    let o = gkd(tmp.path(), &["--out", out.to_str().unwrap(), "--eval-only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("report.csv")).unwrap(), first);
    assert!(!out.join(".gkd.lock").exists());
}

#[test]
fn env_var_sets_output_dir_and_flag_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let env_out = tmp.path().join("from_env");
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_gkd"))
            .arg("--config")
            .arg(&cfg)
            .args(["--phases", "P1"])
            .args(extra)
            .env("GKD_OUT_DIR", &env_out)
            .output()
            .unwrap()
    };
    assert!(run(&[]).status.success());
    assert!(env_out.join("P1").is_dir());
    let flag_out = tmp.path().join("from_flag");
    assert!(run(&["--out", flag_out.to_str().unwrap()]).status.success());
    assert!(flag_out.join("P1").is_dir());
}

#[test]
fn locked_output_dir_refuses_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".gkd.lock"), "1").unwrap();
    let o = gkd(tmp.path(), &["--phases", "P1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("\"error\":\"locked\""));
}

#[test]
fn evaluation_refuses_a_checkpoint_for_a_different_network() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = gkd(tmp.path(), &["--phases", "P2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = tmp.path().join("wide.toml");
    fs::write(&cfg, format!("{TINY}student_widths = [4, 8, 8]\n")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gkd"))
        .arg("--config")
        .arg(&cfg)
        .args(["--eval-only", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("\"error\":\"checkpoint\""), "{err}");
    assert!(err.contains("student."), "{err}");
}
