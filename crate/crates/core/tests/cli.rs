use std::path::Path;
use std::process::{Command, Output};

fn gp_mpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gp-mpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.toml");
    let o = gp_mpc(&["run", "--config", arg(&missing), "--out-dir", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
    assert!(!out.exists());
}

#[test]
fn invalid_field_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "env = \"cartpole\"\nmode = \"random\"\nseeds = [0]\ntrials = 1\n[cost]\nwidth = -1.0\n").unwrap();
    let o = gp_mpc(&["run", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cost.width"));

    std::fs::write(&cfg, "env = \"cartpole\"\nmode = \"random\"\nseeds = [0]\ntrials = 1\ncolour = 3\n").unwrap();
    let o = gp_mpc(&["run", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn random_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = gp_mpc(&[
        "run",
        "--env",
        "cartpole",
        "--mode",
        "random",
        "--constrained",
        "--seeds",
        "3",
        "--trials",
        "2",
        "--out-dir",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("state constraint violations:"), "{stdout}");
    let jsonl = std::fs::read_to_string(out.join("trials.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 6);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["random"], true);
        assert!(v.get("wall_time").is_none());
    }
    let csv = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("trial_index,success_rate,mean_cost,violations"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(out.join("summary.txt")).unwrap(), stdout);
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !["trials.jsonl", "curve.csv", "summary.txt"].contains(&n.as_str()))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            gp_mpc::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}

#[test]
fn verify_solver_passes() {
    let o = gp_mpc(&["verify", "solver"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn unknown_suite_is_rejected() {
    let o = gp_mpc(&["verify", "everything"]);
    assert!(!o.status.success());
}
