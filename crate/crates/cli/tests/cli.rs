use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn plvio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plvio")).args(args).output().expect("binary runs")
}

fn short_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, r#"{"sim": {"duration": 6.0, "loops": 1}, "obscheck": {"t0": 1.0, "frames": 5}}"#).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(p: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = plvio(&["simulate", "--config", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn bad_flags_and_schema_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(plvio(&["simulate", "--variants", "ekf"]).status.code(), Some(2));
    assert_eq!(plvio(&["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sim": {"duraton": 3}}"#).unwrap();
    let out = plvio(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duraton"));
}

#[test]
fn simulate_writes_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = plvio(&["simulate", "--config", s(&cfg), "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for v in ["msckf", "iekf", "plv-msckf", "plv-iekf"] {
        for kind in ["traj", "nees", "rmse"] {
            let name = format!("{kind}_{v}.csv");
            let fa = std::fs::read(a.join(&name)).unwrap();
            assert!(fa.iter().filter(|&&c| c == b'\n').count() > 1, "{name} is empty");
            assert_eq!(fa, std::fs::read(b.join(&name)).unwrap(), "{name} differs");
        }
    }
    assert!(a.join("plot.gp").exists());
}

#[test]
fn montecarlo_single_run_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let (sim, mc) = (dir.path().join("sim"), dir.path().join("mc"));
    let vars = "iekf,plv-msckf";
    assert!(plvio(&["simulate", "--config", s(&cfg), "--seed", "5", "--variants", vars, "--out", s(&sim)]).status.success());
    let o = plvio(&["montecarlo", "--config", s(&cfg), "--seed", "5", "--runs", "1", "--variants", vars, "--out", s(&mc)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["iekf", "plv-msckf"] {
        for kind in ["nees", "rmse"] {
            let name = format!("{kind}_{v}.csv");
            assert_eq!(std::fs::read(sim.join(&name)).unwrap(), std::fs::read(mc.join(&name)).unwrap(), "{name}");
        }
    }
    let summary = std::fs::read_to_string(mc.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn replay_of_dumped_bundle_reproduces_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let sim = dir.path().join("sim");
    let o = plvio(&["simulate", "--config", s(&cfg), "--seed", "2", "--variants", "msckf,plv-iekf", "--dump", "--out", s(&sim)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["msckf", "plv-iekf"] {
        let rep = dir.path().join(format!("rep_{v}"));
        let o = plvio(&["replay", "--config", s(&cfg), "--bundle", s(&sim.join("bundle")), "--variant", v, "--out", s(&rep)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let a = read_csv(&sim.join(format!("traj_{v}.csv")));
        let b = read_csv(&rep.join(format!("traj_{v}.csv")));
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            for c in 0..8 {
                assert!((ra[c] - rb[c]).abs() < 1e-9, "{v} column {c}: {} vs {}", ra[c], rb[c]);
            }
        }
        assert!(rep.join("replay_summary.csv").exists());
    }
}

#[test]
fn replay_without_lines_warns_and_runs_points_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let sim = dir.path().join("sim");
    assert!(plvio(&["simulate", "--config", s(&cfg), "--variants", "iekf", "--dump", "--out", s(&sim)]).status.success());
    std::fs::remove_file(sim.join("bundle/lines.csv")).unwrap();
    let o = plvio(&["replay", "--config", s(&cfg), "--bundle", s(&sim.join("bundle")), "--variant", "plv-iekf", "--out", s(dir.path())]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no line tracks"));
    // Without lines the line-aided filter is the point-only one.
    let a = read_csv(&sim.join("traj_iekf.csv"));
    let b = read_csv(&dir.path().join("traj_plv-iekf.csv"));
    assert!((a.last().unwrap()[1] - b.last().unwrap()[1]).abs() < 1e-9);
}

#[test]
fn replay_reports_unsorted_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let imu = dir.path().join("imu.csv");
    std::fs::write(&imu, "t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.81\n0.02,0,0,0,0,0,9.81\n0.01,0,0,0,0,0,9.81\n").unwrap();
    let pts = dir.path().join("points.csv");
    std::fs::write(&pts, "t,frame_id,feature_id,u,v\n").unwrap();
    let o = plvio(&["replay", "--imu", s(&imu), "--points", s(&pts), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("imu.csv:4"), "{err}");
}

#[test]
fn obscheck_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let o = plvio(&["obscheck", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("obscheck.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().filter(|r| r[0].starts_with("riekf_")).all(|r| r[3] == "true"));
    assert!(rows.iter().any(|r| r[0].starts_with("msckf_noisy") && r[3] == "false"));
    assert!(rows.iter().any(|r| r[0] == "vp_full_observability_sigma_min"));
}
