use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tmp(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("obswave-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn obswave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obswave")).args(args).output().unwrap()
}

fn config(dir: &Path, t_final: f64, task: &str) -> String {
    let text = format!(
        r#"{{
  "geometry": {{
    "lo": [0.0], "hi": [1.0], "nx": [21], "t_final": {t_final}, "nt": 400,
    "weight": {{ "kind": "quadratic", "a": 4.0, "center": [-1.0] }}
  }},
  "dynamics": {{
    "linear": {{ "b4": "0.5" }},
    "initial": {{ "kind": "analytic", "z0": "sin(pi*x)", "z1": "0" }}
  }},
  "carleman": {{ "c0": 1.0, "c1": 0.7 }},
  "ensemble": {{ "seed": 5, "n_paths": 4 }},
  "task": {task}
}}
"#
    );
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn short_horizon_fails_citing_the_time_flag() {
    let d = tmp("short");
    let cfg = config(&d, 6.0, "{}");
    let out = d.join("out");
    let o = obswave(&["check-geometry", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("flag (2)"), "{err}");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn schema_errors_exit_with_2_and_a_line() {
    let d = tmp("schema");
    let cfg = config(&d, 10.0, r#"{ "bogus": 1 }"#);
    let o = obswave(&["solve", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 12,") && err.contains("bogus"), "{err}");
}

#[test]
fn manifest_detects_tampering() {
    let d = tmp("manifest");
    let cfg = config(&d, 10.0, "{}");
    let out = d.join("out");
    let o = obswave(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.to_str().unwrap();
    assert_eq!(obswave(&["verify-manifest", "--dir", dir]).status.code(), Some(0));
    let csv = out.join("summary.csv");
    let mut body = std::fs::read_to_string(&csv).unwrap();
    body.push('\n');
    std::fs::write(&csv, body).unwrap();
    let o = obswave(&["verify-manifest", "--dir", dir]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("summary.csv"));
}

#[test]
fn seed_override_changes_noisy_output() {
    let d = tmp("seed");
    let cfg = config(&d, 10.0, "{}");
    let run = |seed: &str, name: &str| {
        let out = d.join(name);
        let o = obswave(&["solve", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        std::fs::read(out.join("summary.csv")).unwrap()
    };
    assert_eq!(run("1", "a"), run("1", "b"));
    assert_ne!(run("1", "a"), run("2", "c"));
}

#[test]
fn plotdata_from_energy_summary() {
    let d = tmp("plot");
    let cfg = config(&d, 10.0, "{}");
    let out = d.join("out");
    assert!(obswave(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let o = obswave(&["plotdata", "--artifact", out.join("summary.csv").to_str().unwrap(), "--kind", "energy"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("series,t,value\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("energy,")).count(), 401);
    let missing = obswave(&["plotdata", "--artifact", d.join("nope.csv").to_str().unwrap(), "--kind", "energy"]);
    assert_eq!(missing.status.code(), Some(2));
}
