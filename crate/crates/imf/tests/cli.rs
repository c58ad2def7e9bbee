use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use imf::manifest::Manifest;

fn imf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imf")).args(args).env("IMF_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = imf(args);
    assert!(out.status.success(), "imf {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

const SMALL: [&str; 5] = ["--episodes", "8", "--lower-episodes", "40", "--baseline"];

#[test]
fn repeated_commands_write_identical_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();

    let train = |out: &str| {
        let mut a = vec!["train-supervisor", "--scenario", "scenario2", "--out", out];
        a.extend(SMALL);
        ok(&a);
    };
    train(&p("m1"));
    train(&p("m2"));
    for f in ["lower.imfq", "proposed.imfc", "baseline.imfc", "train-proposed.csv", "train-baseline.csv"] {
        assert_eq!(read(&tmp.path().join("m1"), f), read(&tmp.path().join("m2"), f), "{f}");
    }

    let models = p("m1");
    let before = read(Path::new(&models), "proposed.imfc");
    for out in ["e1", "e2"] {
        let mut a = vec!["evaluate", "--scenario", "scenario2", "--models", &models, "--out"];
        let o = p(out);
        a.push(&o);
        a.extend(SMALL);
        ok(&a);
    }
    for f in ["iae.csv", "traces.csv"] {
        assert_eq!(read(&tmp.path().join("e1"), f), read(&tmp.path().join("e2"), f), "{f}");
    }
    assert_eq!(read(Path::new(&models), "proposed.imfc"), before);

    let iae = String::from_utf8(read(&tmp.path().join("e1"), "iae.csv")).unwrap();
    let mut lines = iae.lines();
    assert_eq!(lines.next(), Some("scenario,model,expectation,P,IAE,seed_count,metric"));
    assert_eq!(lines.count(), 6);

    let m: Manifest = serde_json::from_str(&String::from_utf8(read(&tmp.path().join("e1"), "manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "evaluate");
    assert!(m.config_sha256.is_some());
    assert!(m.outputs.iter().any(|d| d.path == "iae.csv"));
    for d in &m.outputs {
        assert!(tmp.path().join("e1").join(&d.path).exists(), "{}", d.path);
    }
}

#[test]
fn sweep_without_models_trains_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["s1", "s2"] {
        let o = tmp.path().join(out);
        let mut a = vec!["sweep", "--scenario", "exp4-linear-ablation", "--horizon", "5", "--out", o.to_str().unwrap()];
        a.extend(SMALL);
        ok(&a);
    }
    for id in ["cv-qoe", "urllc-pl", "miot-pl"] {
        let f = format!("sweep-{id}.csv");
        let a = read(&tmp.path().join("s1"), &f);
        assert_eq!(a, read(&tmp.path().join("s2"), &f), "{f}");
        // 6 priorities x 2 models x 3 expectations
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 36);
        assert!(tmp.path().join("s1").join(format!("sweep-{id}.svg")).exists());
    }
}

#[test]
fn errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = imf(&["evaluate", "--scenario", "no-such-scenario", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("imf: "));
    assert_eq!(imf(&["evaluate", "--bogus"]).status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let o = imf(&["gradcheck", "--seeds", "2", "--samples", "16", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}
