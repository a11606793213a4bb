use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn locksim(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_locksim"));
    c.args(args).env_remove("SIM_SEED");
    if let Some(s) = env_seed {
        c.env("SIM_SEED", s);
    }
    c.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const ECHO: &str = r#"{
  "sequence": {"family": "two-pulse-echo", "chi_khz": 500, "tau_us": 20},
  "ensemble": {"n_ions": 30, "inhomogeneous_fwhm_khz": 200, "bath_realizations_per_ion": 2},
  "bath": {"delta_rms_khz": 10, "tau_c_us": 5}
}"#;

#[test]
fn simulate_is_reproducible_and_finds_echo() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "echo.json", ECHO);
    let run = |out: &str, workers: &str| {
        let o = d.path().join(out);
        let r = locksim(
            &["simulate", "--config", &cfg, "--out", o.to_str().unwrap(), "--seed", "9", "--workers", workers],
            None,
        );
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        (fs::read(o.join("trace.csv")).unwrap(), fs::read_to_string(o.join("summary.json")).unwrap())
    };
    let a = run("a", "1");
    let b = run("b", "2");
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);

    let csv = String::from_utf8(a.0).unwrap();
    assert!(csv.starts_with("# config_sha256="));
    assert!(csv.contains("# seed=9"));
    let summary: serde_json::Value = serde_json::from_str(&a.1).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["config_sha256"].as_str().unwrap().len(), 64);
    let peak = summary["readouts"][0]["in_phase"]["peak_time_us"].as_f64().unwrap();
    assert!((peak - 40.0).abs() < 2.5, "echo at {peak} us");
}

#[test]
fn seed_precedence() {
    let d = tempfile::tempdir().unwrap();
    let with_seed = ECHO.replacen('{', "{\"seed\": 3,", 1);
    let cfg = write(d.path(), "s.json", &with_seed);
    let bare = write(d.path(), "b.json", ECHO);
    let seed_of = |cfg: &str, flag: Option<&str>, env: Option<&str>| {
        let out = d.path().join("o");
        let mut args = vec!["simulate", "--config", cfg, "--out", out.to_str().unwrap()];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let r = locksim(&args, env);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        s["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&cfg, Some("1"), Some("2")), 1);
    assert_eq!(seed_of(&cfg, None, Some("2")), 3);
    assert_eq!(seed_of(&bare, None, Some("2")), 2);
    assert_eq!(seed_of(&bare, None, None), 0);
}

#[test]
fn invalid_config_exits_with_validation_code_and_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "bad.json",
        r#"{"sequence": {"family": "two-pulse-echo", "chi_khz": 500, "tau_us": -20}}"#,
    );
    let out = d.path().join("out");
    let r = locksim(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("sequence.tau_us"));
    assert!(!out.exists());

    let typo = write(d.path(), "typo.json", &ECHO.replace("n_ions", "n_ion"));
    let r = locksim(&["simulate", "--config", &typo, "--out", out.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn numerical_failure_has_its_own_code() {
    let d = tempfile::tempdir().unwrap();
    // Detector noise swamps a single ion, so no point yields a decay.
    let cfg = write(
        d.path(),
        "flat.json",
        r#"{"sequence": {"family": "two-pulse-echo", "chi_khz": 500},
            "ensemble": {"n_ions": 1, "distribution": "delta", "record": "windows", "detector_noise": 1.0},
            "analysis": {"durations_us": [20, 40, 60, 80]},
            "sweep": {"axis": "chi_khz", "values": [500, 600]}, "seed": 1}"#,
    );
    let out = d.path().join("out");
    let r = locksim(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    // Per-point failures are recorded, not fatal.
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.lines().filter(|l| l.contains("NaN")).count() == 2);
    assert!(String::from_utf8_lossy(&r.stdout).contains("failed"));

    let r = locksim(&["calibrate", "--target-t2-us", "50", "--delta-khz", "0", "--out", out.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));

    let big = write(d.path(), "big.json", &ECHO.replace("\"n_ions\": 30", "\"n_ions\": 30, \"max_steps\": 1000"));
    let out = d.path().join("big");
    let r = locksim(&["simulate", "--config", &big, "--out", out.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("resource limit"));
    assert!(!out.exists());
}

#[test]
fn sweep_with_empty_grid_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "empty.json",
        r#"{"sequence": {"family": "rotary-echo", "chi_khz": 100},
            "analysis": {"expected_decay_us": 100},
            "sweep": {"axis": "chi_khz", "values": []}}"#,
    );
    let out = d.path().join("out");
    let r = locksim(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn rotary_echo_sweep_bath_off() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "re.json",
        r#"{"sequence": {"family": "rotary-echo", "chi_khz": 100},
            "ensemble": {"n_ions": 40, "inhomogeneous_fwhm_khz": 5},
            "ion": {"t2_us": 50},
            "analysis": {"expected_decay_us": 100},
            "sweep": {"axis": "chi_khz", "values": [50, 100, 225]}}"#,
    );
    let out = d.path().join("out");
    let r = locksim(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for k in 0..3 {
        let f: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("fits/point_{k:03}.json"))).unwrap()).unwrap();
        let t = f["fit"]["t_dec_us"].as_f64().unwrap();
        assert!((t / 100.0 - 1.0).abs() < 0.05, "point {k}: {t} us");
    }
}

#[test]
fn shf_preset_zero_coupling_and_cap() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("preset");
    let r = locksim(&["shf", "--out", out.to_str().unwrap(), "--variants", "3"], None);
    assert!(r.status.success());
    let stdout = String::from_utf8_lossy(&r.stdout);
    let count: usize = stdout
        .lines()
        .find_map(|l| l.strip_prefix("pathway_count = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(count > 15);
    let csv = fs::read_to_string(out.join("side_holes.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "offset_hz,relative_strength"));
    assert!(out.join("pathways.json").exists());

    let zero = write(
        d.path(),
        "zero.json",
        r#"{"ground_couplings_khz": [[0,0,0],[0,0,0],[0,0,0]], "larmor_khz": [100, 120, 140]}"#,
    );
    let out = d.path().join("zero");
    let r = locksim(&["shf", "--config", &zero, "--out", out.to_str().unwrap()], None);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("pathway_count = 8"));
    assert!(stdout.contains("side_hole_weight = 0.000000"));

    let nine = write(
        d.path(),
        "nine.json",
        &format!(r#"{{"ground_couplings_khz": [{}], "field_gauss": 100}}"#, vec!["[1,0,0]"; 9].join(",")),
    );
    let out = d.path().join("nine");
    let r = locksim(&["shf", "--config", &nine, "--out", out.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}
