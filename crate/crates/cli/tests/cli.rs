use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use funnel_cli::{EXIT_CERTIFY, EXIT_OK, EXIT_SOLVER, EXIT_SPEC, EXIT_USAGE};

fn funnel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funnel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synthesize_toy(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "synthesize",
        "--builtin",
        "toy_integrator",
        "--iters",
        "2",
        "--v0",
        "x1^2 - 0.03*t",
        "--samples",
        "2000",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    funnel(&args)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&funnel(&[])), EXIT_USAGE);
    assert_eq!(code(&funnel(&["synthesize", "--bogus"])), EXIT_USAGE);
    assert_eq!(code(&funnel(&["certify", "/nonexistent/certificate.json"])), EXIT_USAGE);
    assert_eq!(code(&funnel(&["--help"])), EXIT_OK);
    assert_eq!(code(&funnel(&["--version"])), EXIT_OK);
}

#[test]
fn invalid_specs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&funnel(&["export-spec", "--builtin", "no_such_system"])), EXIT_SPEC);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"broken\"\n[variables]\nn = 0\n").unwrap();
    let out = funnel(&["synthesize", "--spec", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_SPEC, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unusable_initial_function_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // the sublevel sets of -x² are unbounded, so no level can be certified
    let out = funnel(&[
        "synthesize",
        "--builtin",
        "toy_integrator",
        "--v0",
        "-x1^2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), EXIT_SOLVER, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synthesize_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthesize_toy(dir.path(), &[]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["certificate.json", "gamma_history.txt", "report.txt", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.starts_with("verdict certified"), "{report}");
    let history = fs::read_to_string(dir.path().join("gamma_history.txt")).unwrap();
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 2, "{history}");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert!(manifest["step_times"].is_array() || manifest["step_times"].is_object());
    assert_eq!(manifest["config"]["seed"], 0);

    // no temporary files are left behind
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().all(|n| !n.contains(".tmp")), "{names:?}");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&synthesize_toy(a.path(), &["--seed", "7"])), EXIT_OK);
    assert_eq!(code(&synthesize_toy(b.path(), &["--seed", "7"])), EXIT_OK);
    for f in ["certificate.json", "report.txt", "gamma_history.txt"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn exported_spec_file_is_interchangeable_with_the_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let exported = funnel(&["export-spec", "--builtin", "toy_integrator"]);
    assert_eq!(code(&exported), EXIT_OK);
    let spec_path = dir.path().join("toy.toml");
    fs::write(&spec_path, &exported.stdout).unwrap();

    let again = funnel(&["export-spec", "--spec", spec_path.to_str().unwrap()]);
    assert_eq!(again.stdout, exported.stdout);

    let from_builtin = dir.path().join("builtin");
    let from_file = dir.path().join("file");
    assert_eq!(code(&synthesize_toy(&from_builtin, &[])), EXIT_OK);
    let out = funnel(&[
        "synthesize",
        "--spec",
        spec_path.to_str().unwrap(),
        "--iters",
        "2",
        "--v0",
        "x1^2 - 0.03*t",
        "--samples",
        "2000",
        "--out",
        from_file.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(from_builtin.join("certificate.json")).unwrap(),
        fs::read(from_file.join("certificate.json")).unwrap()
    );
}

#[test]
fn certify_simulate_and_export_use_the_stored_certificate() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&synthesize_toy(dir.path(), &[])), EXIT_OK);
    let cert = dir.path().join("certificate.json");
    let cert_s = cert.to_str().unwrap();

    let check_dir = dir.path().join("check");
    let out = funnel(&["certify", cert_s, "--samples", "2000", "--out", check_dir.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(check_dir.join("report.txt")).unwrap().starts_with("verdict certified"));

    let sim_dir = dir.path().join("sim");
    let sim = sim_dir.to_str().unwrap();
    assert_eq!(code(&funnel(&["simulate", cert_s, "--x0", "-0.3", "--out", sim])), EXIT_OK);
    let trace = fs::read_to_string(sim_dir.join("trace.dat")).unwrap();
    assert!(trace.lines().filter(|l| !l.starts_with('#')).count() > 10);
    assert_eq!(code(&funnel(&["simulate", cert_s, "--runs", "20", "--out", sim])), EXIT_OK);
    assert!(sim_dir.join("montecarlo.txt").is_file());

    let ls_dir = dir.path().join("ls");
    let out = funnel(&[
        "export-levelset",
        cert_s,
        "--t",
        "0.5",
        "--resolution",
        "21",
        "--out",
        ls_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ls_dir.join("levelset.dat").is_file());
}

#[test]
fn tampered_certificates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&synthesize_toy(dir.path(), &[])), EXIT_OK);
    let text = fs::read_to_string(dir.path().join("certificate.json")).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();

    // an inflated level no longer matches the stored Gram matrices
    let gamma = json["gamma"].as_f64().unwrap();
    json["gamma"] = serde_json::json!(gamma * 4.0);
    let inflated = dir.path().join("inflated.json");
    fs::write(&inflated, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    let out = funnel(&["certify", inflated.to_str().unwrap(), "--out", dir.path().join("c1").to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CERTIFY);

    // editing the embedded spec breaks its hash
    let edited = text.replacen("0.04", "0.05", 1);
    assert_ne!(edited, text);
    let edited_path = dir.path().join("edited.json");
    fs::write(&edited_path, edited).unwrap();
    let out = funnel(&["certify", edited_path.to_str().unwrap(), "--out", dir.path().join("c2").to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_SPEC);
}
