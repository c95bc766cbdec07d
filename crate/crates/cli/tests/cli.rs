use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cavlase(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavlase"))
        .args(args)
        .arg("--output")
        .arg(root)
        .env_remove("CAVLASE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn steady_writes_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = cavlase(&["steady", "--fock-cutoff", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("steady");
    let rec = json(&run.join("steady.json"));
    let n = rec["n"].as_f64().unwrap();
    let p_e = rec["p_e"].as_f64().unwrap();
    assert!(n > 0.0 && n < 0.5, "n = {n}");
    assert!(p_e > 1.5 && p_e < 3.0, "p_e = {p_e}");
    assert!(rec["g2"].as_f64().is_some());
    assert_eq!(rec["params"]["fock_cutoff"], 4);

    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["mode"], "steady");
    assert_eq!(manifest["files"][0], "config.toml");
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("fock_cutoff = 4"), "{config}");
}

#[test]
fn trajectory_on_stable_momenta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[trajectory]\nmomenta = [1.00, -0.73, 1.18]\n[evolve]\nn_samples = 201\n").unwrap();
    let out = cavlase(&["trajectory", "--config", cfg.to_str().unwrap(), "--t-final", "20"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("trajectory");
    let table = fs::read_to_string(run.join("trajectory.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t[1/Gamma],r_1[lambda_c],r_2[lambda_c],r_3[lambda_c],p_1[hbar*k_a],p_2[hbar*k_a],p_3[hbar*k_a],E_kin[hbar*Gamma],n,p_e"
    );
    assert_eq!(lines.count(), 201);
    let meta = json(&run.join("trajectory.json"));
    assert_eq!(meta["stability"]["overall"], true);
    assert_eq!(meta["initial_momenta"][1], -0.73);
}

#[test]
fn scan_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scan.toml");
    fs::write(
        &cfg,
        r#"seed = 4
[evolve]
n_samples = 200
[scan]
samples_per_point = 2
t_final = 20.0
[scan.axis1]
name = "delta"
values = [-5.0, 10.0]
[scan.axis2]
name = "pump_rate"
values = [8.0]
"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = cfg.to_str().unwrap();
    assert!(cavlase(&["scan", "--config", c, "--threads", "1"], &a).status.success());
    assert!(cavlase(&["scan", "--config", c, "--threads", "2"], &b).status.success());
    let table = fs::read(a.join("scan/scan.csv")).unwrap();
    assert_eq!(table, fs::read(b.join("scan/scan.csv")).unwrap());
    let strip = |p: &Path| {
        let mut v = json(p);
        v.as_object_mut().unwrap().remove("code_version");
        v
    };
    assert_eq!(strip(&a.join("scan/scan.json")), strip(&b.join("scan/scan.json")));
    let text = String::from_utf8(table).unwrap();
    assert!(text.starts_with("axis1,axis2,e_kin_rel,stable_fraction,n,g2,p_e,gamma,delta0,n_stable\n"));
    assert!(text.lines().nth(1).unwrap().starts_with("-5,8,null,0,"), "{text}");
}

#[test]
fn rerun_from_written_config_reproduces_data() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert!(cavlase(&["steady", "--fock-cutoff", "3", "--seed", "9"], &first).status.success());
    let written = first.join("steady/config.toml");
    let second = dir.path().join("second");
    assert!(cavlase(&["steady", "--config", written.to_str().unwrap()], &second).status.success());
    assert_eq!(fs::read(first.join("steady/steady.json")).unwrap(), fs::read(second.join("steady/steady.json")).unwrap());
    assert_eq!(json(&second.join("steady/manifest.json"))["seed"], 9);
}

#[test]
fn invalid_config_fails_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[system]\nkappa = -1.0\n").unwrap();
    let out = cavlase(&["trajectory", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let rec = json(&dir.path().join("trajectory/error.json"));
    assert!(rec["error"].as_str().unwrap().contains("kappa"), "{rec}");
}

#[test]
fn unknown_axis_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[scan.axis1]\nname = \"mass\"\nvalues = [1.0]\n").unwrap();
    let out = cavlase(&["scan", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let rec = json(&dir.path().join("scan/error.json"));
    assert!(rec["error"].as_str().unwrap().contains("unknown scan axis `mass`"), "{rec}");
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cavlase"))
        .args(["steady", "--fock-cutoff", "2"])
        .env("CAVLASE_OUTPUT_ROOT", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("steady/steady.json").is_file());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let dir = tempfile::tempdir().unwrap();
            let out = Command::new(env!("CARGO_BIN_EXE_cavlase"))
                .args(["steady", "--fock-cutoff", "1", "--config"])
                .arg(&path)
                .arg("--output")
                .arg(dir.path())
                .output()
                .unwrap();
            assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
            n += 1;
        }
    }
    assert!(n >= 3);
}
