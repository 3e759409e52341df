use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mixfbm(args: &[&str], config: Option<&str>, dir: &TempDir) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mixfbm"));
    cmd.args(args).env_remove("MIXFBM_OUT_DIR").env_remove("MIXFBM_WORKERS");
    if let Some(text) = config {
        let p = dir.path().join("run.toml");
        fs::write(&p, text).unwrap();
        cmd.arg("--config").arg(p);
    }
    cmd.output().unwrap()
}

fn out_arg(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn csv(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn kernel_at_half_is_all_ones() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir, "k");
    let o = mixfbm(&["kernel", "--out", &out, "--n-steps", "16"], Some("[kernel]\nh = 0.5\n"), &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv(&dir.path().join("k/kernel.csv"));
    assert_eq!(header, "t,s,K");
    assert_eq!(rows.len(), 16 * 17 / 2);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 1.0));
    assert_eq!(summary(&dir.path().join("k"))["checks"]["AC1"]["pass"], true);
}

#[test]
fn zero_drift_density_has_no_envelope_violation() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir, "d");
    let cfg = "n_steps = 32\nn_paths = 10000\nx0 = [0.3]\n[density]\ngirsanov_paths = 200\n";
    let o = mixfbm(&["density", "--out", &out], Some(cfg), &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = dir.path().join("d");
    let s = summary(&d);
    assert_eq!(s["checks"]["AC11"]["pass"], true);
    assert_eq!(s["checks"]["AC11"]["metrics"]["violation_fraction"], 0.0);
    assert_eq!(s["info"]["envelope"]["violation_fraction"], 0.0);
    let env: Value = serde_json::from_str(&fs::read_to_string(d.join("envelope.json")).unwrap()).unwrap();
    for key in ["C1", "C2", "C1p", "C2p", "violation_fraction", "sigma2"] {
        assert!(env[key].is_number(), "envelope.json lacks {key}");
    }
    let (header, rows) = csv(&d.join("points.csv"));
    assert_eq!(header, "x_1,p_kde,se_kde,p_girsanov,se_girsanov,gaussian");
    assert_eq!(rows.len(), 9);
    // zero drift: the bridge estimator returns the Gaussian up to roundoff
    for r in &rows {
        let (g, exact) = (r[3].parse::<f64>().unwrap(), r[5].parse::<f64>().unwrap());
        assert!((g - exact).abs() <= 1e-12 * exact, "{g} vs {exact}");
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn scaling_check_reports_the_both_long_exponent() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir, "s");
    let o = mixfbm(&["scaling-check", "--out", &out, "--h1", "0.6", "--h2", "0.8"], None, &dir);
    let s = summary(&dir.path().join("s"));
    let ac = &s["checks"]["AC10"];
    let slope = ac["metrics"]["slope"].as_f64().unwrap();
    let cand = ac["metrics"]["candidates"][0].as_f64().unwrap();
    assert!((cand - 0.1).abs() < 1e-12);
    assert!(slope.is_finite());
    let pass = (slope - cand).abs() < 0.1;
    assert_eq!(ac["pass"], pass);
    // a failing check exits 1 and is named on stderr
    assert_eq!(o.status.code(), Some(if pass { 0 } else { 1 }));
    assert_eq!(stderr(&o).contains("check AC10 failed"), !pass);
    let (header, rows) = csv(&dir.path().join("s/scaling.csv"));
    assert_eq!(header, "T0,J");
    assert_eq!(rows.len(), 5);
}

#[test]
fn invalid_input_exits_one() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir, "x");
    let o = mixfbm(&["kernel", "--out", &out], Some("h1 = 1.5\n"), &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("validation failed [config]"), "{}", stderr(&o));

    let o = mixfbm(&["kernel", "--out", &out], Some("hurst = 0.3\n"), &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));

    let o = mixfbm(&["no-such-command"], None, &dir);
    assert_eq!(o.status.code(), Some(1));

    let o = mixfbm(&["cgp-check", "--out", &out, "--n-steps", "10", "--n-paths", "10"], None, &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[cgp.eps]"), "{}", stderr(&o));

    let o = mixfbm(&["density", "--out", &out, "--n-paths", "100"], None, &dir);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn degenerate_weights_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir, "n");
    let o = mixfbm(&["density", "--out", &out, "--a1", "1e-200", "--a2", "1e-200", "--n-steps", "16", "--n-paths", "10000"], None, &dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("numerical failure"), "{}", stderr(&o));
    let s = summary(&dir.path().join("n"));
    assert_eq!(s["passed"], false);
    assert!(s["info"]["error"].is_string());
}

const SIN: &str = "n_steps = 32\nn_paths = 500\nmaster_seed = 7\n[drift]\nfamily = \"bounded-sin\"\namplitude = [0.5]\nfrequency = [1.0]\n";

fn numeric_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.resolved.toml")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    for cmd in ["simulate", "psi", "bridge-check"] {
        let (a, b, c) = (out_arg(&dir, &format!("{cmd}-a")), out_arg(&dir, &format!("{cmd}-b")), out_arg(&dir, &format!("{cmd}-c")));
        let oa = mixfbm(&[cmd, "--out", &a, "--workers", "1"], Some(SIN), &dir);
        assert!(oa.status.code().is_some_and(|c| c <= 1), "{}", stderr(&oa));
        let ob = mixfbm(&[cmd, "--out", &b, "--workers", "2"], Some(SIN), &dir);
        assert_eq!(oa.status.code(), ob.status.code());
        let fa = numeric_files(Path::new(&a));
        assert!(fa.len() >= 3);
        assert_eq!(fa, numeric_files(Path::new(&b)), "{cmd} output depends on the run");
        // the resolved config reproduces the run
        let resolved = Path::new(&a).join("config.resolved.toml");
        let oc = Command::new(env!("CARGO_BIN_EXE_mixfbm"))
            .args([cmd, "--config", resolved.to_str().unwrap(), "--out", &c])
            .env_remove("MIXFBM_OUT_DIR")
            .env_remove("MIXFBM_WORKERS")
            .output()
            .unwrap();
        assert_eq!(oa.status.code(), oc.status.code());
        assert_eq!(fa, numeric_files(Path::new(&c)));
    }
}

#[test]
fn environment_and_flags_override_the_file() {
    let dir = TempDir::new().unwrap();
    let json = dir.path().join("run.json");
    fs::write(&json, r#"{"h1": 0.4, "h2": 0.6, "n_steps": 16, "n_paths": 200, "workers": 3}"#).unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_mixfbm"))
        .args(["simulate", "--config", json.to_str().unwrap(), "--h1", "0.2"])
        .env("MIXFBM_OUT_DIR", &target)
        .env("MIXFBM_WORKERS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: toml::Table = fs::read_to_string(target.join("config.resolved.toml")).unwrap().parse().unwrap();
    assert_eq!(resolved["h1"].as_float(), Some(0.2));
    assert_eq!(resolved["h2"].as_float(), Some(0.6));
    assert_eq!(resolved["workers"].as_integer(), Some(1));
    assert_eq!(resolved["a_matrix"].as_array().unwrap().len(), 1);
    let (header, rows) = csv(&target.join("path.csv"));
    assert_eq!(header, "t,X_1");
    assert_eq!(rows.len(), 17);
}

#[test]
fn diagnostic_commands_write_their_tables() {
    let dir = TempDir::new().unwrap();
    let cases: [(&str, &[(&str, &str)]); 4] = [
        ("fbm-check", &[("fbm_covariance.csv", "process,t,s,estimate,std_err,exact,z,grid_exact,z_grid")]),
        ("psi", &[("psi.csv", "t,psi_norm,envelope")]),
        ("cgp-check", &[("cgp.csv", "eps,mean_abs_diff,std_err,bound"), ("char_fn.csv", "u,re_mc,re_se,re_exact,im_mc,im_se,im_exact")]),
        (
            "bridge-check",
            &[
                ("bridge.csv", "x,path,terminal_residual,tolerance"),
                ("bridge_mean.csv", "t,mean,std_err,exact"),
                ("g_variance.csv", "t,kappa2,kappa2_grid,var_mc,var_se,orlicz_mc,orlicz_se"),
            ],
        ),
    ];
    for (cmd, files) in cases {
        let out = out_arg(&dir, cmd);
        let cfg = format!("{SIN}[fbm_check]\ntimes = [0.5, 1.0]\n");
        let o = mixfbm(&[cmd, "--out", &out, "--n-steps", "64"], Some(&cfg), &dir);
        assert!(o.status.code().is_some_and(|c| c <= 1), "{cmd}: {}", stderr(&o));
        for (name, header) in files {
            let (h, rows) = csv(&Path::new(&out).join(name));
            assert_eq!(&h, header, "{cmd}/{name}");
            assert!(!rows.is_empty());
        }
        let s = summary(Path::new(&out));
        assert_eq!(s["command"], cmd);
        for (id, check) in s["checks"].as_object().unwrap() {
            assert!(id.starts_with("AC"));
            assert!(check["pass"].is_boolean());
        }
    }
    // with zero drift X_t - Y(eps) vanishes up to roundoff
    let out = out_arg(&dir, "cgp-zero");
    let o = mixfbm(&["cgp-check", "--out", &out, "--n-steps", "64", "--n-paths", "300"], None, &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = csv(&Path::new(&out).join("cgp.csv"));
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() < 1e-12));
}
