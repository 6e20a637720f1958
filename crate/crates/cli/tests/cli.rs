use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ionmodes_core::datasets::Manifest;
use ionmodes_core::FitReport;
use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_ionmodes");

fn geometry() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/demo_geometry.json")
}

/// A config small enough to fit in a second or two.
fn small_config() -> Value {
    json!({
        "site": { "position_um": [24.0, 0.0, 36.0], "uncertainty_um": [0.0, 0.0, 0.0] },
        "fields": { "geometry": geometry() },
        "noise": { "seed": 7 },
        "weak": {
            "probe": { "direction": [1.0, 1.0, 0.0], "wavelength_nm": 280.0, "linewidth_MHz": 42.0 },
            "duration_us": 10.0,
            "electrodes": [21, 23, 25, 27, 29, 30],
            "grid_MHz": { "start": 3.4, "stop": 6.1, "step": 0.01 },
            "truth": { "angles_deg": [-6.0, -38.0, -1.0], "freq_MHz": [3.584, 4.833, 5.878], "u_exc_uV": 660.0 },
            "initial": { "angles_deg": [-1.0, -43.0, 4.0], "freq_MHz": [3.634, 4.783, 5.928], "u_exc_uV": 726.0 }
        },
        "strong": {
            "raman": { "direction": [-1.0, 1.0, 0.0], "wavelength_nm": 280.0, "direction_uncertainty_deg": 0.0 },
            "freq_MHz": [3.76, 4.54, 5.76],
            "reference_angles_deg": [-9.0, -51.0, -15.0],
            "times_us": {
                "carrier": { "start": 0.0, "stop": 15.0, "step": 0.25 },
                "sideband": { "start": 0.0, "stop": 30.0, "step": 0.5 }
            },
            "truth": { "angles_deg": [-9.0, -51.0, -15.0], "nbar": [0.5, 1.0, 0.44], "rabi_kHz": 390.0, "gamma_dec_kHz": 13.0 },
            "initial": { "angles_deg": [-9.0, -51.0, -15.0], "nbar": [0.6, 0.8, 0.5], "rabi_kHz": 380.0, "gamma_dec_kHz": 10.0 }
        }
    })
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(config).unwrap()).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.json")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    /// Runs a subcommand with `--config` and `--out` filled in.
    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd.to_string(), "--config".into(), self.config().display().to_string()];
        args.push("--out".into());
        args.push(self.out().display().to_string());
        args.extend(extra.iter().map(|s| s.to_string()));
        run(&args)
    }
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn help_lists_flags() {
    let top = stdout(&run(&["--help"]));
    for sub in ["simulate-weak", "simulate-strong", "fit-weak", "fit-strong", "curvature", "fields"] {
        assert!(top.contains(sub), "{sub} missing from:\n{top}");
    }
    let sim = stdout(&run(&["simulate-weak", "--help"]));
    for flag in ["--config", "--seed", "--out"] {
        assert!(sim.contains(flag), "{flag} missing from:\n{sim}");
    }
    let fit = stdout(&run(&["fit-strong", "--help"]));
    for flag in ["--config", "--out", "--data", "--fix-angle"] {
        assert!(fit.contains(flag), "{flag} missing from:\n{fit}");
    }
    let curv = stdout(&run(&["curvature", "--help"]));
    for flag in ["--report", "--angles-deg", "--freq-mhz", "--assignment", "--half-widths-deg", "--mass-u"] {
        assert!(curv.contains(flag), "{flag} missing from:\n{curv}");
    }
}

#[test]
fn simulation_is_deterministic() {
    let ws = Workspace::new(&small_config());
    for cmd in ["simulate-weak", "simulate-strong"] {
        let a = ws.out().join(format!("{cmd}-a"));
        let b = ws.out().join(format!("{cmd}-b"));
        let c = ws.out().join(format!("{cmd}-c"));
        let cfg = ws.config();
        assert_ok(&run(&[cmd.as_ref(), "--config".as_ref(), cfg.as_os_str(), "--out".as_ref(), a.as_os_str()]));
        assert_ok(&run(&[cmd.as_ref(), "--config".as_ref(), cfg.as_os_str(), "--out".as_ref(), b.as_os_str()]));
        assert_ok(&run(&[
            cmd.as_ref(),
            "--config".as_ref(),
            cfg.as_os_str(),
            "--out".as_ref(),
            c.as_os_str(),
            "--seed".as_ref(),
            "8".as_ref(),
        ]));
        let (fa, fb, fc) = (read_dir_sorted(&a), read_dir_sorted(&b), read_dir_sorted(&c));
        assert!(fa.len() >= 5);
        assert_eq!(fa, fb, "{cmd}");
        assert_ne!(fa, fc, "{cmd}: seed had no effect");
    }
}

#[test]
fn manifest_lists_truth() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-weak", &[]));
    let m = Manifest::from_json(&std::fs::read_to_string(ws.out().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.kind, "weak");
    assert_eq!(m.seed, 7);
    assert_eq!(m.files.len(), 6);
    assert!((m.truth["phi_y_deg"] + 38.0).abs() < 1e-9);
    assert!((m.truth["u_exc_uV"] - 660.0).abs() < 1e-9);
    for f in &m.files {
        assert!(ws.out().join(f).is_file(), "{f}");
    }
}

#[test]
fn missing_geometry_is_a_config_error() {
    let mut cfg = small_config();
    cfg["fields"]["geometry"] = json!("no/such/layout.json");
    let ws = Workspace::new(&cfg);
    let o = ws.run("simulate-weak", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fields.geometry"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let mut cfg = small_config();
    cfg["weak"]["linewidth"] = json!(42.0);
    let ws = Workspace::new(&cfg);
    let o = ws.run("simulate-weak", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("linewidth"), "{}", stderr(&o));
}

#[test]
fn unknown_electrode_is_a_domain_error() {
    let mut cfg = small_config();
    cfg["weak"]["electrodes"] = json!([21, 999]);
    let ws = Workspace::new(&cfg);
    let o = ws.run("simulate-weak", &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("999"), "{}", stderr(&o));
}

#[test]
fn fit_weak_recovers_simulated_truth() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-weak", &[]));
    assert_ok(&ws.run("fit-weak", &[]));
    let truth = Manifest::from_json(&std::fs::read_to_string(ws.out().join("manifest.json")).unwrap())
        .unwrap()
        .truth;
    let report = FitReport::from_json(&std::fs::read_to_string(ws.out().join("fit_weak.json")).unwrap()).unwrap();
    assert!(report.diagnostics.converged);
    for name in ["phi_x_deg", "phi_y_deg", "phi_z_deg"] {
        assert!((report.value(name).unwrap() - truth[name]).abs() < 3.0, "{name}");
    }
    for name in ["freq1_MHz", "freq2_MHz", "freq3_MHz"] {
        assert!((report.value(name).unwrap() - truth[name]).abs() < 0.010, "{name}");
    }

    let residuals = std::fs::read_to_string(ws.out().join("residuals_e21.csv")).unwrap();
    let mut lines = residuals.lines();
    assert_eq!(lines.next(), Some("omega_exc_MHz,F,model,residual"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[1] - row[2] - row[3]).abs() < 1e-12);
    assert_eq!(residuals.lines().count(), 1 + 271);
}

#[test]
fn single_spectrum_is_degenerate() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-weak", &[]));
    let one = ws.out().join("spectrum_e21.csv");
    let o = ws.run("fit-weak", &["--data", one.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));
}

#[test]
fn non_numeric_cell_reports_its_location() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-weak", &[]));
    let path = ws.out().join("spectrum_e23.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[4].split(',').collect();
    cells[1] = "n/a";
    lines[4] = cells.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let o = ws.run("fit-weak", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("spectrum_e23.csv"), "{err}");
    assert!(err.contains("row 5") && err.contains("column 2"), "{err}");
}

#[test]
fn no_matching_data_is_a_config_error() {
    let ws = Workspace::new(&small_config());
    let o = ws.run("fit-strong", &["--data", "/nonexistent/*.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no files match"), "{}", stderr(&o));
}

#[test]
fn fit_strong_single_fixed_angle_round_trip() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-strong", &[]));
    let o = ws.run("fit-strong", &["--fix-angle", "x"]);
    assert_ok(&o);
    let report = FitReport::from_json(&std::fs::read_to_string(ws.out().join("fit_strong.json")).unwrap()).unwrap();
    assert!(report.get("phi_x_deg").unwrap().fixed);
    assert_eq!(report.value("phi_x_deg"), Some(-9.0));
    assert!((report.value("rabi_kHz").unwrap() - 390.0).abs() < 10.0);
    for (name, truth) in [("nbar1", 0.5), ("nbar2", 1.0), ("nbar3", 0.44)] {
        let p = report.get(name).unwrap();
        assert!((p.value - truth).abs() < 4.0 * p.stat_err, "{name}: {} ± {}", p.value, p.stat_err);
    }
    for sel in ["carrier", "bsb1", "bsb2", "bsb3"] {
        let t = std::fs::read_to_string(ws.out().join(format!("residuals_{sel}.csv"))).unwrap();
        assert!(t.starts_with("t_pulse_us,P_g,model,residual\n"));
    }
}

#[test]
fn fit_strong_all_angles_free_is_degenerate() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-strong", &[]));
    let o = ws.run("fit-strong", &["--fix-angle", "none"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));
}

#[test]
fn raman_frequency_mismatch_is_rejected() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-strong", &[]));
    let mut cfg = small_config();
    cfg["strong"]["freq_MHz"] = json!([3.76, 4.60, 5.76]);
    std::fs::write(ws.config(), serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = ws.run("fit-strong", &["--fix-angle", "x"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bsb2"), "{}", stderr(&o));
}

fn curvature_json(args: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let mut all: Vec<&str> = vec!["curvature"];
    all.extend_from_slice(args);
    let out = dir.path().display().to_string();
    all.extend_from_slice(&["--out", &out]);
    let o = run(&all);
    assert_ok(&o);
    serde_json::from_str(&std::fs::read_to_string(dir.path().join("curvature.json")).unwrap()).unwrap()
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

#[test]
fn curvature_reproduces_reference_matrix() {
    let reference = [[280.0, -16.0, -53.0], [-16.0, 133.0, 19.0], [-53.0, 19.0, 308.0]];
    let errors = [[17.0, 22.0, 6.0], [22.0, 7.0, 20.0], [6.0, 20.0, 18.0]];
    let doc = curvature_json(&[
        "--angles-deg",
        "-6,-38,-1",
        "--freq-mhz",
        "3.584,4.833,5.878",
        "--assignment",
        "2,1,3",
        "--half-widths-deg",
        "3,4,1",
    ]);
    let h = matrix(&doc["hessian_uV_per_um2"]);
    let s = matrix(&doc["systematics_uV_per_um2"]);
    for i in 0..3 {
        for j in 0..3 {
            assert!((h[i][j] - reference[i][j]).abs() <= errors[i][j], "({i},{j}): {}", h[i][j]);
            assert!(s[i][j] > 0.0);
        }
    }
}

#[test]
fn zero_angles_give_a_diagonal_tensor() {
    let doc = curvature_json(&["--angles-deg", "0,0,0", "--freq-mhz", "3,4,5"]);
    let h = matrix(&doc["hessian_uV_per_um2"]);
    let s = matrix(&doc["systematics_uV_per_um2"]);
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(h[i][j].abs() < 1e-9 * h[0][0], "({i},{j})");
            }
            assert_eq!(s[i][j], 0.0);
        }
    }
    assert!(h[0][0] < h[1][1] && h[1][1] < h[2][2]);
}

#[test]
fn curvature_from_a_fit_report_uses_its_errors() {
    let ws = Workspace::new(&small_config());
    assert_ok(&ws.run("simulate-weak", &[]));
    assert_ok(&ws.run("fit-weak", &[]));
    let report = ws.out().join("fit_weak.json");
    let doc = curvature_json(&["--report", report.to_str().unwrap()]);
    let widths: Vec<f64> = doc["half_widths_deg"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(widths.iter().all(|w| *w > 0.1 && *w < 5.0), "{widths:?}");
}

#[test]
fn malformed_report_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"model\": \"weak\", \"parameters\": [").unwrap();
    let o = run(&["curvature", "--report", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&bad, r#"{"model":"weak","parameters":[],"chi2":0,"dof":1,"residuals":{},"diagnostics":{"iterations":0,"step_norm":0,"converged":true}}"#).unwrap();
    let o = run(&["curvature", "--report", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("phi_x_deg"), "{}", stderr(&o));
}

#[test]
fn curvature_without_parameters_is_a_config_error() {
    let o = run(&["curvature", "--freq-mhz", "3,4,5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--angles-deg"), "{}", stderr(&o));
}

#[test]
fn fields_dump_every_electrode() {
    let ws = Workspace::new(&small_config());
    let o = ws.run("fields", &[]);
    assert_ok(&o);
    let csv = std::fs::read_to_string(ws.out().join("fields.csv")).unwrap();
    let ids = ionmodes_core::ElectrodeArray::load(&geometry()).unwrap().ids();
    assert_eq!(csv.lines().count(), 2 + ids.len());
    assert!(csv.starts_with("# site_um=24,0,36\nelectrode,Ex_V_per_m,Ey_V_per_m,Ez_V_per_m\n"));
    for line in csv.lines().skip(2) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[1..].iter().all(|x| x.is_finite()));
    }
    assert!(stdout(&o).contains("Ex"));
}
