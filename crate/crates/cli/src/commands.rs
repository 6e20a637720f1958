use std::io::Write;
use std::path::{Path, PathBuf};

use ionmodes_core::datasets::{self, Manifest, NoiseModel};
use ionmodes_core::geometry::curvature_systematics;
use ionmodes_core::inference::{
    self, fit_weak_seeded, seed_strong, strong_wavevector_scan, weak_position_scan, StrongProblem, WeakProblem,
};
use ionmodes_core::units::angular_to_mhz;
use ionmodes_core::{
    FieldSource, FitReport, FixAngle, IonSpecies, Matrix3, ModeAssignment, ModeConfiguration, ThermalState, Transition,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::Failure;

/// Largest accepted mismatch between a curve's recorded Raman frequency and
/// the one implied by the configured mode frequencies.
const OMEGA_R_TOLERANCE_MHZ: f64 = 1e-3;

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    let io = |e: std::io::Error| Failure::config(format!("cannot write '{}': {e}", dir.join(name).display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| io(e.error))?;
    Ok(path)
}

fn noise(cfg: &RunConfig, seed: Option<u64>) -> Result<NoiseModel, Failure> {
    let mut noise = cfg.noise;
    if let Some(s) = seed {
        noise.seed = s;
    }
    noise.validate().map_err(|e| Failure::config(format!("noise: {e}")))?;
    Ok(noise)
}

fn expand(pattern: &str) -> Result<Vec<PathBuf>, Failure> {
    let paths = glob::glob(pattern)
        .map_err(|e| Failure::config(format!("--data: bad pattern '{pattern}': {e}")))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::config(format!("--data: {e}")))?;
    if paths.is_empty() {
        return Err(Failure::config(format!("--data: no files match '{pattern}'")));
    }
    Ok(paths)
}

fn read_each<T>(paths: &[PathBuf], parse: impl Fn(&str) -> ionmodes_core::Result<T>) -> Result<Vec<T>, Failure> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::from(e).context(p.display()))?;
            parse(&text).map_err(|e| Failure::from(e).context(p.display()))
        })
        .collect()
}

fn default_pattern(dir: &Path, file_glob: &str) -> String {
    dir.join(file_glob).to_string_lossy().into_owned()
}

fn print_report(report: &FitReport) {
    println!("{:<14} {:>12} {:>10} {:>10}", "parameter", "value", "stat", "sys");
    for p in &report.parameters {
        if p.fixed {
            println!("{:<14} {:>12.4} {:>21}", p.name, p.value, "(fixed)");
        } else {
            println!("{:<14} {:>12.4} {:>10.4} {:>10.4}", p.name, p.value, p.stat_err, p.sys_err);
        }
    }
    println!("chi2/dof = {:.1}/{} = {:.3}", report.chi2, report.dof, report.reduced_chi2());
    for w in &report.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
}

/// Write the report; a fit that did not converge still leaves its report
/// behind but exits with its own code.
fn finish(dir: &Path, name: &str, report: &FitReport) -> Result<(), Failure> {
    let path = write_atomic(dir, name, &report.to_json()?)?;
    print_report(report);
    println!("wrote {}", path.display());
    if report.diagnostics.converged {
        Ok(())
    } else {
        Err(Failure {
            code: Failure::NOT_CONVERGED,
            message: format!(
                "fit did not converge after {} iterations (report written to {})",
                report.diagnostics.iterations,
                path.display()
            ),
        })
    }
}

pub fn simulate_weak(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let weak = cfg.weak()?;
    let truth = weak
        .truth
        .ok_or_else(|| Failure::config("weak.truth: required for simulate-weak"))?
        .params("weak.truth")?;
    let noise = noise(&cfg, seed)?;
    let spectra = datasets::simulate_weak(
        &truth,
        &weak.experiment(cfg.ion()?)?,
        weak.duration(),
        &cfg.field_source()?,
        &cfg.site()?.position,
        &weak.electrodes,
        &weak.grid()?,
        &noise,
    )?;

    let dir = cfg.output(out);
    let mut files = Vec::new();
    for s in &spectra {
        let name = format!("spectrum_e{}.csv", s.electrode);
        write_atomic(&dir, &name, &datasets::write_spectrum(s))?;
        files.push(name);
    }
    let manifest = Manifest {
        kind: "weak".into(),
        seed: noise.seed,
        noise,
        truth: truth.named(),
        files,
    };
    write_atomic(&dir, "manifest.json", &manifest.to_json()?)?;
    println!("wrote {} spectra and manifest.json to {}", spectra.len(), dir.display());
    Ok(())
}

pub fn simulate_strong(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let strong = cfg.strong()?;
    let truth = strong
        .truth
        .ok_or_else(|| Failure::config("strong.truth: required for simulate-strong"))?;
    let modes = ModeConfiguration::from_display(truth.angles_deg, strong.freq_mhz)
        .map_err(|e| Failure::config(format!("strong: {e}")))?;
    let raman = strong.raman(&truth)?;
    let thermal = ThermalState::new(truth.nbar, strong.n_max)
        .map_err(|e| Failure::config(format!("strong.truth.nbar: {e}")))?;
    let (carrier, sideband) = strong.times()?;
    let schedule: Vec<(Transition, Vec<f64>)> = Transition::ALL
        .iter()
        .map(|t| (*t, if *t == Transition::Carrier { carrier.clone() } else { sideband.clone() }))
        .collect();
    let noise = noise(&cfg, seed)?;
    let curves = datasets::simulate_strong(&modes, &cfg.ion()?, &raman, &thermal, &schedule, &noise)?;

    let dir = cfg.output(out);
    let mut files = Vec::new();
    for c in &curves {
        let name = format!("flopping_{}.csv", c.transition);
        let omega_r = strong.qubit_mhz + angular_to_mhz(c.transition.detuning(&modes));
        write_atomic(&dir, &name, &datasets::write_flopping(c, omega_r))?;
        files.push(name);
    }
    let mut truth_map = truth.params().named();
    for (k, f) in strong.freq_mhz.iter().enumerate() {
        truth_map.insert(format!("freq{}_MHz", k + 1), *f);
    }
    let manifest = Manifest {
        kind: "strong".into(),
        seed: noise.seed,
        noise,
        truth: truth_map,
        files,
    };
    write_atomic(&dir, "manifest.json", &manifest.to_json()?)?;
    println!("wrote {} flopping curves and manifest.json to {}", curves.len(), dir.display());
    Ok(())
}

pub fn fit_weak(config: &Path, out: Option<&Path>, data: Option<&str>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let weak = cfg.weak()?;
    let dir = cfg.output(out);
    let pattern = data.map_or_else(|| default_pattern(&dir, "spectrum_e*.csv"), str::to_owned);
    let spectra = read_each(&expand(&pattern)?, datasets::parse_spectrum)?;

    let fields = cfg.field_source()?;
    let site = cfg.site()?;
    let problem = WeakProblem::new(weak.experiment(cfg.ion()?)?, weak.duration(), spectra, &fields, &site.position)?;
    let mut fit = match &weak.initial {
        Some(v) => inference::fit_weak(&problem, &v.params("weak.initial")?)?,
        None => fit_weak_seeded(&problem)?,
    };
    if site.uncertainty.iter().any(|u| *u > 0.0) {
        if fields.is_geometric() {
            let scan = weak_position_scan(&problem, &fields, &site, &fit)?;
            fit.report.apply_systematics(&scan);
        } else {
            fit.report
                .diagnostics
                .warnings
                .push("fields come from a table; ion-position systematics not evaluated".into());
        }
    }

    let models = problem.model_curves(&fit.params);
    for (d, model) in problem.datasets.iter().zip(&models) {
        let mut csv = String::from("omega_exc_MHz,F,model,residual\n");
        for (p, m) in d.spectrum.points.iter().zip(model) {
            csv.push_str(&format!("{},{},{},{}\n", angular_to_mhz(p.omega_exc), p.f, m, p.f - m));
        }
        write_atomic(&dir, &format!("residuals_e{}.csv", d.spectrum.electrode), &csv)?;
    }
    finish(&dir, "fit_weak.json", &fit.report)
}

pub fn fit_strong(config: &Path, out: Option<&Path>, data: Option<&str>, fix: FixAngle) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let strong = cfg.strong()?;
    let dir = cfg.output(out);
    let pattern = data.map_or_else(|| default_pattern(&dir, "flopping_*.csv"), str::to_owned);
    let paths = expand(&pattern)?;
    let parsed = read_each(&paths, datasets::parse_flopping)?;

    // frequencies only; the angles play no part in the detunings
    let freqs = ModeConfiguration::from_display([0.0; 3], strong.freq_mhz)
        .map_err(|e| Failure::config(format!("strong.freq_MHz: {e}")))?;
    for (path, (curve, omega_r)) in paths.iter().zip(&parsed) {
        if let Some(recorded) = omega_r {
            let expected = strong.qubit_mhz + angular_to_mhz(curve.transition.detuning(&freqs));
            if (recorded - expected).abs() > OMEGA_R_TOLERANCE_MHZ {
                return Err(Failure {
                    code: Failure::DOMAIN,
                    message: format!(
                        "{}: {} curve taken at omega_R = {recorded} MHz, but the configured frequencies imply {expected:.6} MHz",
                        path.display(),
                        curve.transition
                    ),
                });
            }
        }
    }
    let curves = parsed.into_iter().map(|(c, _)| c).collect();
    let problem = StrongProblem::new(cfg.ion()?, freqs.omega(), strong.raman.wavevector()?, strong.n_max, curves)?;
    let reference = strong.reference_angles();
    let initial = match &strong.initial {
        Some(v) => v.params(),
        None => seed_strong(&problem, reference)?,
    };
    let mut fit = inference::fit_strong(&problem, reference, fix, &initial)?;
    let tilt = strong.raman.direction_uncertainty_deg.to_radians();
    if tilt > 0.0 {
        let scan = strong_wavevector_scan(&problem, reference, fix, &fit, tilt);
        fit.report.apply_systematics(&scan);
    }

    let models = problem.model_curves(&fit.params)?;
    for (c, model) in problem.curves.iter().zip(&models) {
        let mut csv = String::from("t_pulse_us,P_g,model,residual\n");
        for (p, m) in c.points.iter().zip(model) {
            csv.push_str(&format!("{},{},{},{}\n", p.t * 1e6, p.p, m, p.p - m));
        }
        write_atomic(&dir, &format!("residuals_{}.csv", c.transition), &csv)?;
    }
    finish(&dir, "fit_strong.json", &fit.report)
}

#[derive(Debug)]
pub struct CurvatureRequest {
    pub report: Option<PathBuf>,
    pub angles_deg: Option<[f64; 3]>,
    pub freq_mhz: Option<[f64; 3]>,
    pub assignment: [usize; 3],
    pub half_widths_deg: Option<[f64; 3]>,
    pub mass_u: f64,
    pub charge_e: f64,
    pub out: Option<PathBuf>,
}

fn rows(m: &Matrix3<f64>) -> Vec<[f64; 3]> {
    (0..3).map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]).collect()
}

pub fn curvature(req: &CurvatureRequest) -> Result<(), Failure> {
    let (modes, report_widths) = if let Some(path) = &req.report {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::from(e).context(path.display()))?;
        let report = FitReport::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let modes = report
            .mode_configuration()
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let widths = ["phi_x_deg", "phi_y_deg", "phi_z_deg"]
            .map(|n| report.get(n).map_or(0.0, |p| p.stat_err.hypot(p.sys_err)));
        (modes, widths)
    } else {
        let angles = req
            .angles_deg
            .ok_or_else(|| Failure::config("missing --angles-deg (or give --report)"))?;
        let freq = req
            .freq_mhz
            .ok_or_else(|| Failure::config("missing --freq-mhz (or give --report)"))?;
        (ModeConfiguration::from_display(angles, freq)?, [0.0; 3])
    };
    let widths = req.half_widths_deg.unwrap_or(report_widths);
    let assignment = ModeAssignment::from_one_based(req.assignment)
        .map_err(|e| Failure::config(format!("--assignment: {e}")))?;
    let ion = IonSpecies::from_atomic(req.mass_u, req.charge_e)?;
    let tensor = curvature_systematics(&modes, &ion, assignment, widths.map(f64::to_radians))?;
    let sys = tensor.systematics.unwrap_or_else(Matrix3::zeros);

    let a = assignment.one_based();
    println!(
        "curvature in µV/µm² (assignment {},{},{}; angle half-widths {:?}°)",
        a[0], a[1], a[2], widths
    );
    for i in 0..3 {
        let line: Vec<String> = (0..3)
            .map(|j| format!("{:>9.2} ± {:<7.2}", tensor.hessian[(i, j)], sys[(i, j)]))
            .collect();
        println!("  {}", line.join(" "));
    }
    let eig = tensor.eigenvalues();
    println!("eigenvalues: {:.2}, {:.2}, {:.2}", eig[0], eig[1], eig[2]);

    if let Some(dir) = &req.out {
        let doc = json!({
            "angles_deg": modes.angles_deg(),
            "freq_MHz": modes.freq_mhz(),
            "assignment": a,
            "mass_u": req.mass_u,
            "charge_e": req.charge_e,
            "half_widths_deg": widths,
            "hessian_uV_per_um2": rows(&tensor.hessian),
            "systematics_uV_per_um2": rows(&sys),
            "eigenvalues_uV_per_um2": [eig[0], eig[1], eig[2]],
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::config(e.to_string()))?;
        let path = write_atomic(dir, "curvature.json", &text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn fields(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let site = cfg.site()?;
    let source = cfg.field_source()?;
    let ids = match &source {
        FieldSource::Geometry(array) => array.ids(),
        FieldSource::Table(table) => table.0.keys().copied().collect(),
    };
    let r = site.position;
    let mut csv = format!("# site_um={},{},{}\nelectrode,Ex_V_per_m,Ey_V_per_m,Ez_V_per_m\n", r.x, r.y, r.z);
    println!("fields per volt at ({}, {}, {}) µm, V/m", r.x, r.y, r.z);
    println!("{:>9} {:>12} {:>12} {:>12}", "electrode", "Ex", "Ey", "Ez");
    for id in ids {
        let e = source.field(id, &r)?;
        println!("{id:>9} {:>12.3} {:>12.3} {:>12.3}", e.x, e.y, e.z);
        csv.push_str(&format!("{id},{},{},{}\n", e.x, e.y, e.z));
    }
    if let Some(dir) = out {
        let path = write_atomic(dir, "fields.csv", &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
