//! Monte-Carlo round trips through synthesis and fitting.

use ionmodes_core::datasets::{simulate_strong, simulate_weak, NoiseModel};
use ionmodes_core::inference::{
    fit_strong, fit_weak, strong_wavevector_scan, weak_position_scan, StrongParams, StrongProblem, WeakParams,
    WeakProblem,
};
use ionmodes_core::strong::DEFAULT_N_MAX;
use ionmodes_core::units::mhz_to_angular;
use ionmodes_core::weak::{WeakExperiment, DEFAULT_V_MAX};
use ionmodes_core::*;

const SEEDS: u64 = 20;

fn weak_truth() -> WeakParams {
    WeakParams::new(
        ModeConfiguration::from_display([-6.0, -38.0, -1.0], [3.584, 4.833, 5.878]).unwrap(),
        660e-6,
    )
    .unwrap()
}

fn experiment() -> WeakExperiment {
    WeakExperiment::new(IonSpecies::mg25(), ProbeLaser::demo(), DEFAULT_V_MAX).unwrap()
}

fn site() -> Vector3<f64> {
    Vector3::new(24.0, 0.0, 36.0)
}

fn weak_problem(seed: u64) -> WeakProblem {
    let fields = FieldSource::Geometry(ElectrodeArray::demo());
    let grid: Vec<f64> = (0..=310).map(|k| mhz_to_angular(3.2 + 0.01 * k as f64)).collect();
    let ids: Vec<u32> = (21..=30).collect();
    let spectra = simulate_weak(
        &weak_truth(),
        &experiment(),
        10e-6,
        &fields,
        &site(),
        &ids,
        &grid,
        &NoiseModel::with_seed(seed),
    )
    .unwrap();
    WeakProblem::new(experiment(), 10e-6, spectra, &fields, &site()).unwrap()
}

fn weak_guess() -> WeakParams {
    let x = weak_truth().display();
    WeakParams::from_display(&[
        x[0] + 5.0,
        x[1] - 5.0,
        x[2] + 5.0,
        x[3] + 0.05,
        x[4] - 0.05,
        x[5] + 0.05,
        x[6] * 1.1,
    ])
    .unwrap()
}

fn strong_config() -> ModeConfiguration {
    ModeConfiguration::from_display([-9.0, -51.0, -15.0], [3.76, 4.54, 5.76]).unwrap()
}

fn strong_truth() -> StrongParams {
    let raman = RamanGeometry::demo(390.0, 13.0);
    StrongParams {
        angles: strong_config().angles(),
        nbar: [0.5, 1.0, 0.44],
        rabi: raman.rabi,
        decoherence: raman.decoherence,
    }
}

fn strong_problem(seed: u64, points: usize) -> StrongProblem {
    let cfg = strong_config();
    let raman = RamanGeometry::demo(390.0, 13.0);
    let thermal = ThermalState::new([0.5, 1.0, 0.44], DEFAULT_N_MAX).unwrap();
    let times = |t_max: f64| -> Vec<f64> {
        (0..points).map(|k| t_max * 1e-6 * k as f64 / (points - 1) as f64).collect()
    };
    let schedule: Vec<_> = Transition::ALL
        .iter()
        .map(|t| (*t, if *t == Transition::Carrier { times(15.0) } else { times(30.0) }))
        .collect();
    let curves = simulate_strong(
        &cfg,
        &IonSpecies::mg25(),
        &raman,
        &thermal,
        &schedule,
        &NoiseModel::with_seed(seed),
    )
    .unwrap();
    StrongProblem::new(IonSpecies::mg25(), cfg.omega(), raman.wavevector, DEFAULT_N_MAX, curves).unwrap()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Empirical spread of each free parameter against its mean reported error.
fn assert_calibrated(reports: &[FitReport]) {
    for p in reports[0].parameters.iter().filter(|p| !p.fixed) {
        let values: Vec<f64> = reports.iter().map(|r| r.value(&p.name).unwrap()).collect();
        let errs: Vec<f64> = reports.iter().map(|r| r.get(&p.name).unwrap().stat_err).collect();
        let (_, sd) = mean_sd(&values);
        let (err, _) = mean_sd(&errs);
        let ratio = sd / err;
        assert!((1.0 / 1.5..=1.5).contains(&ratio), "{}: spread {sd:.4} vs reported {err:.4}", p.name);
    }
}

#[test]
fn chi2_at_truth_matches_noise_level() {
    for seed in 0..SEEDS {
        let (chi2, dof) = weak_problem(seed).chi_squared(&weak_truth()).unwrap();
        let reduced = chi2 / dof as f64;
        assert!((0.7..=1.3).contains(&reduced), "seed {seed}: {reduced}");
    }
}

#[test]
fn weak_errors_are_calibrated() {
    let reports: Vec<FitReport> = (0..SEEDS)
        .map(|seed| fit_weak(&weak_problem(seed), &weak_guess()).unwrap().report)
        .collect();
    assert_calibrated(&reports);
    for r in &reports {
        assert!(r.diagnostics.converged);
        assert!((0.7..=1.3).contains(&r.reduced_chi2()));
    }
}

#[test]
fn strong_errors_are_calibrated() {
    let truth = strong_truth();
    let reports: Vec<FitReport> = (0..SEEDS)
        .map(|seed| {
            fit_strong(&strong_problem(seed, 121), truth.angles, FixAngle::X, &truth)
                .unwrap()
                .report
        })
        .collect();
    assert_calibrated(&reports);
}

#[test]
fn fits_are_deterministic() {
    let a = fit_weak(&weak_problem(3), &weak_guess()).unwrap().report;
    let b = fit_weak(&weak_problem(3), &weak_guess()).unwrap().report;
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let truth = strong_truth();
    let c = fit_strong(&strong_problem(3, 41), truth.angles, FixAngle::Iterate, &truth).unwrap();
    let d = fit_strong(&strong_problem(3, 41), truth.angles, FixAngle::Iterate, &truth).unwrap();
    assert_eq!(c.report.to_json().unwrap(), d.report.to_json().unwrap());
}

#[test]
fn weak_position_scan_gives_degree_scale_systematics() {
    let problem = weak_problem(0);
    let fit = fit_weak(&problem, &weak_guess()).unwrap();
    let fields = FieldSource::Geometry(ElectrodeArray::demo());
    let s = TrapSite::new(site(), Vector3::new(1.0, 1.0, 5.0)).unwrap();
    let scan = weak_position_scan(&problem, &fields, &s, &fit).unwrap();
    assert_eq!(scan.corners_total, 8);
    assert_eq!(scan.corners_used, 8, "{:?}", scan.warnings);
    let mut report = fit.report.clone();
    report.apply_systematics(&scan);
    let sys = report.angle_systematics_deg();
    assert!(sys.iter().all(|s| (0.1..10.0).contains(s)), "{sys:?}");
    assert!(sys.iter().cloned().fold(0.0, f64::max) > 1.0, "{sys:?}");
}

#[test]
fn wavevector_tilt_gives_degree_scale_systematics() {
    let truth = strong_truth();
    let problem = strong_problem(0, 61);
    let fit = fit_strong(&problem, truth.angles, FixAngle::X, &truth).unwrap();
    let scan = strong_wavevector_scan(&problem, truth.angles, FixAngle::X, &fit, 5f64.to_radians());
    assert_eq!(scan.corners_used, 2, "{:?}", scan.warnings);
    let worst = ["phi_y_deg", "phi_z_deg"]
        .iter()
        .map(|n| scan.half_widths[*n])
        .fold(0.0, f64::max);
    assert!((1.0..15.0).contains(&worst), "{:?}", scan.half_widths);
}
