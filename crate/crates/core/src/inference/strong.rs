//! Combined fit of carrier and blue-sideband flopping curves.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;

use super::lm::{minimize, FreeParam, LmSettings, Residuals};
use super::{build_report, chi2_dof, systematic_scan, FitParameter, FitReport, FixAngle, SystematicScan};
use crate::error::{Error, Result};
use crate::geometry::{rotation_matrix, IonSpecies};
use crate::strong::{FloppingCurve, RamanGeometry, RateTable, ThermalState, Transition};
use crate::units::{angular_to_khz, angular_to_mhz, khz_to_angular};

const NAMES: [&str; 8] = [
    "phi_x_deg",
    "phi_y_deg",
    "phi_z_deg",
    "nbar1",
    "nbar2",
    "nbar3",
    "rabi_kHz",
    "gamma_dec_kHz",
];
const FREQ_NAMES: [&str; 3] = ["freq1_MHz", "freq2_MHz", "freq3_MHz"];
const NBAR_MAX: f64 = 10.0;

/// Flopping data plus everything the fit holds fixed: calibrated mode
/// frequencies (rad/s), the Raman wave vector (rad/m) and the Fock cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongProblem {
    pub ion: IonSpecies,
    pub omega: [f64; 3],
    pub wavevector: Vector3<f64>,
    pub n_max: usize,
    pub curves: Vec<FloppingCurve>,
}

/// Angles (rad), mean occupations, base Rabi rate and decoherence rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongParams {
    pub angles: [f64; 3],
    pub nbar: [f64; 3],
    pub rabi: f64,
    pub decoherence: f64,
}

impl StrongParams {
    pub fn display(&self) -> [f64; 8] {
        let a = self.angles.map(f64::to_degrees);
        [
            a[0],
            a[1],
            a[2],
            self.nbar[0],
            self.nbar[1],
            self.nbar[2],
            angular_to_khz(self.rabi),
            angular_to_khz(self.decoherence),
        ]
    }

    /// Values keyed by their report names.
    pub fn named(&self) -> BTreeMap<String, f64> {
        NAMES.iter().map(|n| n.to_string()).zip(self.display()).collect()
    }

    pub fn from_display(x: &[f64]) -> Self {
        Self {
            angles: [x[0], x[1], x[2]].map(f64::to_radians),
            nbar: [x[3], x[4], x[5]],
            rabi: khz_to_angular(x[6]),
            decoherence: khz_to_angular(x[7]),
        }
    }

    pub fn from_report(report: &FitReport) -> Result<Self> {
        let x = NAMES
            .iter()
            .map(|n| {
                report
                    .value(n)
                    .ok_or_else(|| Error::Parse(format!("fit report has no parameter '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_display(&x))
    }
}

#[derive(Debug, Clone)]
pub struct StrongFit {
    pub params: StrongParams,
    pub report: FitReport,
}

impl StrongProblem {
    pub fn new(
        ion: IonSpecies,
        omega: [f64; 3],
        wavevector: Vector3<f64>,
        n_max: usize,
        curves: Vec<FloppingCurve>,
    ) -> Result<Self> {
        ThermalState::new([0.0; 3], n_max)?;
        if omega.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::domain("mode frequencies must be positive"));
        }
        if !(wavevector.norm() > 0.0 && wavevector.iter().all(|v| v.is_finite())) {
            return Err(Error::domain("Raman wave vector must be non-zero and finite"));
        }
        for t in Transition::ALL {
            if !curves.iter().any(|c| c.transition == t) {
                return Err(Error::domain(format!("no flopping curve for the {t} transition")));
            }
        }
        Ok(Self {
            ion,
            omega,
            wavevector,
            n_max,
            curves,
        })
    }

    /// The same data with the wave vector turned by `angle` (rad) about the
    /// surface normal.
    pub fn tilted(&self, angle: f64) -> Self {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        Self {
            wavevector: rot * self.wavevector,
            ..self.clone()
        }
    }

    pub fn n_points(&self) -> usize {
        self.curves.iter().map(|c| c.len()).sum()
    }

    /// Model `P_g` at each curve's pulse lengths.
    pub fn model_curves(&self, params: &StrongParams) -> Result<Vec<Vec<f64>>> {
        let r = rotation_matrix(params.angles[0], params.angles[1], params.angles[2])?;
        let modes: [Vector3<f64>; 3] = [0, 1, 2].map(|i| r.column(i).into_owned());
        let raman = RamanGeometry {
            wavevector: self.wavevector,
            direction_uncertainty: 0.0,
            rabi: params.rabi,
            decoherence: params.decoherence,
        };
        let thermal = ThermalState {
            nbar: params.nbar.map(|n| n.max(0.0)),
            n_max: self.n_max,
        };
        Ok(self
            .curves
            .iter()
            .map(|c| {
                let table = RateTable::new(c.transition, &modes, self.omega, &self.ion, &raman, &thermal);
                c.points.iter().map(|p| table.survival(p.t)).collect()
            })
            .collect())
    }

    fn weighted_residuals(&self, params: &StrongParams) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .model_curves(params)?
            .iter()
            .zip(&self.curves)
            .map(|(model, c)| c.points.iter().zip(model).map(|(p, m)| (p.p - m) / p.sigma).collect())
            .collect())
    }

    /// `(χ², dof)` for the free-parameter count implied by `fix`.
    pub fn chi_squared(&self, params: &StrongParams, fix: FixAngle) -> Result<(f64, usize)> {
        self.check_weights()?;
        let r = self.weighted_residuals(params)?.concat();
        let n_free = if fix == FixAngle::None { 8 } else { 7 };
        chi2_dof(&r, n_free)
    }

    fn check_weights(&self) -> Result<()> {
        if self
            .curves
            .iter()
            .flat_map(|c| &c.points)
            .any(|p| !(p.sigma > 0.0 && p.sigma.is_finite()))
        {
            return Err(Error::domain("fitting needs positive uncertainties on every point"));
        }
        Ok(())
    }

    fn residual_map(&self, r: &[f64]) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        let mut offset = 0;
        for c in &self.curves {
            let mut key = c.transition.to_string();
            let mut k = 2;
            while out.contains_key(&key) {
                key = format!("{}_{k}", c.transition);
                k += 1;
            }
            out.insert(key, r[offset..offset + c.len()].to_vec());
            offset += c.len();
        }
        out
    }
}

/// Residuals with some entries of the full display vector held fixed.
struct Partial<'a> {
    problem: &'a StrongProblem,
    base: [f64; 8],
    free: Vec<usize>,
}

impl Partial<'_> {
    fn full(&self, x: &[f64]) -> [f64; 8] {
        let mut v = self.base;
        for (slot, value) in self.free.iter().zip(x) {
            v[*slot] = *value;
        }
        v
    }
}

impl Residuals for Partial<'_> {
    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let params = StrongParams::from_display(&self.full(x));
        match self.problem.weighted_residuals(&params) {
            Ok(r) => r.concat(),
            Err(_) => vec![f64::INFINITY; self.problem.n_points()],
        }
    }
}

fn bounds(slot: usize, value: f64) -> FreeParam {
    let name = NAMES[slot];
    match slot {
        0..=2 => FreeParam::new(name, value, -90.0, 90.0, 10.0),
        3..=5 => FreeParam::new(name, value, 0.0, NBAR_MAX, 1.0),
        6 => FreeParam::new(name, value, 1e-6, 1e6, value.abs().max(1.0)),
        _ => FreeParam::new(name, value, 0.0, 1e6, value.abs().max(1.0)),
    }
}

/// Fit with one angle pinned to its reference value (or, for
/// [`FixAngle::Iterate`], each angle in turn with the outcomes averaged).
/// `reference_angles` and the angles in `initial` are in radians.
pub fn fit_strong(
    problem: &StrongProblem,
    reference_angles: [f64; 3],
    fix: FixAngle,
    initial: &StrongParams,
) -> Result<StrongFit> {
    problem.check_weights()?;
    match fix {
        FixAngle::Iterate => {
            let choices: Vec<Result<StrongFit>> = [FixAngle::X, FixAngle::Y, FixAngle::Z]
                .par_iter()
                .map(|f| fit_strong(problem, reference_angles, *f, initial))
                .collect();
            let fits = choices.into_iter().collect::<Result<Vec<_>>>()?;
            aggregate(problem, &fits)
        }
        _ => fit_single(problem, reference_angles, fix, initial),
    }
}

fn fit_single(
    problem: &StrongProblem,
    reference_angles: [f64; 3],
    fix: FixAngle,
    initial: &StrongParams,
) -> Result<StrongFit> {
    let mut start = *initial;
    let fixed_slot = fix.index();
    if let Some(j) = fixed_slot {
        start.angles[j] = reference_angles[j];
    }
    let base = start.display();
    let free: Vec<usize> = (0..8).filter(|s| Some(*s) != fixed_slot).collect();
    let params: Vec<FreeParam> = free.iter().map(|&s| bounds(s, base[s])).collect();
    let partial = Partial { problem, base, free };
    let outcome = minimize(&partial, &params, &LmSettings::default())?;
    let full = partial.full(&outcome.x);

    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut fixed: Vec<(String, f64)> = Vec::new();
    if let Some(j) = fixed_slot {
        fixed.push((NAMES[j].to_string(), full[j]));
    }
    fixed.extend(FREQ_NAMES.iter().zip(problem.omega).map(|(n, w)| (n.to_string(), angular_to_mhz(w))));
    let mut report = build_report(
        &format!("strong (fixed {fix})"),
        &names,
        &outcome,
        &fixed,
        problem.residual_map(&outcome.residuals),
    );
    report.parameters.sort_by_key(|p| order_key(&p.name));
    Ok(StrongFit {
        params: StrongParams::from_display(&full),
        report,
    })
}

fn order_key(name: &str) -> usize {
    NAMES
        .iter()
        .chain(FREQ_NAMES.iter())
        .position(|n| *n == name)
        .unwrap_or(usize::MAX)
}

/// Unweighted mean over the fixed-angle choices. Half the spread between
/// choices is reported as a systematic error; pairs differing by more than
/// three combined statistical errors raise a warning.
fn aggregate(problem: &StrongProblem, fits: &[StrongFit]) -> Result<StrongFit> {
    let values: Vec<[f64; 8]> = fits.iter().map(|f| f.params.display()).collect();
    let mut mean = [0.0; 8];
    for v in &values {
        for s in 0..8 {
            mean[s] += v[s] / values.len() as f64;
        }
    }
    let params = StrongParams::from_display(&mean);
    let residuals = problem.weighted_residuals(&params)?.concat();
    let (chi2, dof) = chi2_dof(&residuals, 7)?;

    let mut warnings = Vec::new();
    let mut parameters = Vec::new();
    for (s, name) in NAMES.iter().enumerate() {
        let per: Vec<&FitParameter> = fits.iter().map(|f| f.report.get(name).expect("parameter present")).collect();
        let free: Vec<&&FitParameter> = per.iter().filter(|p| !p.fixed).collect();
        let stat_err = free.iter().map(|p| p.stat_err).sum::<f64>() / free.len().max(1) as f64;
        let lo = per.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
        let hi = per.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
        for a in 0..free.len() {
            for b in a + 1..free.len() {
                let combined = free[a].stat_err.hypot(free[b].stat_err).max(1e-9);
                if (free[a].value - free[b].value).abs() > 3.0 * combined {
                    warnings.push(format!(
                        "{name}: fixed-angle choices disagree ({:.4} vs {:.4}, combined error {:.2e})",
                        free[a].value, free[b].value, combined
                    ));
                }
            }
        }
        parameters.push(FitParameter {
            name: name.to_string(),
            value: mean[s],
            stat_err,
            sys_err: 0.5 * (hi - lo),
            fixed: false,
        });
    }
    parameters.extend(FREQ_NAMES.iter().zip(problem.omega).map(|(n, w)| FitParameter {
        name: n.to_string(),
        value: angular_to_mhz(w),
        stat_err: 0.0,
        sys_err: 0.0,
        fixed: true,
    }));
    for f in fits {
        warnings.extend(f.report.diagnostics.warnings.iter().cloned());
    }
    let report = FitReport {
        model: "strong (fixed-angle average)".into(),
        parameters,
        chi2,
        dof,
        residuals: problem.residual_map(&residuals),
        diagnostics: super::Diagnostics {
            iterations: fits.iter().map(|f| f.report.diagnostics.iterations).sum(),
            step_norm: fits.iter().map(|f| f.report.diagnostics.step_norm).fold(0.0, f64::max),
            converged: fits.iter().all(|f| f.report.diagnostics.converged),
            warnings,
        },
        per_choice: fits.iter().map(|f| f.report.clone()).collect(),
    };
    Ok(StrongFit { params, report })
}

/// Starting point: reference angles, `n̄ = 0.5` on every mode, the base
/// Rabi rate that best matches the carrier curve on a 1 % grid, and a
/// decoherence rate of 2 % of it.
pub fn seed_strong(problem: &StrongProblem, reference_angles: [f64; 3]) -> Result<StrongParams> {
    let carrier = problem
        .curves
        .iter()
        .find(|c| c.transition == Transition::Carrier)
        .ok_or_else(|| Error::domain("no carrier curve to seed the Rabi rate"))?;
    let only_carrier = StrongProblem {
        curves: vec![carrier.clone()],
        ..problem.clone()
    };
    let candidates: Vec<f64> = (0..=700).map(|k| 1.0 * 1.01f64.powi(k)).collect();
    let best = candidates
        .par_iter()
        .map(|&khz| {
            let params = StrongParams {
                angles: reference_angles,
                nbar: [0.5; 3],
                rabi: khz_to_angular(khz),
                decoherence: khz_to_angular(0.02 * khz),
            };
            let cost = only_carrier
                .weighted_residuals(&params)
                .map(|r| r.concat().iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(f64::INFINITY);
            (cost, khz)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .expect("non-empty candidate list");
    Ok(StrongParams {
        angles: reference_angles,
        nbar: [0.5; 3],
        rabi: khz_to_angular(best.1),
        decoherence: khz_to_angular(0.02 * best.1),
    })
}

/// Systematic half-widths from refitting with the Raman wave vector turned
/// by `±half_width` (rad) in the surface plane.
pub fn strong_wavevector_scan(
    problem: &StrongProblem,
    reference_angles: [f64; 3],
    fix: FixAngle,
    baseline: &StrongFit,
    half_width: f64,
) -> SystematicScan {
    systematic_scan(&[half_width], |offset| {
        let tilted = problem.tilted(offset[0]);
        Ok(fit_strong(&tilted, reference_angles, fix, &baseline.params)?.report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ModeConfiguration;
    use crate::strong::{flopping_curve, FloppingPoint, DEFAULT_N_MAX};

    fn truth_config() -> ModeConfiguration {
        ModeConfiguration::from_display([-9.0, -51.0, -15.0], [3.76, 4.54, 5.76]).unwrap()
    }

    fn truth() -> StrongParams {
        StrongParams {
            angles: truth_config().angles(),
            nbar: [0.5, 1.0, 0.44],
            rabi: khz_to_angular(390.0),
            decoherence: khz_to_angular(13.0),
        }
    }

    fn times(t_max_us: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| t_max_us * 1e-6 * k as f64 / (n - 1) as f64).collect()
    }

    fn problem() -> StrongProblem {
        let cfg = truth_config();
        let raman = RamanGeometry::demo(390.0, 13.0);
        let thermal = ThermalState::new([0.5, 1.0, 0.44], DEFAULT_N_MAX).unwrap();
        let curves = Transition::ALL
            .iter()
            .map(|&t| {
                let grid = if t == Transition::Carrier { times(12.0, 60) } else { times(30.0, 60) };
                let c = flopping_curve(t, &grid, &cfg, &IonSpecies::mg25(), &raman, &thermal).unwrap();
                let points = c.points.into_iter().map(|p| FloppingPoint { sigma: 0.02, ..p }).collect();
                FloppingCurve::new(t, points).unwrap()
            })
            .collect();
        StrongProblem::new(IonSpecies::mg25(), cfg.omega(), raman.wavevector, DEFAULT_N_MAX, curves).unwrap()
    }

    fn perturbed() -> StrongParams {
        let t = truth();
        StrongParams {
            angles: [t.angles[0] + 0.05, t.angles[1] - 0.05, t.angles[2] + 0.05],
            nbar: [0.6, 0.9, 0.5],
            rabi: t.rabi * 1.03,
            decoherence: t.decoherence * 1.1,
        }
    }

    #[test]
    fn truth_gives_zero_chi2_and_dof_bookkeeping() {
        let p = problem();
        let (chi2, dof) = p.chi_squared(&truth(), FixAngle::X).unwrap();
        assert!(chi2 < 1e-20, "{chi2}");
        assert_eq!(dof, 240 - 7);
        assert_eq!(p.chi_squared(&truth(), FixAngle::None).unwrap().1 + 1, dof);
    }

    #[test]
    fn noiseless_round_trip_each_fixed_angle() {
        let p = problem();
        let t = truth();
        for fix in [FixAngle::X, FixAngle::Y, FixAngle::Z] {
            let fit = fit_strong(&p, t.angles, fix, &perturbed()).unwrap();
            assert!(fit.report.diagnostics.converged, "{fix}");
            for (got, want) in fit.params.display().iter().zip(t.display()) {
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{fix}: {got} vs {want}");
            }
            assert_eq!(fit.report.parameters.len(), 11);
            assert!(fit.report.get(NAMES[fix.index().unwrap()]).unwrap().fixed);
        }
    }

    #[test]
    fn iterate_averages_three_choices() {
        let p = problem();
        let t = truth();
        let fit = fit_strong(&p, t.angles, FixAngle::Iterate, &perturbed()).unwrap();
        assert_eq!(fit.report.per_choice.len(), 3);
        for (got, want) in fit.params.display().iter().zip(t.display()) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
        assert!(fit.report.get("phi_x_deg").unwrap().sys_err < 1e-5);
        assert_eq!(fit.report.dof, 240 - 7);
    }

    #[test]
    fn three_free_angles_are_degenerate() {
        let p = problem();
        match fit_strong(&p, truth().angles, FixAngle::None, &perturbed()) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("phi_"), "{msg}"),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn seed_finds_rabi_rate() {
        let p = problem();
        let s = seed_strong(&p, truth().angles).unwrap();
        let khz = angular_to_khz(s.rabi);
        assert!((khz - 390.0).abs() < 390.0 * 0.03, "{khz}");
    }

    #[test]
    fn missing_sideband_is_rejected() {
        let mut p = problem();
        p.curves.pop();
        assert!(StrongProblem::new(p.ion, p.omega, p.wavevector, p.n_max, p.curves).is_err());
    }

    #[test]
    fn reported_params_reproduce_model() {
        let p = problem();
        let fit = fit_strong(&p, truth().angles, FixAngle::Y, &perturbed()).unwrap();
        let again = StrongParams::from_report(&fit.report).unwrap();
        assert_eq!(again.display(), fit.params.display());
        assert_eq!(p.model_curves(&again).unwrap(), p.model_curves(&fit.params).unwrap());
    }

    #[test]
    fn zero_tilt_scan_is_empty() {
        let p = problem();
        let fit = fit_strong(&p, truth().angles, FixAngle::X, &truth()).unwrap();
        let scan = strong_wavevector_scan(&p, truth().angles, FixAngle::X, &fit, 0.0);
        assert!(scan.half_widths.is_empty());
    }
}
