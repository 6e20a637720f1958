//! Combined fit of tickle spectra from several electrodes.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::lm::{minimize, FreeParam, LmSettings, Residuals};
use super::{build_report, chi2_dof, systematic_scan, FitReport, SystematicScan};
use crate::error::{Error, Result};
use crate::fields::{FieldSource, TrapSite};
use crate::geometry::{rotation_matrix, ModeConfiguration};
use crate::units::{mhz_to_angular, MICRO};
use crate::weak::{SidebandKernel, Spectrum, WeakExperiment};

const NAMES: [&str; 7] = [
    "phi_x_deg",
    "phi_y_deg",
    "phi_z_deg",
    "freq1_MHz",
    "freq2_MHz",
    "freq3_MHz",
    "u_exc_uV",
];

/// Minimum spacing of seeded resonances.
const SEED_SEPARATION_MHZ: f64 = 0.15;
/// Half-width of the window searched for each dip when seeding angles.
const SEED_WINDOW_MHZ: f64 = 0.03;
const SEED_CANDIDATES: usize = 4;

/// One spectrum with the field of its electrode at the assumed ion site.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakDataset {
    pub spectrum: Spectrum,
    pub field: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakProblem {
    pub experiment: WeakExperiment,
    /// Excitation pulse length (s).
    pub duration: f64,
    pub datasets: Vec<WeakDataset>,
}

/// Mode configuration plus excitation amplitude `U_exc` (V).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakParams {
    pub config: ModeConfiguration,
    pub voltage: f64,
}

impl WeakParams {
    pub fn new(config: ModeConfiguration, voltage: f64) -> Result<Self> {
        if !(voltage.is_finite() && voltage > 0.0) {
            return Err(Error::domain("excitation voltage must be positive"));
        }
        Ok(Self { config, voltage })
    }

    /// Values in report order and units.
    pub fn display(&self) -> [f64; 7] {
        let a = self.config.angles_deg();
        let f = self.config.freq_mhz();
        [a[0], a[1], a[2], f[0], f[1], f[2], self.voltage / MICRO]
    }

    /// Values keyed by their report names.
    pub fn named(&self) -> BTreeMap<String, f64> {
        NAMES.iter().map(|n| n.to_string()).zip(self.display()).collect()
    }

    pub fn from_display(x: &[f64]) -> Result<Self> {
        let config = ModeConfiguration::from_display([x[0], x[1], x[2]], [x[3], x[4], x[5]])?;
        Self::new(config, x[6] * MICRO)
    }

    pub fn from_report(report: &FitReport) -> Result<Self> {
        let config = report.mode_configuration()?;
        let u = report
            .value("u_exc_uV")
            .ok_or_else(|| Error::Parse("fit report has no parameter 'u_exc_uV'".into()))?;
        Self::new(config, u * MICRO)
    }
}

#[derive(Debug, Clone)]
pub struct WeakFit {
    pub params: WeakParams,
    pub report: FitReport,
}

impl WeakProblem {
    /// Resolve each spectrum's electrode field at `site` (µm).
    pub fn new(
        experiment: WeakExperiment,
        duration: f64,
        spectra: Vec<Spectrum>,
        fields: &FieldSource,
        site: &Vector3<f64>,
    ) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::domain("excitation duration must be positive"));
        }
        let datasets = spectra
            .into_iter()
            .map(|spectrum| {
                let field = fields.field(spectrum.electrode, site)?;
                Ok(WeakDataset { spectrum, field })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experiment,
            duration,
            datasets,
        })
    }

    /// The same spectra with fields evaluated at another site.
    pub fn at_site(&self, fields: &FieldSource, site: &Vector3<f64>) -> Result<Self> {
        let spectra = self.datasets.iter().map(|d| d.spectrum.clone()).collect();
        Self::new(self.experiment, self.duration, spectra, fields, site)
    }

    pub fn n_points(&self) -> usize {
        self.datasets.iter().map(|d| d.spectrum.len()).sum()
    }

    /// Model fluorescence on each dataset's grid.
    pub fn model_curves(&self, params: &WeakParams) -> Vec<Vec<f64>> {
        let modes = params.config.mode_vectors();
        let omega = params.config.omega();
        self.datasets
            .iter()
            .map(|d| {
                self.experiment.model_curve_for_modes(
                    &modes,
                    omega,
                    params.voltage,
                    self.duration,
                    &d.field,
                    &d.spectrum.grid(),
                )
            })
            .collect()
    }

    fn weighted_residuals(&self, params: &WeakParams) -> Vec<Vec<f64>> {
        self.model_curves(params)
            .iter()
            .zip(&self.datasets)
            .map(|(model, d)| {
                d.spectrum
                    .points
                    .iter()
                    .zip(model)
                    .map(|(p, m)| (p.f - m) / p.sigma)
                    .collect()
            })
            .collect()
    }

    /// `(χ², dof)` with all seven parameters free.
    pub fn chi_squared(&self, params: &WeakParams) -> Result<(f64, usize)> {
        self.check_weights()?;
        let r: Vec<f64> = self.weighted_residuals(params).concat();
        chi2_dof(&r, NAMES.len())
    }

    fn check_weights(&self) -> Result<()> {
        if self
            .datasets
            .iter()
            .flat_map(|d| &d.spectrum.points)
            .any(|p| !(p.sigma > 0.0 && p.sigma.is_finite()))
        {
            return Err(Error::domain("fitting needs positive uncertainties on every point"));
        }
        Ok(())
    }
}

impl Residuals for WeakProblem {
    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        match WeakParams::from_display(x) {
            Ok(params) => self.weighted_residuals(&params).concat(),
            Err(_) => vec![f64::INFINITY; self.n_points()],
        }
    }
}

fn free_params(initial: &WeakParams) -> Vec<FreeParam> {
    let x = initial.display();
    let mut params = Vec::with_capacity(7);
    for j in 0..3 {
        params.push(FreeParam::new(NAMES[j], x[j], -90.0, 90.0, 10.0));
    }
    for j in 3..6 {
        params.push(FreeParam::new(NAMES[j], x[j], 1e-3, 1e3, 1.0));
    }
    params.push(FreeParam::new(NAMES[6], x[6], 1e-6, 1e12, x[6]));
    params
}

/// Least-squares fit of all spectra starting from `initial`.
pub fn fit_weak(problem: &WeakProblem, initial: &WeakParams) -> Result<WeakFit> {
    let electrodes: std::collections::BTreeSet<u32> =
        problem.datasets.iter().map(|d| d.spectrum.electrode).collect();
    if electrodes.len() < 3 {
        return Err(Error::Degenerate(format!(
            "spectra from {} electrode(s) cannot separate the three angles from the drive voltage; at least three are needed",
            electrodes.len()
        )));
    }
    problem.check_weights()?;
    let params = free_params(initial);
    let outcome = minimize(problem, &params, &LmSettings::default())?;
    let fitted = WeakParams::from_display(&outcome.x)?;

    let mut residuals = BTreeMap::new();
    let mut offset = 0;
    for d in &problem.datasets {
        let n = d.spectrum.len();
        residuals.insert(
            format!("electrode_{}", d.spectrum.electrode),
            outcome.residuals[offset..offset + n].to_vec(),
        );
        offset += n;
    }
    let names: Vec<String> = NAMES.iter().map(|s| s.to_string()).collect();
    let report = build_report("weak", &names, &outcome, &[], residuals);
    Ok(WeakFit {
        params: fitted,
        report,
    })
}

/// Starting points for [`fit_weak`], best first.
///
/// Frequencies come from the three strongest maxima of the smoothed summed
/// dip depth. Angles come from a 10° grid search: each grid triad predicts
/// on-resonance modulation indices `U · c_li` for every electrode and mode,
/// `U` is solved in closed form against the observed dip depths, and the
/// triads with the smallest depth mismatch are returned.
pub fn seed_weak(problem: &WeakProblem) -> Result<Vec<WeakParams>> {
    let freqs = seed_frequencies(problem)?;
    let omega = freqs.map(mhz_to_angular);
    let kernel = SidebandKernel::new(omega, &problem.experiment.probe, problem.experiment.v_max);
    let tables: [DepthTable; 3] = [0, 1, 2].map(|i| DepthTable::new(&kernel, i));

    // observed on-resonance fluorescence per dataset and mode
    let observed: Vec<[f64; 3]> = problem
        .datasets
        .iter()
        .map(|d| {
            let grid: Vec<f64> = d.spectrum.points.iter().map(|p| p.omega_exc).collect();
            let smooth = smoothed(&d.spectrum.points.iter().map(|p| p.f).collect::<Vec<_>>());
            freqs.map(|f| {
                let centre = mhz_to_angular(f);
                let half = mhz_to_angular(SEED_WINDOW_MHZ);
                grid.iter()
                    .zip(&smooth)
                    .filter(|(w, _)| (**w - centre).abs() <= half)
                    .map(|(_, v)| *v)
                    .fold(1.0, f64::min)
                    .clamp(0.0, 1.0)
            })
        })
        .collect();
    let beta_obs: Vec<[f64; 3]> = observed
        .iter()
        .map(|o| [0, 1, 2].map(|i| tables[i].invert(o[i])))
        .collect();

    let qm = problem.experiment.ion.charge_to_mass().abs();
    let k = problem.experiment.probe.wavevector;
    let steps: Vec<f64> = (-8..=9).map(|s| s as f64 * 10.0).collect();
    let mut triads = Vec::with_capacity(steps.len().pow(3));
    for &ax in &steps {
        for &ay in &steps {
            for &az in &steps {
                triads.push([ax, ay, az]);
            }
        }
    }
    let mut scored: Vec<(f64, [f64; 3], f64)> = triads
        .par_iter()
        .filter_map(|&angles| {
            let r = rotation_matrix(angles[0].to_radians(), angles[1].to_radians(), angles[2].to_radians()).ok()?;
            let u: [Vector3<f64>; 3] = [0, 1, 2].map(|i| r.column(i).into_owned());
            let mut num = 0.0;
            let mut den = 0.0;
            let coeff: Vec<[f64; 3]> = problem
                .datasets
                .iter()
                .map(|d| {
                    [0, 1, 2].map(|i| {
                        qm * u[i].dot(&d.field).abs() * u[i].dot(&k).abs() * problem.duration / (2.0 * omega[i])
                    })
                })
                .collect();
            for (c, b) in coeff.iter().zip(&beta_obs) {
                for i in 0..3 {
                    num += c[i] * b[i];
                    den += c[i] * c[i];
                }
            }
            if den == 0.0 || num <= 0.0 {
                return None;
            }
            let voltage = num / den;
            let mut cost = 0.0;
            for (c, o) in coeff.iter().zip(&observed) {
                for i in 0..3 {
                    let predicted = tables[i].depth(voltage * c[i]);
                    cost += (predicted - o[i]).powi(2);
                }
            }
            Some((cost, angles, voltage))
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()));

    let seeds: Vec<WeakParams> = scored
        .iter()
        .take(SEED_CANDIDATES)
        .filter_map(|(_, angles, voltage)| {
            WeakParams::new(ModeConfiguration::from_display(*angles, freqs).ok()?, *voltage).ok()
        })
        .collect();
    if seeds.is_empty() {
        return Err(Error::Degenerate("no orientation reproduces the observed dip depths".into()));
    }
    Ok(seeds)
}

/// Fit from each seed of [`seed_weak`] and keep the smallest χ².
pub fn fit_weak_seeded(problem: &WeakProblem) -> Result<WeakFit> {
    let seeds = seed_weak(problem)?;
    let mut best: Option<WeakFit> = None;
    let mut last_err = None;
    for seed in &seeds {
        match fit_weak(problem, seed) {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.report.chi2 < b.report.chi2) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one seed"))
}

fn smoothed(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Three resonance frequencies (MHz, ascending) from the summed dip depth.
fn seed_frequencies(problem: &WeakProblem) -> Result<[f64; 3]> {
    let mut depth: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for d in &problem.datasets {
        for p in &d.spectrum.points {
            let e = depth.entry(p.omega_exc.to_bits()).or_insert((p.omega_exc, 0.0));
            e.1 += 1.0 - p.f;
        }
    }
    let mut points: Vec<(f64, f64)> = depth.into_values().collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let grid: Vec<f64> = points.iter().map(|p| p.0).collect();
    let smooth = smoothed(&points.iter().map(|p| p.1).collect::<Vec<_>>());

    let mut peaks: Vec<(f64, f64)> = (1..smooth.len().saturating_sub(1))
        .filter(|&i| smooth[i] >= smooth[i - 1] && smooth[i] > smooth[i + 1])
        .map(|i| (smooth[i], grid[i]))
        .collect();
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let separation = mhz_to_angular(SEED_SEPARATION_MHZ);
    let mut chosen: Vec<f64> = Vec::new();
    for (_, w) in peaks {
        if chosen.iter().all(|c| (c - w).abs() >= separation) {
            chosen.push(w);
            if chosen.len() == 3 {
                break;
            }
        }
    }
    if chosen.len() < 3 {
        return Err(Error::Degenerate(format!(
            "only {} resonance(s) visible in the spectra; three are needed",
            chosen.len()
        )));
    }
    chosen.sort_by(f64::total_cmp);
    Ok([0, 1, 2].map(|i| crate::units::angular_to_mhz(chosen[i])))
}

/// On-resonance single-mode fluorescence as a function of β, tabulated up
/// to the first minimum so it can be inverted.
struct DepthTable {
    step: f64,
    values: Vec<f64>,
}

impl DepthTable {
    const STEP: f64 = 0.02;
    const MAX_BETA: f64 = 15.0;

    fn new(kernel: &SidebandKernel, mode: usize) -> Self {
        let mut scratch = kernel.scratch();
        let mut values = Vec::new();
        let mut b = 0.0;
        while b <= Self::MAX_BETA {
            let mut beta = [0.0; 3];
            beta[mode] = b;
            let v = kernel.fluorescence(beta, &mut scratch);
            if values.last().is_some_and(|last| v > *last) {
                break;
            }
            values.push(v);
            b += Self::STEP;
        }
        Self {
            step: Self::STEP,
            values,
        }
    }

    fn depth(&self, beta: f64) -> f64 {
        let pos = beta / self.step;
        let i = pos.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    fn invert(&self, f: f64) -> f64 {
        let i = self.values.partition_point(|v| *v > f);
        if i == 0 {
            return 0.0;
        }
        if i >= self.values.len() {
            return (self.values.len() - 1) as f64 * self.step;
        }
        let (a, b) = (self.values[i - 1], self.values[i]);
        let frac = if a > b { (a - f) / (a - b) } else { 0.0 };
        (i as f64 - 1.0 + frac) * self.step
    }
}

/// Systematic half-widths from refitting with the ion displaced to the
/// corners of `site.uncertainty` (µm). Needs the electrode geometry so
/// fields can be recomputed at each corner.
pub fn weak_position_scan(
    problem: &WeakProblem,
    fields: &FieldSource,
    site: &TrapSite,
    baseline: &WeakFit,
) -> Result<SystematicScan> {
    if !fields.is_geometric() {
        return Err(Error::domain("a position scan needs electrode geometry, not a fixed field table"));
    }
    let half: Vec<f64> = site.uncertainty.iter().cloned().collect();
    Ok(systematic_scan(&half, |offset| {
        let shifted = site.position + Vector3::new(offset[0], offset[1], offset[2]);
        let moved = problem.at_site(fields, &shifted)?;
        Ok(fit_weak(&moved, &baseline.params)?.report)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ElectrodeArray, FieldTable};
    use crate::geometry::IonSpecies;
    use crate::weak::{weak_spectrum, ExcitationPulse, ProbeLaser, SpectrumPoint, DEFAULT_V_MAX};

    pub(crate) fn truth() -> WeakParams {
        WeakParams::new(
            ModeConfiguration::from_display([-6.0, -38.0, -1.0], [3.584, 4.833, 5.878]).unwrap(),
            660e-6,
        )
        .unwrap()
    }

    fn experiment() -> WeakExperiment {
        WeakExperiment::new(IonSpecies::mg25(), ProbeLaser::demo(), DEFAULT_V_MAX).unwrap()
    }

    fn grid() -> Vec<f64> {
        (0..=310).map(|k| mhz_to_angular(3.2 + 0.01 * k as f64)).collect()
    }

    fn site() -> Vector3<f64> {
        Vector3::new(24.0, 0.0, 36.0)
    }

    /// Noiseless spectra with a flat σ so they can be fitted.
    fn noiseless(ids: &[u32], fields: &FieldSource) -> Vec<Spectrum> {
        let t = truth();
        ids.iter()
            .map(|&id| {
                let pulse = ExcitationPulse::new(id, t.voltage, 1.0, 10e-6).unwrap();
                let s = weak_spectrum(&t.config, &experiment(), &pulse, fields, &site(), &grid()).unwrap();
                let points = s
                    .points
                    .into_iter()
                    .map(|p| SpectrumPoint { sigma: 0.02, ..p })
                    .collect();
                Spectrum::new(id, points).unwrap()
            })
            .collect()
    }

    fn demo_problem(ids: &[u32]) -> WeakProblem {
        let fields = FieldSource::Geometry(ElectrodeArray::demo());
        WeakProblem::new(experiment(), 10e-6, noiseless(ids, &fields), &fields, &site()).unwrap()
    }

    #[test]
    fn truth_gives_zero_chi2() {
        let p = demo_problem(&[21, 22, 23]);
        let (chi2, dof) = p.chi_squared(&truth()).unwrap();
        assert_eq!(chi2, 0.0);
        assert_eq!(dof, 3 * 311 - 7);
    }

    #[test]
    fn noiseless_round_trip_from_perturbed_guess() {
        let p = demo_problem(&[21, 22, 23, 24, 25, 26]);
        let t = truth();
        let x = t.display();
        let guess = WeakParams::from_display(&[
            x[0] + 5.0,
            x[1] - 5.0,
            x[2] + 5.0,
            x[3] + 0.05,
            x[4] - 0.05,
            x[5] + 0.05,
            x[6] * 1.1,
        ])
        .unwrap();
        let fit = fit_weak(&p, &guess).unwrap();
        assert!(fit.report.diagnostics.converged);
        for (got, want) in fit.params.display().iter().zip(x) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
        assert_eq!(fit.report.residuals.len(), 6);
        assert!(fit.report.residuals.values().all(|r| r.len() == 311));
        assert!(fit.report.parameters.iter().all(|q| q.stat_err >= 0.0));
    }

    #[test]
    fn seeding_lands_near_truth() {
        let p = demo_problem(&[21, 22, 23, 24, 25, 26, 27, 28, 29, 30]);
        let fit = fit_weak_seeded(&p).unwrap();
        let x = truth().display();
        for (got, want) in fit.params.display().iter().zip(x) {
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn seeded_frequencies() {
        let p = demo_problem(&[21, 22, 23, 24, 25, 26]);
        let f = seed_frequencies(&p).unwrap();
        for (got, want) in f.iter().zip([3.584, 4.833, 5.878]) {
            assert!((got - want).abs() < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn too_few_electrodes_is_degenerate() {
        let p = demo_problem(&[22]);
        assert!(matches!(fit_weak(&p, &truth()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn field_along_one_mode_leaves_other_modes_unconstrained() {
        let t = truth();
        let u1 = t.config.mode_vectors()[0] * 600.0;
        let table = FieldTable([1, 2, 3].into_iter().map(|id| (id, [u1.x, u1.y, u1.z])).collect());
        let fields = FieldSource::Table(table);
        let p = WeakProblem::new(experiment(), 10e-6, noiseless(&[1, 2, 3], &fields), &fields, &site()).unwrap();
        match fit_weak(&p, &t) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("freq") || msg.contains("phi"), "{msg}"),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let fields = FieldSource::Geometry(ElectrodeArray::demo());
        let t = truth();
        let spectra = [21, 22, 23]
            .map(|id| {
                let pulse = ExcitationPulse::new(id, t.voltage, 1.0, 10e-6).unwrap();
                weak_spectrum(&t.config, &experiment(), &pulse, &fields, &site(), &grid()).unwrap()
            })
            .to_vec();
        let p = WeakProblem::new(experiment(), 10e-6, spectra, &fields, &site()).unwrap();
        assert!(matches!(fit_weak(&p, &t), Err(Error::Domain(_))));
    }

    #[test]
    fn position_scan_needs_geometry() {
        let p = demo_problem(&[21, 22, 23]);
        let fit = WeakFit {
            params: truth(),
            report: fit_weak(&p, &truth()).unwrap().report,
        };
        let table = ElectrodeArray::demo().field_table(&site()).unwrap();
        let s = TrapSite::new(site(), Vector3::new(1.0, 1.0, 5.0)).unwrap();
        assert!(weak_position_scan(&p, &FieldSource::Table(table), &s, &fit).is_err());
        let zero = TrapSite::new(site(), Vector3::zeros()).unwrap();
        let scan = weak_position_scan(&p, &FieldSource::Geometry(ElectrodeArray::demo()), &zero, &fit).unwrap();
        assert!(scan.half_widths.is_empty());
    }

    #[test]
    fn depth_table_inverts() {
        let kernel = SidebandKernel::new([3.0, 4.0, 5.0].map(mhz_to_angular), &ProbeLaser::demo(), DEFAULT_V_MAX);
        let table = DepthTable::new(&kernel, 1);
        for beta in [0.0, 0.3, 1.0, 2.5] {
            let f = table.depth(beta);
            assert!((table.invert(f) - beta).abs() < 1e-3, "{beta}");
        }
    }
}
