//! Least-squares estimation of mode configurations.
//!
//! [`fit_weak`] fits tickle spectra from several electrodes with seven free
//! parameters (three angles, three frequencies, drive voltage).
//! [`fit_strong`] fits carrier and blue-sideband flopping curves with the mode
//! frequencies held fixed. Because a single Raman wave vector only sees the
//! projections `|⟨Δk, u_i⟩|`, one angle is pinned to a reference value per
//! fit; [`FixAngle::Iterate`] repeats the fit for each choice and averages.
//!
//! Statistical errors come from the Gauss-Newton covariance scaled by the
//! reduced χ². Systematic half-widths come from refitting at the corners of
//! a perturbation box ([`systematic_scan`]).

mod lm;
mod strong;
mod weak;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ModeConfiguration;

pub use strong::{fit_strong, seed_strong, strong_wavevector_scan, StrongFit, StrongParams, StrongProblem};
pub use weak::{fit_weak, fit_weak_seeded, seed_weak, weak_position_scan, WeakDataset, WeakFit, WeakParams, WeakProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub value: f64,
    pub stat_err: f64,
    pub sys_err: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub step_norm: f64,
    pub converged: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Result of a fit, in display units (degrees, MHz for ω/2π, µV, kHz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub parameters: Vec<FitParameter>,
    pub chi2: f64,
    pub dof: usize,
    /// Weighted residuals `(data − model)/σ` per dataset.
    pub residuals: BTreeMap<String, Vec<f64>>,
    pub diagnostics: Diagnostics,
    /// Individual fits behind an averaged result.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_choice: Vec<FitReport>,
}

impl FitReport {
    pub fn get(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.get(name).map(|p| p.value)
    }

    fn require(&self, name: &str) -> Result<f64> {
        self.value(name)
            .ok_or_else(|| Error::Parse(format!("fit report has no parameter '{name}'")))
    }

    /// Angles and frequencies recorded in the report.
    pub fn mode_configuration(&self) -> Result<ModeConfiguration> {
        let angles = [
            self.require("phi_x_deg")?,
            self.require("phi_y_deg")?,
            self.require("phi_z_deg")?,
        ];
        let freq = [
            self.require("freq1_MHz")?,
            self.require("freq2_MHz")?,
            self.require("freq3_MHz")?,
        ];
        ModeConfiguration::from_display(angles, freq)
    }

    /// Systematic half-widths of the three angles, in degrees.
    pub fn angle_systematics_deg(&self) -> [f64; 3] {
        ["phi_x_deg", "phi_y_deg", "phi_z_deg"].map(|n| self.get(n).map_or(0.0, |p| p.sys_err))
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.dof as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Copy systematic half-widths from a corner scan into the report.
    pub fn apply_systematics(&mut self, scan: &SystematicScan) {
        for p in &mut self.parameters {
            if let Some(h) = scan.half_widths.get(&p.name) {
                p.sys_err = *h;
            }
        }
        self.diagnostics.warnings.extend(scan.warnings.iter().cloned());
    }
}

/// Which angle a strong-binding fit pins to its reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixAngle {
    X,
    Y,
    Z,
    /// Fit once per choice of fixed angle and average the outcomes.
    Iterate,
    /// Free all three angles. A single wave vector cannot support this and
    /// the fit reports the degeneracy.
    None,
}

impl FixAngle {
    pub(crate) fn index(&self) -> Option<usize> {
        match self {
            FixAngle::X => Some(0),
            FixAngle::Y => Some(1),
            FixAngle::Z => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for FixAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixAngle::X => "x",
            FixAngle::Y => "y",
            FixAngle::Z => "z",
            FixAngle::Iterate => "iterate",
            FixAngle::None => "none",
        })
    }
}

impl FromStr for FixAngle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(FixAngle::X),
            "y" => Ok(FixAngle::Y),
            "z" => Ok(FixAngle::Z),
            "iterate" => Ok(FixAngle::Iterate),
            "none" => Ok(FixAngle::None),
            other => Err(Error::Parse(format!("unknown --fix-angle value '{other}'"))),
        }
    }
}

/// Per-parameter systematic half-widths from a corner scan.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SystematicScan {
    pub half_widths: BTreeMap<String, f64>,
    pub corners_total: usize,
    pub corners_used: usize,
    pub warnings: Vec<String>,
}

/// Refit at every sign corner of the box spanned by `half_widths` (zero
/// entries are not perturbed) and report half the max−min spread of each
/// parameter. `refit` receives the offset vector of one corner.
/// Corners whose fit fails or does not converge are left out with a warning.
pub fn systematic_scan<F>(half_widths: &[f64], refit: F) -> SystematicScan
where
    F: Fn(&[f64]) -> Result<FitReport> + Sync,
{
    let active: Vec<usize> = (0..half_widths.len()).filter(|&k| half_widths[k] != 0.0).collect();
    if active.is_empty() {
        return SystematicScan::default();
    }
    let corners: Vec<Vec<f64>> = (0..1usize << active.len())
        .map(|bits| {
            let mut offset = vec![0.0; half_widths.len()];
            for (b, &k) in active.iter().enumerate() {
                let sign = if bits & (1 << b) == 0 { -1.0 } else { 1.0 };
                offset[k] = sign * half_widths[k];
            }
            offset
        })
        .collect();
    let results: Vec<Result<FitReport>> = corners.par_iter().map(|c| refit(c)).collect();

    let mut scan = SystematicScan {
        corners_total: corners.len(),
        ..Default::default()
    };
    let mut lo: BTreeMap<String, f64> = BTreeMap::new();
    let mut hi: BTreeMap<String, f64> = BTreeMap::new();
    for (corner, result) in corners.iter().zip(results) {
        match result {
            Ok(report) if report.diagnostics.converged => {
                scan.corners_used += 1;
                for p in report.parameters.iter().filter(|p| !p.fixed) {
                    let l = lo.entry(p.name.clone()).or_insert(f64::INFINITY);
                    *l = l.min(p.value);
                    let h = hi.entry(p.name.clone()).or_insert(f64::NEG_INFINITY);
                    *h = h.max(p.value);
                }
            }
            Ok(_) => scan
                .warnings
                .push(format!("systematic corner {corner:?} did not converge; excluded")),
            Err(e) => scan
                .warnings
                .push(format!("systematic corner {corner:?} failed: {e}; excluded")),
        }
    }
    for (name, l) in lo {
        let h = hi[&name];
        scan.half_widths.insert(name, 0.5 * (h - l));
    }
    scan
}

/// Free parameters reported with statistical errors from the scaled
/// inverse normal matrix; `fixed` parameters are appended unchanged.
pub(crate) fn build_report(
    model: &str,
    names: &[String],
    outcome: &lm::LmOutcome,
    fixed: &[(String, f64)],
    residuals: BTreeMap<String, Vec<f64>>,
) -> FitReport {
    let dof = outcome.residuals.len() - names.len();
    let scale = outcome.chi2 / dof as f64;
    let mut parameters: Vec<FitParameter> = names
        .iter()
        .enumerate()
        .map(|(j, name)| FitParameter {
            name: name.clone(),
            value: outcome.x[j],
            stat_err: (outcome.inverse_normal[(j, j)] * scale).max(0.0).sqrt(),
            sys_err: 0.0,
            fixed: false,
        })
        .collect();
    parameters.extend(fixed.iter().map(|(name, value)| FitParameter {
        name: name.clone(),
        value: *value,
        stat_err: 0.0,
        sys_err: 0.0,
        fixed: true,
    }));
    let mut warnings = Vec::new();
    if !outcome.converged {
        warnings.push(format!("no convergence after {} iterations", outcome.iterations));
    }
    FitReport {
        model: model.to_string(),
        parameters,
        chi2: outcome.chi2,
        dof,
        residuals,
        diagnostics: Diagnostics {
            iterations: outcome.iterations,
            step_norm: outcome.step_norm,
            converged: outcome.converged,
            warnings,
        },
        per_choice: Vec::new(),
    }
}

/// `(χ², N_points − N_free)`; errors when the degrees of freedom vanish.
pub(crate) fn chi2_dof(residuals: &[f64], n_free: usize) -> Result<(f64, usize)> {
    if residuals.len() <= n_free {
        return Err(Error::domain(format!(
            "{} points leave no degrees of freedom for {n_free} free parameters",
            residuals.len()
        )));
    }
    Ok((residuals.iter().map(|r| r * r).sum(), residuals.len() - n_free))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(values: &[(&str, f64)], converged: bool) -> FitReport {
        FitReport {
            model: "test".into(),
            parameters: values
                .iter()
                .map(|(n, v)| FitParameter {
                    name: n.to_string(),
                    value: *v,
                    stat_err: 0.1,
                    sys_err: 0.0,
                    fixed: false,
                })
                .collect(),
            chi2: 1.0,
            dof: 1,
            residuals: BTreeMap::new(),
            diagnostics: Diagnostics {
                converged,
                ..Default::default()
            },
            per_choice: Vec::new(),
        }
    }

    #[test]
    fn zero_box_gives_zero_systematics() {
        let scan = systematic_scan(&[0.0, 0.0], |_| panic!("no refit expected"));
        assert!(scan.half_widths.is_empty());
        assert_eq!(scan.corners_total, 0);
    }

    #[test]
    fn corner_spread_and_exclusions() {
        let scan = systematic_scan(&[1.0, 0.0, 2.0], |off| {
            if off[0] > 0.0 && off[2] > 0.0 {
                return Err(Error::domain("boom"));
            }
            Ok(report(&[("a", 10.0 + off[0] + off[2]), ("b", 3.0)], true))
        });
        assert_eq!(scan.corners_total, 4);
        assert_eq!(scan.corners_used, 3);
        assert_eq!(scan.warnings.len(), 1);
        // used corners: (−1,−2) → 7, (+1,−2) → 9, (−1,+2) → 11
        assert_eq!(scan.half_widths["a"], 2.0);
        assert_eq!(scan.half_widths["b"], 0.0);
    }

    #[test]
    fn unconverged_corner_is_excluded() {
        let scan = systematic_scan(&[1.0], |off| Ok(report(&[("a", off[0])], off[0] < 0.0)));
        assert_eq!(scan.corners_used, 1);
        assert_eq!(scan.half_widths["a"], 0.0);
        assert!(scan.warnings[0].contains("did not converge"));
    }

    #[test]
    fn chi2_bookkeeping() {
        let r = [1.0, -2.0, 0.5, 0.0];
        assert_eq!(chi2_dof(&r, 2).unwrap(), (5.25, 2));
        assert_eq!(chi2_dof(&r, 1).unwrap().1, 3);
        assert!(chi2_dof(&r, 4).is_err());
    }

    #[test]
    fn fix_angle_parsing() {
        for s in ["x", "y", "z", "iterate", "none"] {
            assert_eq!(s.parse::<FixAngle>().unwrap().to_string(), s);
        }
        assert!("w".parse::<FixAngle>().is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let mut r = report(&[("phi_x_deg", 1.0)], true);
        r.residuals.insert("electrode_22".into(), vec![0.5, -0.25]);
        let back = FitReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(back.mode_configuration().is_err());
    }
}
