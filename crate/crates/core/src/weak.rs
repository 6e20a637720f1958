//! Tickle excitation and Doppler-modulated fluorescence (weak binding).
//!
//! A resonant pulse on electrode `l` drives each mode classically to an
//! amplitude `A_i`. The oscillating ion then sees the probe laser phase
//! modulated with index `β_i = |⟨u_i, k_w⟩| A_i`, which spreads the
//! scattering rate over sidebands `Δ + v ω_i` weighted by `J_v(β_i)²`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldSource;
use crate::geometry::{IonSpecies, ModeConfiguration};
use crate::specfun::{bessel_j_upto_into, MAX_BESSEL_ORDER};
use crate::units::{mhz_to_angular, wavenumber_from_nm, HBAR};

/// Default sideband truncation `|v| ≤ 15`.
pub const DEFAULT_V_MAX: usize = 15;

/// Detection beam: wave vector (rad/m), detuning and natural line width (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeLaser {
    pub wavevector: Vector3<f64>,
    pub detuning: f64,
    pub linewidth: f64,
}

impl ProbeLaser {
    pub fn new(wavevector: Vector3<f64>, detuning: f64, linewidth: f64) -> Result<Self> {
        if !(wavevector.norm() > 0.0 && wavevector.iter().all(|v| v.is_finite())) {
            return Err(Error::domain("probe wave vector must be non-zero and finite"));
        }
        if !(linewidth.is_finite() && linewidth > 0.0) {
            return Err(Error::domain("probe line width must be positive"));
        }
        if !detuning.is_finite() {
            return Err(Error::domain("probe detuning must be finite"));
        }
        Ok(Self { wavevector, detuning, linewidth })
    }

    /// `direction` need not be normalized; frequencies are ordinary MHz.
    pub fn from_display(
        direction: Vector3<f64>,
        wavelength_nm: f64,
        detuning_mhz: f64,
        linewidth_mhz: f64,
    ) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) {
            return Err(Error::domain("probe direction must be non-zero"));
        }
        Self::new(
            direction / n * wavenumber_from_nm(wavelength_nm),
            mhz_to_angular(detuning_mhz),
            mhz_to_angular(linewidth_mhz),
        )
    }

    /// 280 nm along (1, 1, 0)/√2, detuned by −5 MHz on a 42 MHz line.
    pub fn demo() -> Self {
        Self::from_display(Vector3::new(1.0, 1.0, 0.0), 280.0, -5.0, 42.0).unwrap()
    }

    /// Lorentzian `(Γ/2)² / (x² + (Γ/2)²)`, unity at `x = 0`.
    pub fn lorentzian(&self, x: f64) -> f64 {
        let hw2 = 0.25 * self.linewidth * self.linewidth;
        hw2 / (x * x + hw2)
    }
}

/// A tickle pulse: electrode id, peak voltage (V), drive frequency (rad/s),
/// duration (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationPulse {
    pub electrode: u32,
    pub voltage: f64,
    pub omega: f64,
    pub duration: f64,
}

impl ExcitationPulse {
    pub fn new(electrode: u32, voltage: f64, omega: f64, duration: f64) -> Result<Self> {
        for (name, v) in [("voltage", voltage), ("drive frequency", omega), ("duration", duration)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("excitation {name} must be positive, got {v}")));
            }
        }
        Ok(Self { electrode, voltage, omega, duration })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    /// Drive frequency, rad/s.
    pub omega_exc: f64,
    pub f: f64,
    /// Standard error of `f`; zero for noiseless model curves.
    pub sigma: f64,
}

/// Normalized fluorescence versus drive frequency for one electrode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub electrode: u32,
    pub points: Vec<SpectrumPoint>,
}

impl Spectrum {
    /// Drive frequencies must increase strictly; `σ ≥ 0`.
    pub fn new(electrode: u32, points: Vec<SpectrumPoint>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[1].omega_exc > w[0].omega_exc)) {
            return Err(Error::domain(format!(
                "spectrum for electrode {electrode}: drive frequencies must increase strictly"
            )));
        }
        if points.iter().any(|p| !(p.sigma >= 0.0) || !p.f.is_finite()) {
            return Err(Error::domain(format!(
                "spectrum for electrode {electrode}: invalid value or uncertainty"
            )));
        }
        Ok(Self { electrode, points })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.omega_exc).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Amplitude after a pulse at `omega_exc` for a mode at `omega_mode`,
/// given the drive projection `U·⟨u, E⟩` (V/m) and `|Q/m|`.
fn driven_amplitude(qm: f64, drive: f64, omega_exc: f64, omega_mode: f64, duration: f64) -> f64 {
    qm * drive.abs() * duration / (omega_exc + omega_mode)
        * sinc(0.5 * duration * (omega_exc - omega_mode)).abs()
}

/// Final amplitude `A_i` (m) of mode `mode` (0-based) for an ion starting at
/// rest in the trap centre.
///
/// Written as `(Q/m) U |⟨u_i, E⟩| t/(ω_exc + ω_i) · sinc[t(ω_exc − ω_i)/2]`,
/// which equals the usual `2 sin(…)/(ω_exc² − ω_i²)` form off resonance and
/// stays finite on it.
pub fn excitation_amplitude(
    mode: usize,
    config: &ModeConfiguration,
    ion: &IonSpecies,
    field: &Vector3<f64>,
    pulse: &ExcitationPulse,
) -> f64 {
    let u = config.mode_vectors()[mode];
    driven_amplitude(
        ion.charge_to_mass().abs(),
        pulse.voltage * u.dot(field),
        pulse.omega,
        config.omega()[mode],
        pulse.duration,
    )
}

/// Mean phonon number `m ω A² / (2ħ)` of the coherent state reached.
pub fn coherent_occupation(amplitude: f64, omega: f64, ion: &IonSpecies) -> f64 {
    ion.mass() * omega * amplitude * amplitude / (2.0 * HBAR)
}

/// Sideband weights `𝓛(Δ + v ω_i)/𝓛(Δ)` for `v = 0..=v_max` and each mode,
/// reused across every drive frequency of one model evaluation.
pub(crate) struct SidebandKernel {
    v_max: usize,
    /// `weights[i][v]`, already divided by the unmodulated value.
    weights: [Vec<f64>; 3],
}

impl SidebandKernel {
    pub(crate) fn new(omega: [f64; 3], probe: &ProbeLaser, v_max: usize) -> Self {
        let base = probe.lorentzian(probe.detuning);
        let weights = omega.map(|w| {
            (0..=v_max)
                .map(|v| {
                    let v = v as f64;
                    (probe.lorentzian(probe.detuning + v * w) + probe.lorentzian(probe.detuning - v * w))
                        / base
                })
                .collect::<Vec<_>>()
        });
        // the v = 0 term was counted twice above
        let mut weights = weights;
        for w in &mut weights {
            w[0] *= 0.5;
        }
        Self { v_max, weights }
    }

    /// `F = Π_i S_i(β_i)/S_i(0)`; `bessel` is scratch space of length `v_max + 1`.
    pub(crate) fn fluorescence(&self, beta: [f64; 3], bessel: &mut [f64]) -> f64 {
        let mut f = 1.0;
        for (i, b) in beta.iter().enumerate() {
            if *b == 0.0 {
                continue;
            }
            bessel_j_upto_into(*b, bessel);
            let s: f64 = bessel
                .iter()
                .zip(&self.weights[i])
                .map(|(j, w)| j * j * w)
                .sum();
            f *= s;
        }
        f
    }

    pub(crate) fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.v_max + 1]
    }
}

/// Normalized fluorescence for modulation indices `beta` on modes at
/// angular frequencies `omega`, with sidebands truncated at `|v| ≤ v_max`.
/// Equals 1 for `β = 0`.
pub fn fluorescence(beta: [f64; 3], omega: [f64; 3], probe: &ProbeLaser, v_max: usize) -> Result<f64> {
    if v_max == 0 || v_max > MAX_BESSEL_ORDER {
        return Err(Error::domain(format!("sideband cutoff must be in 1..={MAX_BESSEL_ORDER}")));
    }
    if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::domain("modulation indices must be finite and non-negative"));
    }
    let kernel = SidebandKernel::new(omega, probe, v_max);
    let mut scratch = kernel.scratch();
    Ok(kernel.fluorescence(beta, &mut scratch))
}

/// Static settings shared by every spectrum of one tickle experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakExperiment {
    pub ion: IonSpecies,
    pub probe: ProbeLaser,
    pub v_max: usize,
}

impl WeakExperiment {
    pub fn new(ion: IonSpecies, probe: ProbeLaser, v_max: usize) -> Result<Self> {
        if v_max == 0 || v_max > MAX_BESSEL_ORDER {
            return Err(Error::domain(format!("sideband cutoff must be in 1..={MAX_BESSEL_ORDER}")));
        }
        Ok(Self { ion, probe, v_max })
    }

    /// Model fluorescence on a grid of drive frequencies.
    pub fn model_curve(
        &self,
        config: &ModeConfiguration,
        voltage: f64,
        duration: f64,
        field: &Vector3<f64>,
        grid: &[f64],
    ) -> Vec<f64> {
        self.model_curve_for_modes(&config.mode_vectors(), config.omega(), voltage, duration, field, grid)
    }

    pub(crate) fn model_curve_for_modes(
        &self,
        modes: &[Vector3<f64>; 3],
        omega: [f64; 3],
        voltage: f64,
        duration: f64,
        field: &Vector3<f64>,
        grid: &[f64],
    ) -> Vec<f64> {
        let kernel = SidebandKernel::new(omega, &self.probe, self.v_max);
        let mut scratch = kernel.scratch();
        let qm = self.ion.charge_to_mass().abs();
        let drive = modes.map(|u| voltage * u.dot(field));
        let doppler = modes.map(|u| u.dot(&self.probe.wavevector).abs());
        grid.iter()
            .map(|&w_exc| {
                let beta = [0, 1, 2].map(|i| {
                    doppler[i] * driven_amplitude(qm, drive[i], w_exc, omega[i], duration)
                });
                kernel.fluorescence(beta, &mut scratch)
            })
            .collect()
    }
}

/// Noiseless model spectrum for `pulse.electrode` over `grid` (rad/s).
/// `pulse.omega` is ignored in favour of the grid.
pub fn weak_spectrum(
    config: &ModeConfiguration,
    experiment: &WeakExperiment,
    pulse: &ExcitationPulse,
    fields: &FieldSource,
    site: &Vector3<f64>,
    grid: &[f64],
) -> Result<Spectrum> {
    let field = fields.field(pulse.electrode, site)?;
    let values = experiment.model_curve(config, pulse.voltage, pulse.duration, &field, grid);
    let points = grid
        .iter()
        .zip(values)
        .map(|(&omega_exc, f)| SpectrumPoint { omega_exc, f, sigma: 0.0 })
        .collect();
    Spectrum::new(pulse.electrode, points)
}
