//! Resolved-sideband Rabi flopping (strong binding).
//!
//! For Fock state `|n1, n2, n3⟩` the coupling to `|n + Δn⟩` is
//!
//! ```text
//! Ω_s = Ω_0 Π_i exp(−η_i²/2) η_i^|Δn_i| √(n_i<! / n_i>!) L_{n_i<}^{|Δn_i|}(η_i²)
//! ```
//!
//! and the ground-state population after a pulse of length `t` is the
//! thermal average of `½[1 + cos(Ω_s t) e^{−Γ_dec t}]`. With `Γ_dec = 0` this
//! is the plain `cos²(Ω_s t/2)` average.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{IonSpecies, ModeConfiguration};
use crate::specfun::{laguerre_unchecked, sqrt_factorial_ratio_unchecked, MAX_LAGUERRE_DEGREE};
use crate::units::{khz_to_angular, wavenumber_from_nm, HBAR};

pub const DEFAULT_N_MAX: usize = 11;

/// Raman beam pair: effective wave vector (rad/m), its direction
/// uncertainty (rad), base Rabi rate and decoherence rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamanGeometry {
    pub wavevector: Vector3<f64>,
    pub direction_uncertainty: f64,
    pub rabi: f64,
    pub decoherence: f64,
}

impl RamanGeometry {
    pub fn new(
        wavevector: Vector3<f64>,
        direction_uncertainty: f64,
        rabi: f64,
        decoherence: f64,
    ) -> Result<Self> {
        if !(wavevector.norm() > 0.0 && wavevector.iter().all(|v| v.is_finite())) {
            return Err(Error::domain("Raman wave vector must be non-zero and finite"));
        }
        if !(rabi.is_finite() && rabi >= 0.0) {
            return Err(Error::domain("base Rabi rate must be non-negative"));
        }
        if !(decoherence.is_finite() && decoherence >= 0.0) {
            return Err(Error::domain("decoherence rate must be non-negative"));
        }
        if !(direction_uncertainty.is_finite() && direction_uncertainty >= 0.0) {
            return Err(Error::domain("direction uncertainty must be non-negative"));
        }
        Ok(Self {
            wavevector,
            direction_uncertainty,
            rabi,
            decoherence,
        })
    }

    /// Two 280 nm beams crossing at 90°: `|Δk| = √2 · 2π/280 nm` along
    /// (−1, 1, 0)/√2, uncertain by 5°.
    pub fn demo(rabi_khz: f64, decoherence_khz: f64) -> Self {
        let k = std::f64::consts::SQRT_2 * wavenumber_from_nm(280.0);
        Self::new(
            Vector3::new(-1.0, 1.0, 0.0).normalize() * k,
            5f64.to_radians(),
            khz_to_angular(rabi_khz),
            khz_to_angular(decoherence_khz),
        )
        .unwrap()
    }

    /// Same beams with the wave vector turned by `angle` about the surface normal.
    pub fn tilted_in_plane(&self, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        Self {
            wavevector: rot * self.wavevector,
            ..*self
        }
    }
}

/// Mean occupations per mode and the Fock-space cutoff `n_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub nbar: [f64; 3],
    pub n_max: usize,
}

impl ThermalState {
    pub fn new(nbar: [f64; 3], n_max: usize) -> Result<Self> {
        if nbar.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(Error::domain("mean occupations must be non-negative"));
        }
        if n_max + 1 > MAX_LAGUERRE_DEGREE as usize {
            return Err(Error::domain(format!("n_max must be below {MAX_LAGUERRE_DEGREE}")));
        }
        Ok(Self { nbar, n_max })
    }

    /// Truncated thermal distribution of one mode, renormalized to unit mass.
    pub fn weights(&self, mode: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..=self.n_max).map(|n| thermal_pn(self.nbar[mode], n)).collect();
        let mass: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / mass).collect()
    }
}

/// Bose–Einstein occupation probability `n̄ⁿ / (n̄ + 1)^{n+1}`.
pub fn thermal_pn(nbar: f64, n: usize) -> f64 {
    if nbar == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let ratio = nbar / (nbar + 1.0);
    ratio.powi(n as i32) / (nbar + 1.0)
}

/// Which transition a flopping curve drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transition {
    Carrier,
    /// First blue sideband of mode `0..3`.
    BlueSideband(usize),
}

impl Transition {
    pub const ALL: [Transition; 4] = [
        Transition::Carrier,
        Transition::BlueSideband(0),
        Transition::BlueSideband(1),
        Transition::BlueSideband(2),
    ];

    pub fn delta_n(&self) -> [i32; 3] {
        match *self {
            Transition::Carrier => [0; 3],
            Transition::BlueSideband(i) => {
                let mut d = [0; 3];
                d[i] = 1;
                d
            }
        }
    }

    /// Raman detuning from the qubit frequency, `Σ Δn_i ω_i` (rad/s).
    pub fn detuning(&self, config: &ModeConfiguration) -> f64 {
        self.delta_n()
            .iter()
            .zip(config.omega())
            .map(|(d, w)| *d as f64 * w)
            .sum()
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transition::Carrier => f.write_str("carrier"),
            Transition::BlueSideband(i) => write!(f, "bsb{}", i + 1),
        }
    }
}

impl FromStr for Transition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "carrier" => Ok(Transition::Carrier),
            "bsb1" => Ok(Transition::BlueSideband(0)),
            "bsb2" => Ok(Transition::BlueSideband(1)),
            "bsb3" => Ok(Transition::BlueSideband(2)),
            other => Err(Error::Parse(format!(
                "unknown transition '{other}' (expected carrier, bsb1, bsb2 or bsb3)"
            ))),
        }
    }
}

impl Serialize for Transition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Transition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloppingPoint {
    /// Pulse length, s.
    pub t: f64,
    pub p: f64,
    /// Standard error of `p`; zero for noiseless model curves.
    pub sigma: f64,
}

/// Ground-state population versus pulse length on one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloppingCurve {
    pub transition: Transition,
    pub points: Vec<FloppingPoint>,
}

impl FloppingCurve {
    pub fn new(transition: Transition, points: Vec<FloppingPoint>) -> Result<Self> {
        if points
            .iter()
            .any(|p| !(0.0..=1.0).contains(&p.p) || !(p.sigma >= 0.0) || !(p.t >= 0.0))
        {
            return Err(Error::domain(format!(
                "{transition} curve: populations must lie in [0, 1] with σ ≥ 0 and t ≥ 0"
            )));
        }
        Ok(Self { transition, points })
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `η_i = |⟨Δk, u_i⟩| √(ħ / 2 m ω_i)` for mode `mode` (0-based).
pub fn lamb_dicke(mode: usize, config: &ModeConfiguration, ion: &IonSpecies, raman: &RamanGeometry) -> f64 {
    let u = config.mode_vectors()[mode];
    lamb_dicke_for(&u, config.omega()[mode], ion, &raman.wavevector)
}

fn lamb_dicke_for(u: &Vector3<f64>, omega: f64, ion: &IonSpecies, k: &Vector3<f64>) -> f64 {
    u.dot(k).abs() * (HBAR / (2.0 * ion.mass() * omega)).sqrt()
}

/// Per-mode factor of the Rabi rate for `n → n + dn` (unchecked).
fn mode_factor(eta: f64, n: u32, dn: i32) -> f64 {
    let order = dn.unsigned_abs();
    let n_other = (n as i64 + dn as i64) as u32;
    let (lo, hi) = if n <= n_other { (n, n_other) } else { (n_other, n) };
    let eta2 = eta * eta;
    (-0.5 * eta2).exp()
        * eta.powi(order as i32)
        * sqrt_factorial_ratio_unchecked(lo, hi)
        * laguerre_unchecked(lo, order, eta2)
}

/// Magnitude of the motional-sensitive Rabi rate for `|n⟩ → |n + Δn⟩`.
pub fn rabi_rate(omega0: f64, eta: [f64; 3], n: [u32; 3], dn: [i32; 3]) -> Result<f64> {
    let mut product = 1.0;
    for i in 0..3 {
        let target = n[i] as i64 + dn[i] as i64;
        if target < 0 {
            return Err(Error::domain(format!(
                "mode {}: cannot remove {} quanta from |{}⟩",
                i + 1,
                -dn[i],
                n[i]
            )));
        }
        let top = n[i].max(target as u32);
        if top > MAX_LAGUERRE_DEGREE || dn[i].unsigned_abs() > crate::specfun::MAX_LAGUERRE_ORDER {
            return Err(Error::domain("Fock state or sideband order outside supported range"));
        }
        if !(eta[i].is_finite() && eta[i] >= 0.0) {
            return Err(Error::domain("Lamb-Dicke parameters must be non-negative"));
        }
        product *= mode_factor(eta[i], n[i], dn[i]);
    }
    Ok((omega0 * product).abs())
}

/// Thermal weights and Rabi rates over the truncated Fock cube for one
/// transition. Summation order is fixed (n1 outermost).
#[derive(Debug, Clone)]
pub(crate) struct RateTable {
    weights: Vec<f64>,
    rates: Vec<f64>,
    total_weight: f64,
    decoherence: f64,
}

impl RateTable {
    pub(crate) fn new(
        transition: Transition,
        modes: &[Vector3<f64>; 3],
        omega: [f64; 3],
        ion: &IonSpecies,
        raman: &RamanGeometry,
        thermal: &ThermalState,
    ) -> Self {
        let dn = transition.delta_n();
        let eta: [f64; 3] = [0, 1, 2].map(|i| lamb_dicke_for(&modes[i], omega[i], ion, &raman.wavevector));
        let size = thermal.n_max + 1;
        let pn: [Vec<f64>; 3] = [0, 1, 2].map(|i| (0..size).map(|n| thermal_pn(thermal.nbar[i], n)).collect());
        let factor: [Vec<f64>; 3] =
            [0, 1, 2].map(|i| (0..size).map(|n| mode_factor(eta[i], n as u32, dn[i])).collect());

        let mut weights = Vec::with_capacity(size * size * size);
        let mut rates = Vec::with_capacity(size * size * size);
        for a in 0..size {
            for b in 0..size {
                for c in 0..size {
                    weights.push(pn[0][a] * pn[1][b] * pn[2][c]);
                    rates.push((raman.rabi * factor[0][a] * factor[1][b] * factor[2][c]).abs());
                }
            }
        }
        let total_weight = weights.iter().sum();
        Self {
            weights,
            rates,
            total_weight,
            decoherence: raman.decoherence,
        }
    }

    pub(crate) fn survival(&self, t: f64) -> f64 {
        let coherent: f64 = self
            .weights
            .iter()
            .zip(&self.rates)
            .map(|(w, r)| w * (r * t).cos())
            .sum();
        0.5 * (1.0 + (-self.decoherence * t).exp() * coherent / self.total_weight)
    }
}

/// Thermally averaged probability of finding the ion in `|g⟩` after a pulse
/// of length `t` (s) on `transition`.
pub fn survival_probability(
    t: f64,
    transition: Transition,
    config: &ModeConfiguration,
    ion: &IonSpecies,
    raman: &RamanGeometry,
    thermal: &ThermalState,
) -> Result<f64> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::domain("pulse length must be non-negative"));
    }
    let table = RateTable::new(transition, &config.mode_vectors(), config.omega(), ion, raman, thermal);
    Ok(table.survival(t))
}

/// Noiseless model curve over `times` (s).
pub fn flopping_curve(
    transition: Transition,
    times: &[f64],
    config: &ModeConfiguration,
    ion: &IonSpecies,
    raman: &RamanGeometry,
    thermal: &ThermalState,
) -> Result<FloppingCurve> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::domain("pulse lengths must be non-negative"));
    }
    let table = RateTable::new(transition, &config.mode_vectors(), config.omega(), ion, raman, thermal);
    let points = times
        .iter()
        .map(|&t| FloppingPoint { t, p: table.survival(t).clamp(0.0, 1.0), sigma: 0.0 })
        .collect();
    FloppingCurve::new(transition, points)
}
