//! Physical constants (CODATA 2018) and conversions between the SI values
//! used internally and the display units used at I/O boundaries.

use std::f64::consts::TAU;

pub const HBAR: f64 = 1.054_571_817e-34;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

pub const MICRO: f64 = 1e-6;
pub const NANO: f64 = 1e-9;

/// Convert `f` in MHz to an angular frequency in rad/s.
#[inline]
pub fn mhz_to_angular(f: f64) -> f64 {
    TAU * f * 1e6
}

#[inline]
pub fn angular_to_mhz(omega: f64) -> f64 {
    omega / (TAU * 1e6)
}

#[inline]
pub fn khz_to_angular(f: f64) -> f64 {
    TAU * f * 1e3
}

#[inline]
pub fn angular_to_khz(omega: f64) -> f64 {
    omega / (TAU * 1e3)
}

/// Curvatures: 1 V/m² is 1e-6 µV/µm².
pub const V_PER_M2_TO_UV_PER_UM2: f64 = 1e-6;

/// Wave number `2π/λ` in rad/m for a wavelength in nm.
#[inline]
pub fn wavenumber_from_nm(lambda_nm: f64) -> f64 {
    TAU / (lambda_nm * NANO)
}
