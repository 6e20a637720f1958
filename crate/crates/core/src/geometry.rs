//! Orientation of the normal-mode triad and the curvature tensor it implies.
//!
//! Mode orientations are parametrized by three rotations about the fixed
//! laboratory axes, applied in the order x, y, z:
//!
//! ```text
//! R(φx, φy, φz) = Rz(φz) · Ry(φy) · Rx(φx)
//! ```
//!
//! The i-th mode vector `u_i` is the i-th column of `R`. The same convention
//! is used by both fitters, so fitted angles are mutually consistent.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE, V_PER_M2_TO_UV_PER_UM2};

/// Wrap an angle into (−π, π]. An input of exactly −π maps to +π.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Composite fixed-axis rotation `Rz(φz)·Ry(φy)·Rx(φx)`.
pub fn rotation_matrix(phi_x: f64, phi_y: f64, phi_z: f64) -> Result<Matrix3<f64>> {
    if !(phi_x.is_finite() && phi_y.is_finite() && phi_z.is_finite()) {
        return Err(Error::domain("rotation angles must be finite"));
    }
    Ok(rot_z(phi_z) * rot_y(phi_y) * rot_x(phi_x))
}

/// A single ion: mass in kg, charge in C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    mass: f64,
    charge: f64,
}

impl IonSpecies {
    pub fn new(mass: f64, charge: f64) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::domain(format!("ion mass must be positive, got {mass}")));
        }
        if !charge.is_finite() || charge == 0.0 {
            return Err(Error::domain("ion charge must be finite and non-zero"));
        }
        Ok(Self { mass, charge })
    }

    /// Mass in atomic mass units, charge in elementary charges.
    pub fn from_atomic(mass_u: f64, charge_e: f64) -> Result<Self> {
        Self::new(mass_u * ATOMIC_MASS_UNIT, charge_e * ELEMENTARY_CHARGE)
    }

    /// Singly charged magnesium-25, with the mass taken as 25 u.
    pub fn mg25() -> Self {
        Self {
            mass: 25.0 * ATOMIC_MASS_UNIT,
            charge: ELEMENTARY_CHARGE,
        }
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn charge(&self) -> f64 {
        self.charge
    }

    /// Charge-to-mass ratio Q/m in C/kg.
    pub fn charge_to_mass(&self) -> f64 {
        self.charge / self.mass
    }
}

/// Three rotation angles (rad) and three angular mode frequencies (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeConfiguration {
    angles: [f64; 3],
    omega: [f64; 3],
}

impl ModeConfiguration {
    /// Angles are wrapped into (−π, π]; every frequency must be positive.
    pub fn new(angles: [f64; 3], omega: [f64; 3]) -> Result<Self> {
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::domain("mode angles must be finite"));
        }
        if let Some(w) = omega.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::domain(format!(
                "mode frequencies must be positive, got {w} rad/s"
            )));
        }
        Ok(Self {
            angles: angles.map(normalize_angle),
            omega,
        })
    }

    /// Angles in degrees, frequencies as ω/2π in MHz.
    pub fn from_display(angles_deg: [f64; 3], freq_mhz: [f64; 3]) -> Result<Self> {
        Self::new(
            angles_deg.map(f64::to_radians),
            freq_mhz.map(crate::units::mhz_to_angular),
        )
    }

    pub fn angles(&self) -> [f64; 3] {
        self.angles
    }

    pub fn angles_deg(&self) -> [f64; 3] {
        self.angles.map(f64::to_degrees)
    }

    pub fn omega(&self) -> [f64; 3] {
        self.omega
    }

    pub fn freq_mhz(&self) -> [f64; 3] {
        self.omega.map(crate::units::angular_to_mhz)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [x, y, z] = self.angles;
        rot_z(z) * rot_y(y) * rot_x(x)
    }

    /// Unit vectors `u_1, u_2, u_3`, the columns of [`Self::rotation`].
    pub fn mode_vectors(&self) -> [Vector3<f64>; 3] {
        let r = self.rotation();
        [
            r.column(0).into_owned(),
            r.column(1).into_owned(),
            r.column(2).into_owned(),
        ]
    }
}

pub fn mode_vectors(config: &ModeConfiguration) -> [Vector3<f64>; 3] {
    config.mode_vectors()
}

/// Which mode frequency sits on which rotated axis when building the
/// curvature tensor: axis column `j` carries `ω_{σ(j)}`.
///
/// Stored zero-based; displayed one-based (e.g. `2,1,3`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct ModeAssignment([usize; 3]);

impl ModeAssignment {
    pub const IDENTITY: Self = Self([0, 1, 2]);

    /// Zero-based permutation of `{0, 1, 2}`.
    pub fn new(perm: [usize; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::domain(format!(
                    "mode assignment {perm:?} is not a permutation of 0..3"
                )));
            }
            seen[p] = true;
        }
        Ok(Self(perm))
    }

    /// One-based permutation as written at the I/O boundary.
    pub fn from_one_based(perm: [usize; 3]) -> Result<Self> {
        if perm.contains(&0) {
            return Err(Error::domain("one-based mode assignment may not contain 0"));
        }
        Self::new(perm.map(|p| p - 1))
    }

    pub fn all() -> [Self; 6] {
        [
            Self([0, 1, 2]),
            Self([0, 2, 1]),
            Self([1, 0, 2]),
            Self([1, 2, 0]),
            Self([2, 0, 1]),
            Self([2, 1, 0]),
        ]
    }

    pub fn as_array(&self) -> [usize; 3] {
        self.0
    }

    pub fn one_based(&self) -> [usize; 3] {
        self.0.map(|p| p + 1)
    }
}

impl Default for ModeAssignment {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TryFrom<[usize; 3]> for ModeAssignment {
    type Error = Error;

    fn try_from(value: [usize; 3]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ModeAssignment> for [usize; 3] {
    fn from(value: ModeAssignment) -> Self {
        value.0
    }
}

/// Hessian of the quasi-static trapping potential in µV/µm², with optional
/// per-entry systematic half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureTensor {
    pub hessian: Matrix3<f64>,
    pub systematics: Option<Matrix3<f64>>,
}

impl CurvatureTensor {
    pub fn eigenvalues(&self) -> Vector3<f64> {
        self.hessian.symmetric_eigenvalues()
    }
}

/// `H = (m/Q) · R · diag(ω_σ(1)², ω_σ(2)², ω_σ(3)²) · Rᵀ` in µV/µm².
pub fn curvature_hessian(
    config: &ModeConfiguration,
    ion: &IonSpecies,
    assignment: ModeAssignment,
) -> CurvatureTensor {
    CurvatureTensor {
        hessian: hessian_at(config.rotation(), config.omega(), ion, assignment),
        systematics: None,
    }
}

fn hessian_at(
    rotation: Matrix3<f64>,
    omega: [f64; 3],
    ion: &IonSpecies,
    assignment: ModeAssignment,
) -> Matrix3<f64> {
    let scale = V_PER_M2_TO_UV_PER_UM2 / ion.charge_to_mass();
    let sigma = assignment.as_array();
    let diag = Vector3::from_fn(|j, _| scale * omega[sigma[j]].powi(2));
    let h = rotation * Matrix3::from_diagonal(&diag) * rotation.transpose();
    // exact symmetry, independent of rounding in the two products
    (h + h.transpose()) * 0.5
}

/// Curvature tensor with systematic half-widths from the 2³ corners of the
/// angle-uncertainty box: half of the max−min spread of each entry.
pub fn curvature_systematics(
    config: &ModeConfiguration,
    ion: &IonSpecies,
    assignment: ModeAssignment,
    half_widths: [f64; 3],
) -> Result<CurvatureTensor> {
    if half_widths.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
        return Err(Error::domain("angle half-widths must be finite and non-negative"));
    }
    let base = curvature_hessian(config, ion, assignment);
    let [ax, ay, az] = config.angles();
    let mut lo = Matrix3::repeat(f64::INFINITY);
    let mut hi = Matrix3::repeat(f64::NEG_INFINITY);
    for corner in 0..8u32 {
        let sign = |bit: u32| if corner & (1 << bit) == 0 { -1.0 } else { 1.0 };
        let r = rotation_matrix(
            ax + sign(0) * half_widths[0],
            ay + sign(1) * half_widths[1],
            az + sign(2) * half_widths[2],
        )?;
        let h = hessian_at(r, config.omega(), ion, assignment);
        lo = lo.zip_map(&h, f64::min);
        hi = hi.zip_map(&h, f64::max);
    }
    Ok(CurvatureTensor {
        hessian: base.hessian,
        systematics: Some((hi - lo) * 0.5),
    })
}
