//! Motional-mode analysis for a single trapped ion.
//!
//! Two complementary routes to the normal-mode configuration (three mode
//! frequencies plus the orientation of the mode triad) are modelled here:
//!
//! * [`weak`]: resonant electric "tickle" excitation followed by
//!   Doppler-modulated fluorescence on a broad transition.
//! * [`strong`]: resolved-sideband Rabi flopping on a narrow Raman
//!   transition, thermally averaged over Fock states.
//!
//! [`inference`] fits either model to measured or synthetic data, and
//! [`geometry`] turns a fitted configuration into the local curvature
//! tensor of the trapping potential. [`fields`] supplies the electrode
//! fields that drive the tickle excitation, [`datasets`] produces noisy
//! synthetic measurements and handles the CSV formats.

pub mod datasets;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod inference;
pub mod specfun;
pub mod strong;
pub mod units;
pub mod weak;

pub use error::{Error, Result};
pub use fields::{ElectrodeArray, ElectrodeGeometry, FieldSource, FieldTable, Rect, TrapSite};
pub use geometry::{CurvatureTensor, IonSpecies, ModeAssignment, ModeConfiguration};
pub use inference::{FitReport, FixAngle};
pub use strong::{FloppingCurve, RamanGeometry, ThermalState, Transition};
pub use weak::{ExcitationPulse, ProbeLaser, Spectrum};

pub use nalgebra::{Matrix3, Vector3};
