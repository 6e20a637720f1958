//! Run configuration, in display units (MHz, degrees, µm, µV, µs, kHz).

use std::path::{Path, PathBuf};

use ionmodes_core::datasets::NoiseModel;
use ionmodes_core::inference::{StrongParams, WeakParams};
use ionmodes_core::strong::{DEFAULT_N_MAX, RamanGeometry};
use ionmodes_core::units::{khz_to_angular, mhz_to_angular, wavenumber_from_nm, MICRO};
use ionmodes_core::weak::{ProbeLaser, WeakExperiment, DEFAULT_V_MAX};
use ionmodes_core::{ElectrodeArray, FieldSource, FieldTable, IonSpecies, ModeConfiguration, TrapSite, Vector3};
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub ion: IonConfig,
    pub site: SiteConfig,
    pub fields: FieldsConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    pub weak: Option<WeakConfig>,
    pub strong: Option<StrongConfig>,
    /// Default output directory, relative to the config file.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(skip)]
    base: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonConfig {
    pub mass_u: f64,
    #[serde(default = "one")]
    pub charge_e: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for IonConfig {
    fn default() -> Self {
        Self {
            mass_u: 25.0,
            charge_e: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub position_um: [f64; 3],
    #[serde(default)]
    pub uncertainty_um: [f64; 3],
}

/// Exactly one of an electrode layout or a precomputed field table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsConfig {
    pub geometry: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridConfig {
    fn values(&self, field: &str) -> Result<Vec<f64>, Failure> {
        if !(self.step > 0.0 && self.stop >= self.start && self.start.is_finite() && self.stop.is_finite()) {
            return Err(Failure::config(format!("{field}: need start ≤ stop and step > 0")));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|k| self.start + k as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub direction: [f64; 3],
    pub wavelength_nm: f64,
    #[serde(rename = "detuning_MHz", default = "default_detuning")]
    pub detuning_mhz: f64,
    #[serde(rename = "linewidth_MHz")]
    pub linewidth_mhz: f64,
}

fn default_detuning() -> f64 {
    -5.0
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakValues {
    pub angles_deg: [f64; 3],
    #[serde(rename = "freq_MHz")]
    pub freq_mhz: [f64; 3],
    #[serde(rename = "u_exc_uV")]
    pub u_exc_uv: f64,
}

impl WeakValues {
    /// `field` names the config section in error messages.
    pub fn params(&self, field: &str) -> Result<WeakParams, Failure> {
        ModeConfiguration::from_display(self.angles_deg, self.freq_mhz)
            .and_then(|config| WeakParams::new(config, self.u_exc_uv * MICRO))
            .map_err(|e| Failure::config(format!("{field}: {e}")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    pub probe: ProbeConfig,
    #[serde(default = "default_v_max")]
    pub v_max: usize,
    pub duration_us: f64,
    pub electrodes: Vec<u32>,
    #[serde(rename = "grid_MHz")]
    pub grid_mhz: GridConfig,
    pub truth: Option<WeakValues>,
    pub initial: Option<WeakValues>,
}

fn default_v_max() -> usize {
    DEFAULT_V_MAX
}

impl WeakConfig {
    pub fn experiment(&self, ion: IonSpecies) -> Result<WeakExperiment, Failure> {
        let p = &self.probe;
        ProbeLaser::from_display(Vector3::from(p.direction), p.wavelength_nm, p.detuning_mhz, p.linewidth_mhz)
            .and_then(|probe| WeakExperiment::new(ion, probe, self.v_max))
            .map_err(|e| Failure::config(format!("weak.probe: {e}")))
    }

    /// Seconds.
    pub fn duration(&self) -> f64 {
        self.duration_us * 1e-6
    }

    pub fn grid(&self) -> Result<Vec<f64>, Failure> {
        Ok(self.grid_mhz.values("weak.grid_MHz")?.into_iter().map(mhz_to_angular).collect())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamanConfig {
    pub direction: [f64; 3],
    pub wavelength_nm: f64,
    /// Angle between the two beams; `|Δk| = 2k sin(θ/2)`.
    #[serde(default = "right_angle")]
    pub crossing_angle_deg: f64,
    #[serde(default = "five")]
    pub direction_uncertainty_deg: f64,
}

fn right_angle() -> f64 {
    90.0
}

fn five() -> f64 {
    5.0
}

impl RamanConfig {
    pub fn wavevector(&self) -> Result<Vector3<f64>, Failure> {
        let d = Vector3::from(self.direction);
        if !(d.norm() > 0.0) || !(self.wavelength_nm > 0.0) {
            return Err(Failure::config("strong.raman: direction must be non-zero and wavelength positive"));
        }
        let k = 2.0 * wavenumber_from_nm(self.wavelength_nm) * (0.5 * self.crossing_angle_deg.to_radians()).sin();
        Ok(d.normalize() * k)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongValues {
    pub angles_deg: [f64; 3],
    pub nbar: [f64; 3],
    #[serde(rename = "rabi_kHz")]
    pub rabi_khz: f64,
    #[serde(rename = "gamma_dec_kHz")]
    pub gamma_dec_khz: f64,
}

impl StrongValues {
    pub fn params(&self) -> StrongParams {
        StrongParams {
            angles: self.angles_deg.map(f64::to_radians),
            nbar: self.nbar,
            rabi: khz_to_angular(self.rabi_khz),
            decoherence: khz_to_angular(self.gamma_dec_khz),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimesConfig {
    pub carrier: GridConfig,
    pub sideband: GridConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongConfig {
    pub raman: RamanConfig,
    /// Calibrated mode frequencies, held fixed in the fit.
    #[serde(rename = "freq_MHz")]
    pub freq_mhz: [f64; 3],
    pub reference_angles_deg: [f64; 3],
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(rename = "qubit_MHz", default = "default_qubit")]
    pub qubit_mhz: f64,
    pub times_us: TimesConfig,
    pub truth: Option<StrongValues>,
    pub initial: Option<StrongValues>,
}

fn default_n_max() -> usize {
    DEFAULT_N_MAX
}

fn default_qubit() -> f64 {
    1681.5
}

impl StrongConfig {
    pub fn reference_angles(&self) -> [f64; 3] {
        self.reference_angles_deg.map(f64::to_radians)
    }

    pub fn raman(&self, values: &StrongValues) -> Result<RamanGeometry, Failure> {
        RamanGeometry::new(
            self.raman.wavevector()?,
            self.raman.direction_uncertainty_deg.to_radians(),
            khz_to_angular(values.rabi_khz),
            khz_to_angular(values.gamma_dec_khz),
        )
        .map_err(|e| Failure::config(format!("strong: {e}")))
    }

    /// Pulse lengths (s) for the carrier and for the sidebands.
    pub fn times(&self) -> Result<(Vec<f64>, Vec<f64>), Failure> {
        let c = self.times_us.carrier.values("strong.times_us.carrier")?;
        let s = self.times_us.sideband.values("strong.times_us.sideband")?;
        let to_s = |v: Vec<f64>| v.into_iter().map(|t| t * 1e-6).collect();
        Ok((to_s(c), to_s(s)))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config '{}': {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        config.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), Failure> {
        match (&self.fields.geometry, &self.fields.table) {
            (Some(_), Some(_)) => return Err(Failure::config("fields: give either 'geometry' or 'table', not both")),
            (None, None) => return Err(Failure::config("fields: missing 'geometry' or 'table'")),
            (Some(p), None) => self.check_exists("fields.geometry", p)?,
            (None, Some(p)) => self.check_exists("fields.table", p)?,
        }
        if !(self.ion.mass_u > 0.0) {
            return Err(Failure::config("ion.mass_u: must be positive"));
        }
        Ok(())
    }

    fn check_exists(&self, field: &str, path: &Path) -> Result<(), Failure> {
        let full = self.resolve(path);
        if !full.is_file() {
            return Err(Failure::config(format!("{field}: file '{}' not found", full.display())));
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn output(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf).unwrap_or_else(|| self.resolve(&self.output_dir))
    }

    pub fn ion(&self) -> Result<IonSpecies, Failure> {
        IonSpecies::from_atomic(self.ion.mass_u, self.ion.charge_e).map_err(|e| Failure::config(format!("ion: {e}")))
    }

    pub fn site(&self) -> Result<TrapSite, Failure> {
        TrapSite::new(Vector3::from(self.site.position_um), Vector3::from(self.site.uncertainty_um))
            .map_err(|e| Failure::config(format!("site: {e}")))
    }

    pub fn field_source(&self) -> Result<FieldSource, Failure> {
        let with_field = |field: &str, e: ionmodes_core::Error| Failure::config(format!("{field}: {e}"));
        if let Some(p) = &self.fields.geometry {
            let array = ElectrodeArray::load(&self.resolve(p)).map_err(|e| with_field("fields.geometry", e))?;
            Ok(FieldSource::Geometry(array))
        } else {
            let p = self.fields.table.as_ref().expect("validated");
            let table = FieldTable::load(&self.resolve(p)).map_err(|e| with_field("fields.table", e))?;
            Ok(FieldSource::Table(table))
        }
    }

    pub fn weak(&self) -> Result<&WeakConfig, Failure> {
        self.weak.as_ref().ok_or_else(|| Failure::config("missing 'weak' section"))
    }

    pub fn strong(&self) -> Result<&StrongConfig, Failure> {
        self.strong.as_ref().ok_or_else(|| Failure::config("missing 'strong' section"))
    }
}
