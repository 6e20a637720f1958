//! Synthetic measurements and the on-disk dataset formats.
//!
//! Spectrum files:
//!
//! ```text
//! # electrode=22
//! omega_exc_MHz,F,sigma_F
//! 3.2,0.99812,0.0246
//! ```
//!
//! Flopping files carry the transition and the Raman difference frequency:
//!
//! ```text
//! # selector=bsb1 omega_R_MHz=1685.26
//! t_pulse_us,P_g,sigma_P
//! ```

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldSource;
use crate::geometry::{IonSpecies, ModeConfiguration};
use crate::inference::WeakParams;
use crate::strong::{FloppingCurve, FloppingPoint, RamanGeometry, RateTable, ThermalState, Transition};
use crate::units::{angular_to_mhz, mhz_to_angular};
use crate::weak::{Spectrum, SpectrumPoint, WeakExperiment};

/// Counting statistics of the synthetic detector.
///
/// The default count rates put the statistical errors of a ten-electrode
/// tickle fit at about one degree per angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub seed: u64,
    /// Mean fluorescence counts per detection window at `F = 1`.
    pub signal_counts: f64,
    /// Mean stray-light counts per window, subtracted after drawing.
    pub stray_counts: f64,
    pub repetitions: u32,
    /// State readouts per flopping point.
    pub trials: u32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            seed: 0,
            signal_counts: 16.0,
            stray_counts: 2.0,
            repetitions: 200,
            trials: 200,
        }
    }
}

impl NoiseModel {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_counts.is_finite() && self.signal_counts > 0.0) {
            return Err(Error::domain("signal counts must be positive"));
        }
        if !(self.stray_counts.is_finite() && self.stray_counts >= 0.0) {
            return Err(Error::domain("stray counts must be non-negative"));
        }
        if self.repetitions == 0 || self.trials == 0 {
            return Err(Error::domain("repetitions and trials must be at least 1"));
        }
        Ok(())
    }

    /// Independent stream for one point of one dataset.
    fn rng(&self, dataset: usize, point: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((dataset as u64) << 32) | point as u64);
        rng
    }

    /// Fluorescence estimate and its uncertainty for one averaged point.
    pub fn draw_fluorescence(&self, f_model: f64, dataset: usize, point: usize) -> (f64, f64) {
        let reps = self.repetitions as f64;
        let mean = reps * (self.signal_counts * f_model.max(0.0) + self.stray_counts);
        let total = if mean > 0.0 {
            Poisson::new(mean).expect("finite positive mean").sample(&mut self.rng(dataset, point))
        } else {
            0.0
        };
        let norm = reps * self.signal_counts;
        // a zero-count point still gets the uncertainty of a single count
        ((total - reps * self.stray_counts) / norm, total.max(1.0).sqrt() / norm)
    }

    /// Measured `P_g` and its uncertainty for one flopping point.
    pub fn draw_population(&self, p_model: f64, dataset: usize, point: usize) -> (f64, f64) {
        let n = self.trials as u64;
        let successes = Binomial::new(n, p_model.clamp(0.0, 1.0))
            .expect("probability in [0, 1]")
            .sample(&mut self.rng(dataset, point));
        let p = successes as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt().max(0.5 / n as f64);
        (p, sigma)
    }
}

/// Noisy tickle spectra for `electrodes` over `grid` (rad/s).
#[allow(clippy::too_many_arguments)]
pub fn simulate_weak(
    truth: &WeakParams,
    experiment: &WeakExperiment,
    duration: f64,
    fields: &FieldSource,
    site: &Vector3<f64>,
    electrodes: &[u32],
    grid: &[f64],
    noise: &NoiseModel,
) -> Result<Vec<Spectrum>> {
    noise.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::domain("excitation duration must be positive"));
    }
    electrodes
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let field = fields.field(id, site)?;
            let model = experiment.model_curve(&truth.config, truth.voltage, duration, &field, grid);
            let points = grid
                .par_iter()
                .zip(&model)
                .enumerate()
                .map(|(j, (&omega_exc, &f))| {
                    let (f, sigma) = noise.draw_fluorescence(f, k, j);
                    SpectrumPoint { omega_exc, f, sigma }
                })
                .collect();
            Spectrum::new(id, points)
        })
        .collect()
}

/// Noisy flopping curves, one per `(transition, pulse lengths in s)`.
pub fn simulate_strong(
    config: &ModeConfiguration,
    ion: &IonSpecies,
    raman: &RamanGeometry,
    thermal: &ThermalState,
    schedule: &[(Transition, Vec<f64>)],
    noise: &NoiseModel,
) -> Result<Vec<FloppingCurve>> {
    noise.validate()?;
    let modes = config.mode_vectors();
    schedule
        .iter()
        .enumerate()
        .map(|(k, (transition, times))| {
            if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(Error::domain("pulse lengths must be non-negative"));
            }
            let table = RateTable::new(*transition, &modes, config.omega(), ion, raman, thermal);
            let points = times
                .par_iter()
                .enumerate()
                .map(|(j, &t)| {
                    let (p, sigma) = noise.draw_population(table.survival(t), k, j);
                    FloppingPoint { t, p, sigma }
                })
                .collect();
            FloppingCurve::new(*transition, points)
        })
        .collect()
}

/// Ties generated files to the parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `"weak"` or `"strong"`.
    pub kind: String,
    pub seed: u64,
    pub noise: NoiseModel,
    /// Generating values in report names and units.
    pub truth: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// The `key=value` pairs of a leading `# ...` line.
fn metadata(line: &str) -> Result<BTreeMap<String, String>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse("row 1: expected a '# key=value' metadata line".into()))?;
    body.split_whitespace()
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("row 1: metadata entry '{pair}' is not key=value")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

/// Rows of a three-column numeric table after the metadata line.
/// Rows and columns in errors are 1-based file positions.
fn numeric_rows(text: &str, header: [&str; 3]) -> Result<Vec<[f64; 3]>> {
    let body = text.split_once('\n').map_or("", |(_, rest)| rest);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("row 2: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Error::Parse(format!(
            "row 2: expected header '{}', found '{}'",
            header.join(","),
            found.join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() + 1);
            Error::Parse(format!("row {row}: {e}"))
        })?;
        let row = record.position().map_or(0, |p| p.line() + 1);
        let mut values = [0.0; 3];
        for (c, v) in values.iter_mut().enumerate() {
            let cell = record.get(c).unwrap_or("");
            *v = cell.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                Error::Parse(format!(
                    "row {row}, column {} ({}): '{cell}' is not a finite number",
                    c + 1,
                    header[c]
                ))
            })?;
        }
        rows.push(values);
    }
    Ok(rows)
}

const SPECTRUM_HEADER: [&str; 3] = ["omega_exc_MHz", "F", "sigma_F"];
const FLOPPING_HEADER: [&str; 3] = ["t_pulse_us", "P_g", "sigma_P"];

pub fn write_spectrum(spectrum: &Spectrum) -> String {
    let mut out = format!("# electrode={}\n{}\n", spectrum.electrode, SPECTRUM_HEADER.join(","));
    for p in &spectrum.points {
        out.push_str(&format!("{},{},{}\n", angular_to_mhz(p.omega_exc), p.f, p.sigma));
    }
    out
}

pub fn parse_spectrum(text: &str) -> Result<Spectrum> {
    let meta = metadata(text.lines().next().unwrap_or(""))?;
    let electrode = meta
        .get("electrode")
        .ok_or_else(|| Error::Parse("row 1: missing 'electrode=' metadata".into()))?
        .parse::<u32>()
        .map_err(|e| Error::Parse(format!("row 1: electrode id: {e}")))?;
    let points = numeric_rows(text, SPECTRUM_HEADER)?
        .into_iter()
        .map(|[w, f, sigma]| SpectrumPoint {
            omega_exc: mhz_to_angular(w),
            f,
            sigma,
        })
        .collect();
    Spectrum::new(electrode, points)
}

/// `omega_r_mhz` is the Raman difference frequency the curve was taken at.
pub fn write_flopping(curve: &FloppingCurve, omega_r_mhz: f64) -> String {
    let mut out = format!(
        "# selector={} omega_R_MHz={}\n{}\n",
        curve.transition,
        omega_r_mhz,
        FLOPPING_HEADER.join(",")
    );
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.t * 1e6, p.p, p.sigma));
    }
    out
}

/// Curve and, when present, its `omega_R_MHz`.
pub fn parse_flopping(text: &str) -> Result<(FloppingCurve, Option<f64>)> {
    let meta = metadata(text.lines().next().unwrap_or(""))?;
    let transition: Transition = meta
        .get("selector")
        .ok_or_else(|| Error::Parse("row 1: missing 'selector=' metadata".into()))?
        .parse()?;
    let omega_r = meta
        .get("omega_R_MHz")
        .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("row 1: omega_R_MHz: {e}"))))
        .transpose()?;
    let points = numeric_rows(text, FLOPPING_HEADER)?
        .into_iter()
        .map(|[t, p, sigma]| FloppingPoint { t: t * 1e-6, p, sigma })
        .collect();
    Ok((FloppingCurve::new(transition, points)?, omega_r))
}
