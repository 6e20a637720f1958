mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ionmodes_core::{Error, FixAngle};

/// Motional-mode analysis of a trapped ion: synthesize data, fit the weak-
/// and strong-binding models, and report the trap curvature.
#[derive(Debug, Parser)]
#[command(name = "ionmodes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write noisy tickle-excitation spectra and a manifest.
    SimulateWeak(RunArgs),
    /// Write noisy Rabi-flopping curves and a manifest.
    SimulateStrong(RunArgs),
    /// Fit tickle spectra; writes fit_weak.json and residual tables.
    FitWeak(FitArgs),
    /// Fit flopping curves; writes fit_strong.json and residual tables.
    FitStrong(FitStrongArgs),
    /// Curvature tensor from a fit report or explicit parameters.
    Curvature(CurvatureArgs),
    /// Electrode fields at the configured trap site.
    Fields(FieldsArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Noise seed; overrides the one in the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; also where data are looked for by default.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Data files; defaults to the simulated files in the output directory.
    #[arg(long, value_name = "GLOB")]
    data: Option<String>,
}

#[derive(Debug, Args)]
struct FitStrongArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Angle held at its reference value: x, y, z, iterate (each in turn,
    /// averaged) or none (all free; degenerate).
    #[arg(long, value_name = "AXIS", default_value = "iterate")]
    fix_angle: FixAngle,
}

#[derive(Debug, Args)]
struct CurvatureArgs {
    /// Fit report supplying angles and frequencies.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["angles_deg", "freq_mhz"])]
    report: Option<PathBuf>,
    /// Mode angles φx,φy,φz in degrees.
    #[arg(long, value_name = "X,Y,Z", value_parser = triple::<f64>, allow_hyphen_values = true)]
    angles_deg: Option<[f64; 3]>,
    /// Mode frequencies in MHz.
    #[arg(long = "freq-mhz", value_name = "F1,F2,F3", value_parser = triple::<f64>)]
    freq_mhz: Option<[f64; 3]>,
    /// Which frequency sits on each rotated axis, 1-based.
    #[arg(long, value_name = "I,J,K", value_parser = triple::<usize>, default_value = "1,2,3")]
    assignment: [usize; 3],
    /// Angle half-widths in degrees for the systematic corner scan;
    /// defaults to the report's combined angle errors, or zero.
    #[arg(long, value_name = "X,Y,Z", value_parser = triple::<f64>)]
    half_widths_deg: Option<[f64; 3]>,
    #[arg(long, value_name = "U", default_value_t = 25.0)]
    mass_u: f64,
    #[arg(long, value_name = "E", default_value_t = 1.0, allow_hyphen_values = true)]
    charge_e: f64,
    /// Also write curvature.json here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FieldsArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Also write fields.csv here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn triple<T: std::str::FromStr + Copy + Default>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {}", parts.len()));
    }
    let mut out = [T::default(); 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("'{p}' is not a number"))?;
    }
    Ok(out)
}

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const DOMAIN: u8 = 3;
    pub const NOT_CONVERGED: u8 = 4;
    pub const DEGENERATE: u8 = 5;

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain(_) | Error::UnknownElectrode(_) => Self::DOMAIN,
            Error::Degenerate(_) => Self::DEGENERATE,
            Error::Parse(_) | Error::Io(_) | Error::Json(_) => Self::CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SimulateWeak(a) => commands::simulate_weak(&a.config, a.seed, a.out.as_deref()),
        Command::SimulateStrong(a) => commands::simulate_strong(&a.config, a.seed, a.out.as_deref()),
        Command::FitWeak(a) => commands::fit_weak(&a.config, a.out.as_deref(), a.data.as_deref()),
        Command::FitStrong(a) => commands::fit_strong(
            &a.fit.config,
            a.fit.out.as_deref(),
            a.fit.data.as_deref(),
            a.fix_angle,
        ),
        Command::Curvature(a) => commands::curvature(&commands::CurvatureRequest {
            report: a.report,
            angles_deg: a.angles_deg,
            freq_mhz: a.freq_mhz,
            assignment: a.assignment,
            half_widths_deg: a.half_widths_deg,
            mass_u: a.mass_u,
            charge_e: a.charge_e,
            out: a.out,
        }),
        Command::Fields(a) => commands::fields(&a.config, a.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
