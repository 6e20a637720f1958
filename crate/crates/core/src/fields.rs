//! Control-electrode potentials and fields at the ion position.
//!
//! Electrodes are unions of axis-aligned rectangles in the `z = 0` plane.
//! In the gapless-plane approximation a rectangle held at 1 V (everything
//! else grounded) produces
//!
//! ```text
//! φ(r) = 1/(2π) Σ_corners ± atan[ (x_c − x)(y_c − y) / (z · |r − c|) ]
//! ```
//!
//! with signs (+, −, −, +) for the corners (x1,y1), (x0,y1), (x1,y0), (x0,y0).
//! Lengths are in µm; fields are returned in (V/m) per volt applied.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangle `[x0, x1] × [y0, y1]` in µm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let r = Self { x0, x1, y0, y1 };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.x1, self.y0, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::domain(format!("degenerate rectangle {self:?}")));
        }
        Ok(())
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    fn corners(&self) -> [(f64, f64, f64); 4] {
        [
            (self.x1, self.y1, 1.0),
            (self.x0, self.y1, -1.0),
            (self.x1, self.y0, -1.0),
            (self.x0, self.y0, 1.0),
        ]
    }

    fn potential(&self, r: &Vector3<f64>) -> f64 {
        let z = r.z;
        let sum: f64 = self
            .corners()
            .iter()
            .map(|&(xc, yc, sign)| {
                let dx = xc - r.x;
                let dy = yc - r.y;
                let dist = (dx * dx + dy * dy + z * z).sqrt();
                sign * (dx * dy / (z * dist)).atan()
            })
            .sum();
        sum / TAU
    }

    /// Analytic gradient of [`Self::potential`] in 1/µm.
    fn gradient(&self, r: &Vector3<f64>) -> Vector3<f64> {
        let z = r.z;
        let mut g = Vector3::zeros();
        for &(xc, yc, sign) in &self.corners() {
            let dx = xc - r.x;
            let dy = yc - r.y;
            let dist = (dx * dx + dy * dy + z * z).sqrt();
            let ax = dx * dx + z * z;
            let ay = dy * dy + z * z;
            // derivatives with respect to dx, dy, z of atan(dx·dy / (z·dist))
            let d_dx = dy * z / (dist * ax);
            let d_dy = dx * z / (dist * ay);
            let d_z = -dx * dy * (dist * dist + z * z) / (dist * ax * ay);
            g += sign * Vector3::new(-d_dx, -d_dy, d_z);
        }
        g / TAU
    }
}

/// One control electrode: a labelled set of non-overlapping rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawElectrode")]
pub struct ElectrodeGeometry {
    pub id: u32,
    rects: Vec<Rect>,
}

#[derive(Deserialize)]
struct RawElectrode {
    id: u32,
    rects: Vec<Rect>,
}

impl TryFrom<RawElectrode> for ElectrodeGeometry {
    type Error = Error;

    fn try_from(raw: RawElectrode) -> Result<Self> {
        Self::new(raw.id, raw.rects)
    }
}

fn check_above_plane(r: &Vector3<f64>) -> Result<()> {
    if !(r.iter().all(|v| v.is_finite()) && r.z > 0.0) {
        return Err(Error::domain(format!(
            "evaluation point must lie strictly above the electrode plane, got z = {}",
            r.z
        )));
    }
    Ok(())
}

impl ElectrodeGeometry {
    pub fn new(id: u32, rects: Vec<Rect>) -> Result<Self> {
        if rects.is_empty() {
            return Err(Error::domain(format!("electrode {id} has no patches")));
        }
        for (i, a) in rects.iter().enumerate() {
            a.validate()?;
            if rects[..i].iter().any(|b| a.overlaps(b)) {
                return Err(Error::domain(format!("electrode {id} has overlapping patches")));
            }
        }
        Ok(Self { id, rects })
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// Potential at `r` (µm) per volt applied to this electrode.
    pub fn potential(&self, r: &Vector3<f64>) -> Result<f64> {
        check_above_plane(r)?;
        Ok(self.rects.iter().map(|p| p.potential(r)).sum())
    }

    /// `E = −∇φ` at `r` (µm), in (V/m) per volt.
    pub fn field(&self, r: &Vector3<f64>) -> Result<Vector3<f64>> {
        check_above_plane(r)?;
        let grad: Vector3<f64> = self.rects.iter().map(|p| p.gradient(r)).sum();
        Ok(-grad * 1e6)
    }
}

pub fn patch_potential(geometry: &ElectrodeGeometry, r: &Vector3<f64>) -> Result<f64> {
    geometry.potential(r)
}

/// A full electrode layout, as stored in geometry files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeArray {
    pub electrodes: Vec<ElectrodeGeometry>,
}

const DEMO_GEOMETRY: &str = include_str!("../data/demo_geometry.json");

impl ElectrodeArray {
    pub fn new(electrodes: Vec<ElectrodeGeometry>) -> Result<Self> {
        let mut ids: Vec<u32> = electrodes.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("duplicate electrode id"));
        }
        Ok(Self { electrodes })
    }

    /// Illustrative 30-electrode layout of ~40 µm pads around the site
    /// (24, 0, 36) µm. Not a real device; electrodes 21–30 give moderate
    /// fields at that site and are the default tickle electrodes.
    pub fn demo() -> Self {
        Self::from_json(DEMO_GEOMETRY).expect("bundled demo geometry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ElectrodeArray = serde_json::from_str(text)?;
        Self::new(raw.electrodes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, id: u32) -> Option<&ElectrodeGeometry> {
        self.electrodes.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.electrodes.iter().map(|e| e.id).collect()
    }

    /// Tabulate every electrode's field at `r`.
    pub fn field_table(&self, r: &Vector3<f64>) -> Result<FieldTable> {
        let mut table = BTreeMap::new();
        for e in &self.electrodes {
            let f = e.field(r)?;
            table.insert(e.id, [f.x, f.y, f.z]);
        }
        Ok(FieldTable(table))
    }
}

/// Field vectors at the trap site, (V/m) per volt, keyed by electrode id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldTable(pub BTreeMap<u32, [f64; 3]>);

impl FieldTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: FieldTable = serde_json::from_str(text)?;
        if table.0.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parse("field table contains non-finite entries".into()));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, id: u32) -> Option<Vector3<f64>> {
        self.0.get(&id).map(|v| Vector3::from(*v))
    }
}

/// Ion site and its position uncertainty (half-widths), both in µm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapSite {
    pub position: Vector3<f64>,
    pub uncertainty: Vector3<f64>,
}

impl TrapSite {
    pub fn new(position: Vector3<f64>, uncertainty: Vector3<f64>) -> Result<Self> {
        check_above_plane(&position)?;
        if uncertainty.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(Error::domain("site uncertainty must be non-negative"));
        }
        Ok(Self { position, uncertainty })
    }
}

/// Where electrode fields come from: an electrode layout evaluated at the
/// requested point, or a table measured/computed elsewhere for one site.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldSource {
    Geometry(ElectrodeArray),
    Table(FieldTable),
}

impl FieldSource {
    /// Field of electrode `id` at `r` (µm). Tables ignore `r`.
    pub fn field(&self, id: u32, r: &Vector3<f64>) -> Result<Vector3<f64>> {
        match self {
            FieldSource::Geometry(array) => array
                .get(id)
                .ok_or(Error::UnknownElectrode(id))?
                .field(r),
            FieldSource::Table(table) => table.get(id).ok_or(Error::UnknownElectrode(id)),
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, FieldSource::Geometry(_))
    }
}

pub fn electrode_field(source: &FieldSource, id: u32, r: &Vector3<f64>) -> Result<Vector3<f64>> {
    source.field(id, r)
}
