//! Run configuration, field snapshots and history files.

mod history;
mod vtk;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjoint::SensitivityMethod;
use crate::materials::PhysicalParams;
use crate::mesh::{generate_annulus_mesh, generate_rectangle_mesh_tagged, BoundaryTag, MeshError, RectangleTags, TriangleMesh};
use crate::optimizer::{OptimParams, SensitivitySign};
use crate::pnp::SolverTolerances;

pub use history::{read_history_csv, write_history_csv, HISTORY_HEADER};
pub use vtk::{read_vtk, write_vtk_snapshot, VtkData};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("field '{name}' has {found} values, mesh has {expected} vertices")]
    FieldLength { name: String, expected: usize, found: usize },
    #[error("history is empty")]
    EmptyHistory,
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(path, e))?;
    tmp.write_all(contents).map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectangleConfig {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    pub left: BoundaryTag,
    pub right: BoundaryTag,
    pub bottom: BoundaryTag,
    pub top: BoundaryTag,
}

impl Default for RectangleConfig {
    fn default() -> Self {
        let t = RectangleTags::default();
        Self { nx: 16, ny: 32, width: 1.0, height: 2.0, left: t.left, right: t.right, bottom: t.bottom, top: t.top }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnulusConfig {
    pub nr: usize,
    pub ntheta: usize,
    pub r_inner: f64,
    pub r_outer: f64,
}

impl Default for AnnulusConfig {
    fn default() -> Self {
        Self { nr: 12, ntheta: 96, r_inner: 0.2, r_outer: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Rectangle(RectangleConfig),
    Annulus(AnnulusConfig),
}

impl Geometry {
    pub fn build_mesh(&self) -> Result<TriangleMesh, MeshError> {
        match *self {
            Geometry::Rectangle(r) => generate_rectangle_mesh_tagged(
                r.nx,
                r.ny,
                r.width,
                r.height,
                RectangleTags { left: r.left, right: r.right, bottom: r.bottom, top: r.top },
            ),
            Geometry::Annulus(a) => generate_annulus_mesh(a.nr, a.ntheta, a.r_inner, a.r_outer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    /// Mode number of the initial phase field.
    pub initial_m: u32,
    pub output_dir: PathBuf,
    pub snapshot_stride: usize,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { initial_m: 4, output_dir: PathBuf::from("output"), snapshot_stride: 100, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub physical: PhysicalParams,
    pub optim: OptimParams,
    pub tolerances: SolverTolerances,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

// Every optimization key is optional so that geometry-dependent defaults
// can be filled in after the geometry is known.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimSection {
    kappa: Option<f64>,
    beta: Option<f64>,
    nu: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    v_target: Option<f64>,
    outer_iters: Option<usize>,
    state_update_stride: Option<usize>,
    projection_enabled: Option<bool>,
    sensitivity_sign: Option<SensitivitySign>,
    sensitivity_method: Option<SensitivityMethod>,
    lumped_mass: Option<bool>,
    early_stop: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    rectangle: Option<RectangleConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    annulus: Option<AnnulusConfig>,
    #[serde(default)]
    physical: PhysicalParams,
    #[serde(default)]
    optim: OptimSection,
    #[serde(default)]
    tolerances: SolverTolerances,
    #[serde(default)]
    run: RunSettings,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first key in `section` whose name occurs in `message`,
/// otherwise the section header, otherwise none.
fn locate(text: &str, section: &str, message: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim();
            let mentioned = message
                .split(|c: char| !(c.is_alphanumeric() || c == '_'))
                .any(|word| word == key);
            if !key.is_empty() && mentioned {
                return Some(i + 1);
            }
        }
    }
    header
}

/// Parses and validates a run configuration. Missing keys take the
/// Example 1 values; an `[annulus]` section switches the defaults of `nu`
/// and `v_target` to the Example 2 values.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError {
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })?;
    let invariant = |section: &str, message: String| ConfigError { line: locate(text, section, &message), message };

    let (geometry, section) = match (raw.rectangle, raw.annulus) {
        (Some(_), Some(_)) => {
            return Err(invariant("annulus", "only one of [rectangle] and [annulus] may be given".into()));
        }
        (Some(r), None) => (Geometry::Rectangle(r), "rectangle"),
        (None, Some(a)) => (Geometry::Annulus(a), "annulus"),
        (None, None) => (Geometry::Rectangle(RectangleConfig::default()), "rectangle"),
    };
    let mesh = geometry.build_mesh().map_err(|e| invariant(section, e.to_string()))?;
    let area = mesh.total_area();

    let mut optim = OptimParams::default();
    if let Geometry::Annulus(_) = geometry {
        optim.nu = 1e-3;
        optim.v_target = 0.5 * area;
    }
    let o = raw.optim;
    macro_rules! overlay {
        ($($f:ident),*) => { $(if let Some(v) = o.$f { optim.$f = v; })* };
    }
    overlay!(
        kappa, beta, nu, lambda1, lambda2, v_target, outer_iters, state_update_stride, projection_enabled,
        sensitivity_sign, sensitivity_method, lumped_mass, early_stop
    );

    let (physical, tolerances) = (raw.physical, raw.tolerances);
    physical.validate().map_err(|e| invariant("physical", e.to_string()))?;
    optim.validate(area).map_err(|e| invariant("optim", e.to_string()))?;
    tolerances.validate().map_err(|e| invariant("tolerances", e.to_string()))?;
    if raw.run.snapshot_stride == 0 {
        return Err(invariant("run", "snapshot_stride must be >= 1".into()));
    }
    Ok(RunConfig { geometry, physical, optim, tolerances, run: raw.run })
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { line: None, message: format!("{}: {e}", path.display()) })?;
    parse_config(&text).map_err(|e| ConfigError { message: format!("{}: {}", path.display(), e.message), ..e })
}

/// Serializes every value explicitly; `parse_config` of the result gives
/// back the same configuration.
pub fn config_to_string(cfg: &RunConfig) -> String {
    let o = &cfg.optim;
    let raw = RawConfig {
        rectangle: match cfg.geometry {
            Geometry::Rectangle(r) => Some(r),
            Geometry::Annulus(_) => None,
        },
        annulus: match cfg.geometry {
            Geometry::Annulus(a) => Some(a),
            Geometry::Rectangle(_) => None,
        },
        physical: cfg.physical,
        optim: OptimSection {
            kappa: Some(o.kappa),
            beta: Some(o.beta),
            nu: Some(o.nu),
            lambda1: Some(o.lambda1),
            lambda2: Some(o.lambda2),
            v_target: Some(o.v_target),
            outer_iters: Some(o.outer_iters),
            state_update_stride: Some(o.state_update_stride),
            projection_enabled: Some(o.projection_enabled),
            sensitivity_sign: Some(o.sensitivity_sign),
            sensitivity_method: Some(o.sensitivity_method),
            lumped_mass: Some(o.lumped_mass),
            early_stop: Some(o.early_stop),
        },
        tolerances: cfg.tolerances,
        run: cfg.run.clone(),
    };
    toml::to_string(&raw).expect("configuration is representable as TOML")
}

#[cfg(test)]
mod tests;
