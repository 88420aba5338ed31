//! Material interpolation between electrolyte (`φ = 1`) and electrode
//! (`φ = 0`), and the double-well potential.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid physical parameters: {0}")]
pub struct ParamError(pub String);

/// PNP coefficients and boundary data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// Electrolyte dielectric coefficient.
    pub eps0: f64,
    /// Electrode dielectric coefficient.
    pub epsm: f64,
    /// Electrolyte diffusivity.
    pub d0: f64,
    /// Electrode diffusivity.
    pub dm: f64,
    /// Strength of the electrode–ion repulsion.
    pub alpha0: f64,
    /// Interpolation power.
    pub p: u32,
    /// Valences of the two species.
    pub z: [i32; 2],
    /// Applied potential on the electrode boundary.
    pub g_gamma2: f64,
    /// Potential on the reservoir boundary.
    pub g_gammain: f64,
    /// Bulk concentration of both species on the reservoir boundary.
    pub c_inf: f64,
    /// Concentration of both species on the electrode boundary.
    pub c_inf_gamma2: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            eps0: 0.01,
            epsm: 5.0,
            d0: 0.5,
            dm: 0.01,
            alpha0: 1.0,
            p: 2,
            z: [1, -1],
            g_gamma2: -0.5,
            g_gammain: 0.0,
            c_inf: 0.5,
            c_inf_gamma2: 0.0,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let finite = [
            self.eps0, self.epsm, self.d0, self.dm, self.alpha0, self.g_gamma2, self.g_gammain,
            self.c_inf, self.c_inf_gamma2,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(ParamError("all coefficients must be finite".into()));
        }
        if !(0.0 < self.dm && self.dm < self.d0) {
            return Err(ParamError(format!("need 0 < dm < d0, got dm = {}, d0 = {}", self.dm, self.d0)));
        }
        if !(0.0 < self.eps0 && self.eps0 < self.epsm) {
            return Err(ParamError(format!(
                "need 0 < eps0 < epsm, got eps0 = {}, epsm = {}",
                self.eps0, self.epsm
            )));
        }
        if self.p < 1 {
            return Err(ParamError("interpolation power p must be >= 1".into()));
        }
        if self.alpha0 < 0.0 {
            return Err(ParamError(format!("alpha0 must be >= 0, got {}", self.alpha0)));
        }
        if self.z != [1, -1] {
            return Err(ParamError(format!("valences must be (+1, -1), got {:?}", self.z)));
        }
        if self.c_inf < 0.0 || self.c_inf_gamma2 < 0.0 {
            return Err(ParamError("boundary concentrations must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn valence(&self, species: usize) -> f64 {
        self.z[species] as f64
    }
}

pub fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Interpolation weight `clamp01(φ^p)`.
#[inline]
fn weight(phi: f64, p: u32) -> f64 {
    clamp01(phi.powi(p as i32))
}

/// Derivative of the interpolation weight; zero wherever the clamp is active,
/// including exactly at `φ = 1`.
#[inline]
fn weight_derivative(phi: f64, p: u32) -> f64 {
    if phi <= 0.0 || phi >= 1.0 {
        0.0
    } else {
        p as f64 * phi.powi(p as i32 - 1)
    }
}

pub fn diffusion(phi: f64, params: &PhysicalParams) -> f64 {
    let w = weight(phi, params.p);
    w * params.d0 + (1.0 - w) * params.dm
}

pub fn dielectric(phi: f64, params: &PhysicalParams) -> f64 {
    let w = weight(phi, params.p);
    w * params.eps0 + (1.0 - w) * params.epsm
}

pub fn diffusion_derivative(phi: f64, params: &PhysicalParams) -> f64 {
    weight_derivative(phi, params.p) * (params.d0 - params.dm)
}

pub fn dielectric_derivative(phi: f64, params: &PhysicalParams) -> f64 {
    weight_derivative(phi, params.p) * (params.eps0 - params.epsm)
}

/// `ω(φ) = φ²(φ − 1)²/4`.
pub fn double_well(phi: f64) -> f64 {
    0.25 * phi * phi * (phi - 1.0) * (phi - 1.0)
}

pub fn double_well_derivative(phi: f64) -> f64 {
    0.5 * phi * (phi - 1.0) * (2.0 * phi - 1.0)
}

/// Material values on each triangle, evaluated at the centroid value of φ.
#[derive(Debug, Clone)]
pub struct ElementMaterials {
    pub phi: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub dielectric: Vec<f64>,
    pub diffusion_derivative: Vec<f64>,
    pub dielectric_derivative: Vec<f64>,
}

impl ElementMaterials {
    pub fn new(mesh: &crate::mesh::TriangleMesh, phi: &[f64], params: &PhysicalParams) -> Self {
        let centroid = mesh.centroid_values(phi);
        Self {
            diffusion: centroid.iter().map(|&f| diffusion(f, params)).collect(),
            dielectric: centroid.iter().map(|&f| dielectric(f, params)).collect(),
            diffusion_derivative: centroid.iter().map(|&f| diffusion_derivative(f, params)).collect(),
            dielectric_derivative: centroid.iter().map(|&f| dielectric_derivative(f, params)).collect(),
            phi: centroid,
        }
    }
}
