//! The coupled discrete state equations as one nonlinear system in the
//! unknowns `(ρ₁, ρ₂, ψ)`, interleaved per vertex, with exact derivatives
//! with respect to the state and to the nodal phase field.

use crate::fem::inverse_average::inverse_average_with_gradient;
use crate::fem::{self, LinearSystem, SparseMatrix};
use crate::materials::{ElementMaterials, PhysicalParams};
use crate::mesh::{ElementGeometry, TriangleMesh};

use super::{check_len, recover_concentrations, BoundaryData, PnpError, StateSolution};

/// Unknowns per vertex.
pub const BLOCK: usize = 3;
/// Component of ψ inside a vertex block; species `i` sits at component `i`.
pub const PSI: usize = 2;

#[inline]
pub fn dof(vertex: usize, component: usize) -> usize {
    BLOCK * vertex + component
}

pub fn pack(psi: &[f64], rho: &[Vec<f64>; 2]) -> Vec<f64> {
    let mut u = vec![0.0; BLOCK * psi.len()];
    for v in 0..psi.len() {
        u[dof(v, 0)] = rho[0][v];
        u[dof(v, 1)] = rho[1][v];
        u[dof(v, PSI)] = psi[v];
    }
    u
}

pub fn unpack(u: &[f64]) -> (Vec<f64>, [Vec<f64>; 2]) {
    let n = u.len() / BLOCK;
    let psi = (0..n).map(|v| u[dof(v, PSI)]).collect();
    let rho = [(0..n).map(|v| u[dof(v, 0)]).collect(), (0..n).map(|v| u[dof(v, 1)]).collect()];
    (psi, rho)
}

/// Per-triangle quantities shared by the residual and its derivatives.
struct ElementState {
    e: [f64; 2],
    de: [[f64; 3]; 2],
    // local stiffness times ρᵢ and ψ
    k_rho: [[f64; 3]; 2],
    k_psi: [f64; 3],
}

pub struct StateResidual<'a> {
    mesh: &'a TriangleMesh,
    phi: &'a [f64],
    params: &'a PhysicalParams,
    boundary: BoundaryData,
    materials: ElementMaterials,
    geometry: Vec<ElementGeometry>,
    stiffness: Vec<[[f64; 3]; 3]>,
    dirichlet: Vec<bool>,
}

impl<'a> StateResidual<'a> {
    pub fn new(mesh: &'a TriangleMesh, phi: &'a [f64], params: &'a PhysicalParams) -> Result<Self, PnpError> {
        check_len(mesh, phi)?;
        let boundary = BoundaryData::new(mesh, phi, params)?;
        let materials = ElementMaterials::new(mesh, phi, params);
        let geometry = mesh.elements();
        let stiffness = geometry.iter().map(ElementGeometry::stiffness).collect();
        let mut dirichlet = vec![false; mesh.num_vertices()];
        for &(v, _) in &boundary.psi {
            dirichlet[v] = true;
        }
        Ok(Self { mesh, phi, params, boundary, materials, geometry, stiffness, dirichlet })
    }

    pub fn boundary(&self) -> &BoundaryData {
        &self.boundary
    }

    pub fn materials(&self) -> &ElementMaterials {
        &self.materials
    }

    pub fn is_dirichlet(&self, vertex: usize) -> bool {
        self.dirichlet[vertex]
    }

    fn element_state(&self, k: usize, psi: &[f64], rho: &[Vec<f64>; 2], with_gradient: bool) -> ElementState {
        let t = self.mesh.triangles[k];
        let st = &self.stiffness[k];
        let local = |f: &[f64]| -> [f64; 3] {
            let x = [f[t[0]], f[t[1]], f[t[2]]];
            [
                st[0][0] * x[0] + st[0][1] * x[1] + st[0][2] * x[2],
                st[1][0] * x[0] + st[1][1] * x[1] + st[1][2] * x[2],
                st[2][0] * x[0] + st[2][1] * x[1] + st[2][2] * x[2],
            ]
        };
        let mut e = [0.0; 2];
        let mut de = [[0.0; 3]; 2];
        for i in 0..2 {
            let z = self.params.valence(i);
            let u = t.map(|v| self.params.alpha0 * self.phi[v] - z * psi[v]);
            if with_gradient {
                let (ev, g) = inverse_average_with_gradient(u);
                e[i] = ev;
                de[i] = g;
            } else {
                e[i] = crate::fem::inverse_average::inverse_average(u);
            }
        }
        ElementState {
            e,
            de,
            k_rho: [local(&rho[0]), local(&rho[1])],
            k_psi: local(psi),
        }
    }

    /// Residual vector; Dirichlet rows hold `u − g`.
    pub fn residual(&self, psi: &[f64], rho: &[Vec<f64>; 2]) -> Result<Vec<f64>, PnpError> {
        check_len(self.mesh, psi)?;
        let n = self.mesh.num_vertices();
        let mut r = vec![0.0; BLOCK * n];
        for k in 0..self.mesh.num_triangles() {
            let t = self.mesh.triangles[k];
            let s = self.element_state(k, psi, rho, false);
            let (d, eps) = (self.materials.diffusion[k], self.materials.dielectric[k]);
            let third = self.geometry[k].area / 3.0;
            for a in 0..3 {
                let v = t[a];
                if self.dirichlet[v] {
                    continue;
                }
                let mut source = 0.0;
                for i in 0..2 {
                    r[dof(v, i)] += s.e[i] * d * s.k_rho[i][a];
                    source += self.params.valence(i) * s.e[i] * rho[i][v];
                }
                r[dof(v, PSI)] += eps * s.k_psi[a] - third * source;
            }
        }
        for &(v, g) in &self.boundary.psi {
            r[dof(v, PSI)] = psi[v] - g;
        }
        for i in 0..2 {
            for &(v, g) in &self.boundary.rho[i] {
                r[dof(v, i)] = rho[i][v] - g;
            }
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(PnpError::Fem(fem::FemError::NonFinite("state residual overflow".into())));
        }
        Ok(r)
    }

    pub fn norm(&self, psi: &[f64], rho: &[Vec<f64>; 2]) -> Result<f64, PnpError> {
        Ok(self.residual(psi, rho)?.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Exact Jacobian `∂R/∂(ρ₁, ρ₂, ψ)`; Dirichlet rows are identity rows.
    pub fn jacobian(&self, psi: &[f64], rho: &[Vec<f64>; 2]) -> Result<SparseMatrix, PnpError> {
        check_len(self.mesh, psi)?;
        let mut j = SparseMatrix::from_block_pattern(&self.mesh.vertex_neighbours(), BLOCK);
        for k in 0..self.mesh.num_triangles() {
            let t = self.mesh.triangles[k];
            let s = self.element_state(k, psi, rho, true);
            let st = &self.stiffness[k];
            let (d, eps) = (self.materials.diffusion[k], self.materials.dielectric[k]);
            let third = self.geometry[k].area / 3.0;
            for a in 0..3 {
                let v = t[a];
                if self.dirichlet[v] {
                    continue;
                }
                for i in 0..2 {
                    let z = self.params.valence(i);
                    let row = dof(v, i);
                    for b in 0..3 {
                        j.add(row, dof(t[b], i), s.e[i] * d * st[a][b]);
                        j.add(row, dof(t[b], PSI), -z * s.de[i][b] * d * s.k_rho[i][a]);
                    }
                    j.add(dof(v, PSI), dof(v, i), -third * z * s.e[i]);
                }
                let row = dof(v, PSI);
                for b in 0..3 {
                    let mut val = eps * st[a][b];
                    for i in 0..2 {
                        let z = self.params.valence(i);
                        val += third * z * z * rho[i][v] * s.de[i][b];
                    }
                    j.add(row, dof(t[b], PSI), val);
                }
            }
        }
        for v in 0..self.mesh.num_vertices() {
            if self.dirichlet[v] {
                for c in 0..BLOCK {
                    j.add(dof(v, c), dof(v, c), 1.0);
                }
            }
        }
        Ok(j)
    }

    /// Calls `f(row, vertex, value)` for every nonzero `∂R_row/∂φ_vertex`
    /// on free rows.
    fn for_each_phi_derivative(
        &self,
        psi: &[f64],
        rho: &[Vec<f64>; 2],
        mut f: impl FnMut(usize, usize, f64),
    ) {
        let alpha0 = self.params.alpha0;
        for k in 0..self.mesh.num_triangles() {
            let t = self.mesh.triangles[k];
            let s = self.element_state(k, psi, rho, true);
            let (d, dd) = (self.materials.diffusion[k], self.materials.diffusion_derivative[k]);
            let de = self.materials.dielectric_derivative[k];
            let third = self.geometry[k].area / 3.0;
            for a in 0..3 {
                let v = t[a];
                if self.dirichlet[v] {
                    continue;
                }
                for b in 0..3 {
                    let mut psi_row = de / 3.0 * s.k_psi[a];
                    for i in 0..2 {
                        let z = self.params.valence(i);
                        let val = (alpha0 * s.de[i][b] * d + s.e[i] * dd / 3.0) * s.k_rho[i][a];
                        f(dof(v, i), t[b], val);
                        psi_row -= third * z * rho[i][v] * alpha0 * s.de[i][b];
                    }
                    f(dof(v, PSI), t[b], psi_row);
                }
            }
        }
    }

    /// `(∂R/∂φ) θ`.
    pub fn phi_jacobian_product(&self, psi: &[f64], rho: &[Vec<f64>; 2], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; BLOCK * self.mesh.num_vertices()];
        self.for_each_phi_derivative(psi, rho, |row, v, val| out[row] += val * theta[v]);
        out
    }

    /// `(∂R/∂φ)ᵀ λ`.
    pub fn phi_jacobian_transpose_product(&self, psi: &[f64], rho: &[Vec<f64>; 2], lambda: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.num_vertices()];
        self.for_each_phi_derivative(psi, rho, |row, v, val| out[v] += val * lambda[row]);
        out
    }
}

/// Full Newton iterations on the coupled system, started from a Gummel
/// state. Stops when the residual no longer decreases.
pub fn newton_polish(
    mesh: &TriangleMesh,
    phi: &[f64],
    params: &PhysicalParams,
    state: &StateSolution,
    max_iter: usize,
) -> Result<StateSolution, PnpError> {
    let op = StateResidual::new(mesh, phi, params)?;
    let mut u = pack(&state.psi, &state.rho);
    let (psi, rho) = unpack(&u);
    let mut r = op.residual(&psi, &rho)?;
    let mut rnorm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..max_iter {
        let (psi, rho) = unpack(&u);
        let jac = op.jacobian(&psi, &rho)?;
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let step = fem::solve_linear(&LinearSystem::new(jac, rhs))?;
        let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + b).collect();
        let (tp, tr) = unpack(&trial);
        let rt = op.residual(&tp, &tr)?;
        let nt = rt.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(nt < rnorm) {
            break;
        }
        u = trial;
        r = rt;
        rnorm = nt;
    }
    let (psi, rho) = unpack(&u);
    let c = recover_concentrations(phi, &psi, &rho, params)?;
    Ok(StateSolution {
        psi,
        rho,
        c,
        gummel_iterations: state.gummel_iterations,
        converged: state.converged,
        residual: rnorm,
        psi_changes: state.psi_changes.clone(),
    })
}
