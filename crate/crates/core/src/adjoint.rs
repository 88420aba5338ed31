//! Adjoint solves and the sensitivity of the net-charge objective with
//! respect to the nodal phase field.
//!
//! Two routes are provided. [`SensitivityMethod::Galerkin`] discretizes the
//! continuous adjoint system with plain P1 Galerkin and evaluates the
//! continuous sensitivity formula with a centroid rule. Because the state is
//! discretized with inverse averaging, this is only an approximation of the
//! derivative of the discrete objective. [`SensitivityMethod::Discrete`]
//! transposes the exact Jacobian of the stabilized state equations and gives
//! the derivative of the discrete objective to rounding error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{self, FemError, LinearSystem, SparseMatrix};
use crate::materials::{ElementMaterials, PhysicalParams};
use crate::mesh::{dot, TriangleMesh};
use crate::pnp::discrete::{self, dof, newton_polish, StateResidual, BLOCK, PSI};
use crate::pnp::{self, gummel_solve, PnpError, SolverTolerances, StateSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjointError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error("field length {found} does not match {expected} vertices")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("state solve did not converge")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMethod {
    /// Exact derivative of the discrete objective.
    Discrete,
    /// Galerkin adjoint with the continuous sensitivity formula.
    Galerkin,
}

/// Adjoint concentrations and potential.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub s: [Vec<f64>; 2],
    pub zeta: Vec<f64>,
    /// Euclidean residual norm of the block system.
    pub residual: f64,
}

/// One value per vertex: the sensitivity tested against each hat function.
pub type SensitivityLoad = Vec<f64>;

fn check_len(mesh: &TriangleMesh, field: &[f64]) -> Result<(), AdjointError> {
    if field.len() != mesh.num_vertices() {
        return Err(AdjointError::DimensionMismatch { expected: mesh.num_vertices(), found: field.len() });
    }
    Ok(())
}

fn dirichlet_mask(mesh: &TriangleMesh) -> Vec<bool> {
    mesh.vertex_tags.iter().map(|t| t.is_dirichlet()).collect()
}

/// Block system of the Galerkin adjoint, unknowns interleaved per vertex
/// as `(s₁, s₂, ζ)`, with homogeneous Dirichlet constraints attached.
pub fn assemble_adjoint_system(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    params: &PhysicalParams,
) -> Result<LinearSystem, AdjointError> {
    check_len(mesh, phi)?;
    check_len(mesh, &state.psi)?;
    let n = mesh.num_vertices();
    let mat = ElementMaterials::new(mesh, phi, params);
    let mut a = SparseMatrix::from_block_pattern(&mesh.vertex_neighbours(), BLOCK);
    let mut rhs = vec![0.0; BLOCK * n];
    let alpha0 = params.alpha0;
    for (k, t) in mesh.triangles.iter().enumerate() {
        let e = mesh.element(k);
        let grad_psi = e.gradient(mesh.gather(k, &state.psi));
        let grad_phi = e.gradient(mesh.gather(k, phi));
        let (d, eps) = (mat.diffusion[k], mat.dielectric[k]);
        let c_bar = [0, 1].map(|i| mesh.gather(k, &state.c[i]).iter().sum::<f64>() / 3.0);
        for a_loc in 0..3 {
            let va = t[a_loc];
            for b_loc in 0..3 {
                let vb = t[b_loc];
                let stiff = e.area * dot(e.grads[a_loc], e.grads[b_loc]);
                let mass = e.area / 12.0 * if a_loc == b_loc { 2.0 } else { 1.0 };
                for i in 0..2 {
                    let z = params.valence(i);
                    let drift = [z * grad_psi[0] - alpha0 * grad_phi[0], z * grad_psi[1] - alpha0 * grad_phi[1]];
                    let conv = d * e.area / 3.0 * dot(drift, e.grads[b_loc]);
                    a.add(dof(va, i), dof(vb, i), d * stiff + conv);
                    a.add(dof(va, i), dof(vb, PSI), -z * mass);
                    a.add(dof(va, PSI), dof(vb, i), d * z * c_bar[i] * stiff);
                }
                a.add(dof(va, PSI), dof(vb, PSI), eps * stiff);
            }
            for i in 0..2 {
                rhs[dof(va, i)] -= params.valence(i) * e.area / 3.0;
            }
        }
    }
    let constrained = (0..n)
        .filter(|&v| mesh.vertex_tags[v].is_dirichlet())
        .flat_map(|v| (0..BLOCK).map(move |c| (dof(v, c), 0.0)));
    Ok(LinearSystem::new(a, rhs).with_dirichlet(constrained))
}

/// Monolithic direct solve of the Galerkin adjoint system.
pub fn solve_adjoint(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    params: &PhysicalParams,
) -> Result<AdjointSolution, AdjointError> {
    let sys = assemble_adjoint_system(mesh, phi, state, params)?;
    let x = fem::solve_linear(&sys)?;
    let reduced = fem::apply_dirichlet(&sys)?;
    let ax = reduced.matrix.mul_vec(&x);
    let residual = ax.iter().zip(&reduced.rhs).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let n = mesh.num_vertices();
    Ok(AdjointSolution {
        s: [(0..n).map(|v| x[dof(v, 0)]).collect(), (0..n).map(|v| x[dof(v, 1)]).collect()],
        zeta: (0..n).map(|v| x[dof(v, PSI)]).collect(),
        residual,
    })
}

/// Continuous sensitivity formula tested against every hat function, with
/// centroid quadrature. Entries at Dirichlet vertices are zero.
pub fn assemble_sensitivity(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    adj: &AdjointSolution,
    params: &PhysicalParams,
) -> Result<SensitivityLoad, AdjointError> {
    check_len(mesh, phi)?;
    check_len(mesh, &adj.zeta)?;
    let mat = ElementMaterials::new(mesh, phi, params);
    let alpha0 = params.alpha0;
    let mut load = vec![0.0; mesh.num_vertices()];
    for (k, t) in mesh.triangles.iter().enumerate() {
        let e = mesh.element(k);
        let grad_psi = e.gradient(mesh.gather(k, &state.psi));
        let grad_phi = e.gradient(mesh.gather(k, phi));
        let grad_zeta = e.gradient(mesh.gather(k, &adj.zeta));
        let mut centroid_part = -mat.dielectric_derivative[k] * dot(grad_psi, grad_zeta);
        let mut transport = [0.0; 2];
        for i in 0..2 {
            let z = params.valence(i);
            let grad_s = e.gradient(mesh.gather(k, &adj.s[i]));
            let grad_c = e.gradient(mesh.gather(k, &state.c[i]));
            let c_bar = mesh.gather(k, &state.c[i]).iter().sum::<f64>() / 3.0;
            let flux = [
                grad_c[0] + z * c_bar * grad_psi[0] - alpha0 * c_bar * grad_phi[0],
                grad_c[1] + z * c_bar * grad_psi[1] - alpha0 * c_bar * grad_phi[1],
            ];
            centroid_part -= mat.diffusion_derivative[k] * dot(flux, grad_s);
            let w = mat.diffusion[k] * alpha0 * c_bar;
            transport[0] += w * grad_s[0];
            transport[1] += w * grad_s[1];
        }
        for a in 0..3 {
            load[t[a]] += e.area * (centroid_part / 3.0 + dot(transport, e.grads[a]));
        }
    }
    zero_dirichlet(mesh, &mut load);
    Ok(load)
}

fn zero_dirichlet(mesh: &TriangleMesh, load: &mut [f64]) {
    for (v, is_fixed) in dirichlet_mask(mesh).into_iter().enumerate() {
        if is_fixed {
            load[v] = 0.0;
        }
    }
}

pub fn directional_derivative(load: &[f64], theta: &[f64]) -> f64 {
    load.iter().zip(theta).map(|(a, b)| a * b).sum()
}

/// Multiplier of the discrete adjoint, in the interleaved state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteAdjoint {
    pub lambda: Vec<f64>,
    pub residual: f64,
}

/// Partial derivatives of the discrete objective
/// `𝒥 = −Σ_a m_a Σᵢ zᵢ ρᵢ(a) exp(−zᵢψ_a + α₀φ_a)`, returned as
/// (state layout, nodal φ).
pub fn objective_partials(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    params: &PhysicalParams,
) -> (Vec<f64>, Vec<f64>) {
    let m = fem::lumped_mass(mesh);
    let n = mesh.num_vertices();
    let mut du = vec![0.0; BLOCK * n];
    let mut dphi = vec![0.0; n];
    for v in 0..n {
        for i in 0..2 {
            let z = params.valence(i);
            let factor = (-z * state.psi[v] + params.alpha0 * phi[v]).exp();
            let c = state.rho[i][v] * factor;
            du[dof(v, i)] = -m[v] * z * factor;
            du[dof(v, PSI)] += m[v] * z * z * c;
            dphi[v] -= m[v] * params.alpha0 * z * c;
        }
    }
    (du, dphi)
}

/// Solves `(∂R/∂u)ᵀ λ = ∂𝒥/∂u` at the given state.
pub fn solve_discrete_adjoint(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    params: &PhysicalParams,
) -> Result<DiscreteAdjoint, AdjointError> {
    check_len(mesh, phi)?;
    let op = StateResidual::new(mesh, phi, params)?;
    let jt = op.jacobian(&state.psi, &state.rho)?.transpose();
    let (du, _) = objective_partials(mesh, phi, state, params);
    let lambda = fem::solve_linear(&LinearSystem::new(jt.clone(), du.clone()))?;
    let residual = fem::relative_residual(&jt, &lambda, &du);
    Ok(DiscreteAdjoint { lambda, residual })
}

/// `d𝒥/dφ = ∂𝒥/∂φ − λᵀ ∂R/∂φ`, zero at Dirichlet vertices.
pub fn discrete_sensitivity(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    params: &PhysicalParams,
) -> Result<SensitivityLoad, AdjointError> {
    let adj = solve_discrete_adjoint(mesh, phi, state, params)?;
    let op = StateResidual::new(mesh, phi, params)?;
    let (_, mut load) = objective_partials(mesh, phi, state, params);
    let coupling = op.phi_jacobian_transpose_product(&state.psi, &state.rho, &adj.lambda);
    for (l, c) in load.iter_mut().zip(&coupling) {
        *l -= c;
    }
    zero_dirichlet(mesh, &mut load);
    Ok(load)
}

/// Sensitivity load by the selected route.
pub fn sensitivity(
    mesh: &TriangleMesh,
    phi: &[f64],
    state: &StateSolution,
    params: &PhysicalParams,
    method: SensitivityMethod,
) -> Result<SensitivityLoad, AdjointError> {
    match method {
        SensitivityMethod::Discrete => discrete_sensitivity(mesh, phi, state, params),
        SensitivityMethod::Galerkin => {
            let adj = solve_adjoint(mesh, phi, state, params)?;
            assemble_sensitivity(mesh, phi, state, &adj, params)
        }
    }
}

/// Gummel solve followed by coupled Newton steps, so that finite
/// differences of the objective are not dominated by solver tolerance.
pub fn converged_state(
    mesh: &TriangleMesh,
    phi: &[f64],
    params: &PhysicalParams,
    tols: &SolverTolerances,
    warm: Option<&StateSolution>,
) -> Result<StateSolution, AdjointError> {
    let state = gummel_solve(mesh, phi, params, tols, warm)?;
    if !state.converged {
        return Err(AdjointError::NotConverged);
    }
    Ok(newton_polish(mesh, phi, params, &state, 8)?)
}

/// Smooth pseudo-random direction, zero at Dirichlet vertices.
pub fn random_direction(mesh: &TriangleMesh, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let mut theta: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|p| modes.iter().map(|m| m[0] * (m[1] * p[0] + m[2] * p[1] + m[3]).sin()).sum())
        .collect();
    zero_dirichlet(mesh, &mut theta);
    theta
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckRow {
    pub adjoint: f64,
    /// Central differences for each step.
    pub finite_differences: Vec<(f64, f64)>,
    /// Smallest relative error over the steps.
    pub relative_error: f64,
}

pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Compares adjoint directional derivatives with central differences of
/// fully re-converged objectives.
pub fn gradient_check(
    mesh: &TriangleMesh,
    phi: &[f64],
    params: &PhysicalParams,
    tols: &SolverTolerances,
    method: SensitivityMethod,
    directions: &[Vec<f64>],
) -> Result<Vec<GradientCheckRow>, AdjointError> {
    check_len(mesh, phi)?;
    let base = converged_state(mesh, phi, params, tols, None)?;
    let load = sensitivity(mesh, phi, &base, params, method)?;
    let objective_at = |theta: &[f64], t: f64| -> Result<f64, AdjointError> {
        let shifted: Vec<f64> = phi.iter().zip(theta).map(|(f, d)| f + t * d).collect();
        let s = converged_state(mesh, &shifted, params, tols, Some(&base))?;
        Ok(pnp::objective(mesh, [&s.c[0], &s.c[1]], params))
    };
    let mut rows = Vec::with_capacity(directions.len());
    for theta in directions {
        check_len(mesh, theta)?;
        let adjoint = directional_derivative(&load, theta);
        let mut fds = Vec::new();
        let mut best = f64::INFINITY;
        for &t in &FD_STEPS {
            let fd = (objective_at(theta, t)? - objective_at(theta, -t)?) / (2.0 * t);
            let err = (adjoint - fd).abs() / fd.abs().max(f64::MIN_POSITIVE);
            best = best.min(err);
            fds.push((t, fd));
        }
        rows.push(GradientCheckRow { adjoint, finite_differences: fds, relative_error: best });
    }
    Ok(rows)
}

#[doc(hidden)]
pub use discrete::pack as pack_state;
