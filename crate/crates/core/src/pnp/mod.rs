//! Steady Poisson–Nernst–Planck state in Slotboom variables.
//!
//! The continuity equations are discretized with elementwise inverse averages
//! of `exp(α₀φ − zᵢψ)`, which keeps their matrices M-matrices on non-obtuse
//! meshes. The nonlinear Poisson–Boltzmann-type equation is solved by a
//! damped quasi-Newton iteration and both are coupled by Gummel sweeps.

pub mod discrete;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{
    self, assemble_weighted_stiffness, elementwise_inverse_average, lumped_mass, FemError,
    LinearSystem,
};
use crate::materials::{double_well, ElementMaterials, ParamError, PhysicalParams};
use crate::mesh::{BoundaryTag, TriangleMesh, VertexTag};
use crate::optimizer::{volume, OptimParams};

/// Largest exponent accepted by the Slotboom transforms.
pub const EXPONENT_LIMIT: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("Slotboom exponent {value} exceeds the overflow limit at vertex {vertex}")]
    Overflow { vertex: usize, value: f64 },
    #[error("field length {found} does not match {expected} vertices")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid solver tolerances: {0}")]
    Tolerances(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverTolerances {
    /// Stop when the sup-norm change of ψ between sweeps falls below this.
    pub gummel_tol: f64,
    pub gummel_max_iter: usize,
    /// Euclidean norm of the Poisson–Boltzmann residual.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub newton_damping: f64,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            gummel_tol: 1e-8,
            gummel_max_iter: 200,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            newton_damping: 1.0,
        }
    }
}

impl SolverTolerances {
    pub fn validate(&self) -> Result<(), PnpError> {
        if !(self.gummel_tol > 0.0 && self.newton_tol > 0.0) {
            return Err(PnpError::Tolerances("tolerances must be positive".into()));
        }
        if self.gummel_max_iter == 0 || self.newton_max_iter == 0 {
            return Err(PnpError::Tolerances("iteration limits must be positive".into()));
        }
        if !(self.newton_damping > 0.0 && self.newton_damping <= 1.0) {
            return Err(PnpError::Tolerances(format!(
                "newton_damping must lie in (0, 1], got {}",
                self.newton_damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSolution {
    pub psi: Vec<f64>,
    pub rho: [Vec<f64>; 2],
    pub c: [Vec<f64>; 2],
    pub gummel_iterations: usize,
    pub converged: bool,
    /// Euclidean norm of the coupled discrete residual at the returned state.
    pub residual: f64,
    /// Sup-norm change of ψ in every sweep.
    pub psi_changes: Vec<f64>,
}

/// `ρ = c · exp(zψ − α₀φ)`.
pub fn slotboom_forward(c: f64, psi: f64, phi: f64, z: f64, alpha0: f64) -> Result<f64, PnpError> {
    let x = z * psi - alpha0 * phi;
    if x.abs() > EXPONENT_LIMIT || !x.is_finite() {
        return Err(PnpError::Overflow { vertex: usize::MAX, value: x });
    }
    Ok(c * x.exp())
}

/// `c = ρ · exp(−zψ + α₀φ)`.
pub fn slotboom_inverse(rho: f64, psi: f64, phi: f64, z: f64, alpha0: f64) -> Result<f64, PnpError> {
    let x = -z * psi + alpha0 * phi;
    if x.abs() > EXPONENT_LIMIT || !x.is_finite() {
        return Err(PnpError::Overflow { vertex: usize::MAX, value: x });
    }
    Ok(rho * x.exp())
}

/// Dirichlet data of the state on `Γ_in ∪ Γ_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub psi: Vec<(usize, f64)>,
    pub rho: [Vec<(usize, f64)>; 2],
}

impl BoundaryData {
    /// Potential `g` and Slotboom values `c∞ exp(zg − α₀φ)` at every
    /// Dirichlet vertex.
    pub fn new(mesh: &TriangleMesh, phi: &[f64], params: &PhysicalParams) -> Result<Self, PnpError> {
        let mut psi = Vec::new();
        let mut rho = [Vec::new(), Vec::new()];
        for v in 0..mesh.num_vertices() {
            let (g, c) = match mesh.vertex_tags[v] {
                VertexTag::Boundary(BoundaryTag::GammaIn) => (params.g_gammain, params.c_inf),
                VertexTag::Boundary(BoundaryTag::GammaTwo) => (params.g_gamma2, params.c_inf_gamma2),
                _ => continue,
            };
            psi.push((v, g));
            for (i, r) in rho.iter_mut().enumerate() {
                let value = slotboom_forward(c, g, phi[v], params.valence(i), params.alpha0)
                    .map_err(|_| PnpError::Overflow { vertex: v, value: g })?;
                r.push((v, value));
            }
        }
        Ok(Self { psi, rho })
    }

    pub fn max_rho(&self, species: usize) -> f64 {
        self.rho[species].iter().fold(0.0, |m, &(_, v)| m.max(v))
    }
}

fn check_len(mesh: &TriangleMesh, field: &[f64]) -> Result<(), PnpError> {
    if field.len() != mesh.num_vertices() {
        return Err(PnpError::DimensionMismatch {
            expected: mesh.num_vertices(),
            found: field.len(),
        });
    }
    Ok(())
}

/// Exponents `α₀φ − zᵢψ` at the vertices.
fn exponent(phi: &[f64], psi: &[f64], z: f64, alpha0: f64) -> Vec<f64> {
    phi.iter().zip(psi).map(|(f, p)| alpha0 * f - z * p).collect()
}

/// Result of one Poisson–Boltzmann solve.
#[derive(Debug, Clone)]
pub struct PoissonBoltzmannSolution {
    pub psi: Vec<f64>,
    /// Residual norm before the first and after every accepted step.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl PoissonBoltzmannSolution {
    pub fn residual(&self) -> f64 {
        *self.residual_history.last().unwrap()
    }
}

struct PbOperator<'a> {
    mesh: &'a TriangleMesh,
    phi: &'a [f64],
    rho: [&'a [f64]; 2],
    params: &'a PhysicalParams,
    stiffness: fem::SparseMatrix,
    lumped_area: Vec<Vec<(usize, f64)>>,
    fixed: Vec<bool>,
}

impl<'a> PbOperator<'a> {
    fn new(
        mesh: &'a TriangleMesh,
        phi: &'a [f64],
        rho: [&'a [f64]; 2],
        params: &'a PhysicalParams,
        materials: &ElementMaterials,
        boundary: &BoundaryData,
    ) -> Result<Self, PnpError> {
        let stiffness = assemble_weighted_stiffness(mesh, &materials.dielectric)?;
        let mut fixed = vec![false; mesh.num_vertices()];
        for &(v, _) in &boundary.psi {
            fixed[v] = true;
        }
        // per vertex: (triangle, |K|/3)
        let mut lumped_area = vec![Vec::new(); mesh.num_vertices()];
        for (k, t) in mesh.triangles.iter().enumerate() {
            let third = mesh.element(k).area / 3.0;
            for &v in t {
                lumped_area[v].push((k, third));
            }
        }
        Ok(Self { mesh, phi, rho, params, stiffness, lumped_area, fixed })
    }

    fn inverse_averages(&self, psi: &[f64]) -> Result<[Vec<f64>; 2], PnpError> {
        let e = |i: usize| {
            elementwise_inverse_average(
                self.mesh,
                &exponent(self.phi, psi, self.params.valence(i), self.params.alpha0),
            )
        };
        Ok([e(0)?, e(1)?])
    }

    /// Residual on free rows (zero on Dirichlet rows) and the inverse
    /// averages it was evaluated with.
    fn residual(&self, psi: &[f64]) -> Result<(Vec<f64>, [Vec<f64>; 2]), PnpError> {
        let e = self.inverse_averages(psi)?;
        let mut r = self.stiffness.mul_vec(psi);
        for (v, rv) in r.iter_mut().enumerate() {
            if self.fixed[v] {
                *rv = 0.0;
                continue;
            }
            for &(k, third) in &self.lumped_area[v] {
                for i in 0..2 {
                    *rv -= third * self.params.valence(i) * e[i][k] * self.rho[i][v];
                }
            }
        }
        Ok((r, e))
    }

    /// Jacobian with the inverse averages frozen and the lumped source
    /// derivative on the diagonal.
    fn jacobian(&self, e: &[Vec<f64>; 2]) -> fem::SparseMatrix {
        let mut j = self.stiffness.clone();
        for v in 0..self.mesh.num_vertices() {
            if self.fixed[v] {
                continue;
            }
            let mut d = 0.0;
            for &(k, third) in &self.lumped_area[v] {
                for i in 0..2 {
                    let z = self.params.valence(i);
                    d += third * z * z * e[i][k] * self.rho[i][v];
                }
            }
            j.add(v, v, d);
        }
        j
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped quasi-Newton solve of the stabilized Poisson–Boltzmann-type
/// equation for ψ with the Slotboom variables held fixed.
pub fn solve_poisson_boltzmann(
    mesh: &TriangleMesh,
    phi: &[f64],
    rho: [&[f64]; 2],
    params: &PhysicalParams,
    tol: &SolverTolerances,
    psi_init: Option<&[f64]>,
) -> Result<PoissonBoltzmannSolution, PnpError> {
    check_len(mesh, phi)?;
    check_len(mesh, rho[0])?;
    check_len(mesh, rho[1])?;
    let boundary = BoundaryData::new(mesh, phi, params)?;
    let materials = ElementMaterials::new(mesh, phi, params);
    let op = PbOperator::new(mesh, phi, rho, params, &materials, &boundary)?;

    let mut psi = match psi_init {
        Some(p) => {
            check_len(mesh, p)?;
            p.to_vec()
        }
        None => vec![0.0; mesh.num_vertices()],
    };
    for &(v, g) in &boundary.psi {
        psi[v] = g;
    }

    let (mut r, mut e) = op.residual(&psi)?;
    let mut rnorm = norm2(&r);
    let mut history = vec![rnorm];
    let mut converged = rnorm <= tol.newton_tol;
    let mut iter = 0;
    while !converged && iter < tol.newton_max_iter {
        iter += 1;
        let jac = op.jacobian(&e);
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let sys = LinearSystem::new(jac, rhs).with_dirichlet(boundary.psi.iter().map(|&(v, _)| (v, 0.0)));
        let step = fem::solve_linear(&sys)?;

        let mut lambda = tol.newton_damping;
        let mut accepted = None;
        for _ in 0..=20 {
            let trial: Vec<f64> = psi.iter().zip(&step).map(|(p, s)| p + lambda * s).collect();
            match op.residual(&trial) {
                Ok((rt, et)) => {
                    let nt = norm2(&rt);
                    if nt < rnorm {
                        accepted = Some((trial, rt, et, nt));
                        break;
                    }
                }
                Err(PnpError::Fem(FemError::NonFinite(_))) => {}
                Err(err) => return Err(err),
            }
            lambda *= 0.5;
        }
        let Some((trial, rt, et, nt)) = accepted else {
            break;
        };
        psi = trial;
        r = rt;
        e = et;
        rnorm = nt;
        history.push(rnorm);
        converged = rnorm <= tol.newton_tol;
    }
    Ok(PoissonBoltzmannSolution { psi, residual_history: history, converged })
}

/// Outcome of a continuity solve.
#[derive(Debug, Clone)]
pub struct ContinuitySolution {
    pub rho: Vec<f64>,
    /// First vertex violating `0 ≤ ρ ≤ max boundary value`, if any.
    pub violation: Option<(usize, f64)>,
}

/// Relative slack on the discrete maximum principle check.
const MAX_PRINCIPLE_SLACK: f64 = 1e-12;

/// Linear stabilized continuity solve for species `species`.
pub fn solve_continuity(
    mesh: &TriangleMesh,
    phi: &[f64],
    psi: &[f64],
    params: &PhysicalParams,
    species: usize,
) -> Result<ContinuitySolution, PnpError> {
    check_len(mesh, phi)?;
    check_len(mesh, psi)?;
    let boundary = BoundaryData::new(mesh, phi, params)?;
    let materials = ElementMaterials::new(mesh, phi, params);
    continuity_with(mesh, phi, psi, params, species, &boundary, &materials)
}

fn continuity_with(
    mesh: &TriangleMesh,
    phi: &[f64],
    psi: &[f64],
    params: &PhysicalParams,
    species: usize,
    boundary: &BoundaryData,
    materials: &ElementMaterials,
) -> Result<ContinuitySolution, PnpError> {
    let e = elementwise_inverse_average(
        mesh,
        &exponent(phi, psi, params.valence(species), params.alpha0),
    )?;
    let coeff: Vec<f64> = e.iter().zip(&materials.diffusion).map(|(a, d)| a * d).collect();
    let a = assemble_weighted_stiffness(mesh, &coeff)?;
    let sys = LinearSystem::new(a, vec![0.0; mesh.num_vertices()])
        .with_dirichlet(boundary.rho[species].iter().copied());
    let rho = fem::solve_linear(&sys)?;

    let upper = boundary.max_rho(species);
    let slack = MAX_PRINCIPLE_SLACK * upper.max(f64::MIN_POSITIVE);
    let violation = rho
        .iter()
        .enumerate()
        .find(|&(_, &r)| r < -slack || r > upper + slack)
        .map(|(v, &r)| (v, r));
    if let Some((v, r)) = violation {
        warn!("species {species}: maximum principle violated at vertex {v} (rho = {r:e}, bound [0, {upper:e}])");
    }
    Ok(ContinuitySolution { rho, violation })
}

fn laplace_initial_guess(
    mesh: &TriangleMesh,
    materials: &ElementMaterials,
    boundary: &BoundaryData,
) -> Result<Vec<f64>, PnpError> {
    let a = assemble_weighted_stiffness(mesh, &materials.dielectric)?;
    let sys = LinearSystem::new(a, vec![0.0; mesh.num_vertices()]).with_dirichlet(boundary.psi.iter().copied());
    Ok(fem::solve_linear(&sys)?)
}

/// Concentrations from Slotboom variables at every vertex.
pub fn recover_concentrations(
    phi: &[f64],
    psi: &[f64],
    rho: &[Vec<f64>; 2],
    params: &PhysicalParams,
) -> Result<[Vec<f64>; 2], PnpError> {
    let species = |i: usize| -> Result<Vec<f64>, PnpError> {
        (0..phi.len())
            .map(|v| {
                slotboom_inverse(rho[i][v], psi[v], phi[v], params.valence(i), params.alpha0).map_err(
                    |e| match e {
                        PnpError::Overflow { value, .. } => PnpError::Overflow { vertex: v, value },
                        other => other,
                    },
                )
            })
            .collect()
    };
    Ok([species(0)?, species(1)?])
}

/// Gummel iteration: alternate continuity solves for both species with a
/// Poisson–Boltzmann solve until ψ stops changing.
pub fn gummel_solve(
    mesh: &TriangleMesh,
    phi: &[f64],
    params: &PhysicalParams,
    tol: &SolverTolerances,
    warm_start: Option<&StateSolution>,
) -> Result<StateSolution, PnpError> {
    params.validate()?;
    tol.validate()?;
    check_len(mesh, phi)?;
    let boundary = BoundaryData::new(mesh, phi, params)?;
    let materials = ElementMaterials::new(mesh, phi, params);

    let mut psi = match warm_start {
        Some(s) => {
            check_len(mesh, &s.psi)?;
            let mut p = s.psi.clone();
            for &(v, g) in &boundary.psi {
                p[v] = g;
            }
            p
        }
        None => laplace_initial_guess(mesh, &materials, &boundary)?,
    };

    let mut changes = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let mut rho = [Vec::new(), Vec::new()];
    while sweeps < tol.gummel_max_iter {
        sweeps += 1;
        for (i, r) in rho.iter_mut().enumerate() {
            *r = continuity_with(mesh, phi, &psi, params, i, &boundary, &materials)?.rho;
        }
        let pb = solve_poisson_boltzmann(mesh, phi, [&rho[0], &rho[1]], params, tol, Some(&psi))?;
        let change = pb
            .psi
            .iter()
            .zip(&psi)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        psi = pb.psi;
        changes.push(change);
        if change <= tol.gummel_tol {
            converged = true;
            break;
        }
    }
    for (i, r) in rho.iter_mut().enumerate() {
        *r = continuity_with(mesh, phi, &psi, params, i, &boundary, &materials)?.rho;
    }
    let c = recover_concentrations(phi, &psi, &rho, params)?;
    let residual = discrete::StateResidual::new(mesh, phi, params)?.norm(&psi, &rho)?;
    let state = StateSolution {
        psi,
        rho,
        c,
        gummel_iterations: sweeps,
        converged,
        residual,
        psi_changes: changes,
    };
    for msg in linf_bound_violations(&state, &boundary) {
        warn!("{msg}");
    }
    Ok(state)
}

/// Checks `0 ≤ ρᵢ ≤ max ρᵢ^∞` and the a-priori window for ψ built from the
/// boundary data. Returns one message per violated bound.
pub fn linf_bound_violations(state: &StateSolution, boundary: &BoundaryData) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..2 {
        let upper = boundary.max_rho(i);
        let slack = 1e-10 * upper.max(1.0);
        let (lo, hi) = state.rho[i]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
        if lo < -slack || hi > upper + slack {
            out.push(format!("rho_{} outside [0, {upper:e}]: range [{lo:e}, {hi:e}]", i + 1));
        }
    }
    let u_bar = boundary
        .rho
        .iter()
        .flatten()
        .filter(|&&(_, r)| r > 0.0)
        .fold(0.0f64, |m, &(_, r)| m.max(r.ln().abs()));
    let (g_min, g_max) = boundary
        .psi
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, g)| (a.min(g), b.max(g)));
    let (lo, hi) = (g_min.min(-u_bar), g_max.max(u_bar));
    let slack = 1e-10 * (1.0 + lo.abs().max(hi.abs()));
    if state.psi.iter().any(|&p| p < lo - slack || p > hi + slack) {
        out.push(format!("psi outside a-priori window [{lo}, {hi}]"));
    }
    out
}

/// Net charge objective `−∫ Σ zᵢ cᵢ dx`, exact for P1 fields.
pub fn objective(mesh: &TriangleMesh, c: [&[f64]; 2], params: &PhysicalParams) -> f64 {
    let m = lumped_mass(mesh);
    let mut j = 0.0;
    for (v, mv) in m.iter().enumerate() {
        j -= mv * (params.valence(0) * c[0][v] + params.valence(1) * c[1][v]);
    }
    j
}

/// Ginzburg–Landau energy `∫ κ/2 |∇φ|² + ω(φ)/κ`, gradient part exact and
/// double well by vertex quadrature.
pub fn ginzburg_landau(mesh: &TriangleMesh, phi: &[f64], kappa: f64) -> f64 {
    let m = lumped_mass(mesh);
    let mut grad = 0.0;
    for k in 0..mesh.num_triangles() {
        let e = mesh.element(k);
        let g = e.gradient(mesh.gather(k, phi));
        grad += e.area * (g[0] * g[0] + g[1] * g[1]);
    }
    let well: f64 = m.iter().zip(phi).map(|(mv, &f)| mv * double_well(f)).sum();
    0.5 * kappa * grad + well / kappa
}

/// `(W, Ŵ)`: total energy and its volume-penalized version.
pub fn total_energy(
    mesh: &TriangleMesh,
    phi: &[f64],
    c: [&[f64]; 2],
    physical: &PhysicalParams,
    optim: &OptimParams,
) -> (f64, f64) {
    let w = ginzburg_landau(mesh, phi, optim.kappa) + objective(mesh, c, physical);
    let dv = volume(mesh, phi) - optim.v_target;
    (w, w + 0.5 * optim.beta * dv * dv)
}
