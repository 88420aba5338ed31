//! Piecewise-linear finite-element assembly, Dirichlet elimination and
//! direct solves.

pub mod inverse_average;
pub mod solve;
pub mod sparse;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mesh::TriangleMesh;

pub use inverse_average::elementwise_inverse_average;
pub use solve::LuFactorization;
pub use sparse::SparseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("conflicting Dirichlet values at unknown {index}: {first} vs {second}")]
    ConflictingDirichlet { index: usize, first: f64, second: f64 },
    #[error("Dirichlet index {0} out of range")]
    DirichletOutOfRange(usize),
    #[error("singular matrix: pivot {value:e} at unknown {pivot} (matrix scale {scale:e})")]
    SingularMatrix { pivot: usize, value: f64, scale: f64 },
    #[error("sparsity patterns differ")]
    PatternMismatch,
    #[error("{0}")]
    NonFinite(String),
}

/// One value per triangle.
pub type ElementCoefficient = Vec<f64>;

/// Sparse matrix with the vertex-adjacency pattern of the mesh.
pub fn mesh_matrix(mesh: &TriangleMesh) -> SparseMatrix {
    SparseMatrix::from_pattern(&mesh.vertex_neighbours())
}

/// `A_ab = Σ_K coeff_K ∫_K ∇λ_a·∇λ_b dx`, accumulated in triangle order.
pub fn assemble_weighted_stiffness(
    mesh: &TriangleMesh,
    coeff: &[f64],
) -> Result<SparseMatrix, FemError> {
    if coeff.len() != mesh.num_triangles() {
        return Err(FemError::DimensionMismatch {
            expected: mesh.num_triangles(),
            found: coeff.len(),
        });
    }
    let mut a = mesh_matrix(mesh);
    for (k, t) in mesh.triangles.iter().enumerate() {
        let local = mesh.element(k).stiffness();
        for i in 0..3 {
            for j in 0..3 {
                a.add(t[i], t[j], coeff[k] * local[i][j]);
            }
        }
    }
    Ok(a)
}

/// Consistent P1 mass matrix.
pub fn assemble_mass(mesh: &TriangleMesh) -> SparseMatrix {
    let mut m = mesh_matrix(mesh);
    for (k, t) in mesh.triangles.iter().enumerate() {
        let area = mesh.element(k).area;
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { 2.0 } else { 1.0 };
                m.add(t[i], t[j], area * w / 12.0);
            }
        }
    }
    m
}

/// `∫ λ_a dx` for every vertex (row sums of the mass matrix).
pub fn lumped_mass(mesh: &TriangleMesh) -> Vec<f64> {
    let mut m = vec![0.0; mesh.num_vertices()];
    for (k, t) in mesh.triangles.iter().enumerate() {
        let third = mesh.element(k).area / 3.0;
        for &v in t {
            m[v] += third;
        }
    }
    m
}

/// `b_a = ∫ ρ_h λ_a dx` for the P1 interpolant of `density`.
pub fn assemble_load(mesh: &TriangleMesh, density: &[f64]) -> Result<Vec<f64>, FemError> {
    if density.len() != mesh.num_vertices() {
        return Err(FemError::DimensionMismatch {
            expected: mesh.num_vertices(),
            found: density.len(),
        });
    }
    Ok(assemble_mass(mesh).mul_vec(density))
}

/// Exact integral of a P1 field.
pub fn integrate(mesh: &TriangleMesh, field: &[f64]) -> f64 {
    lumped_mass(mesh).iter().zip(field).map(|(m, f)| m * f).sum()
}

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    /// Dirichlet pairs `(unknown, value)`.
    pub constrained: Vec<(usize, f64)>,
}

impl LinearSystem {
    pub fn new(matrix: SparseMatrix, rhs: Vec<f64>) -> Self {
        Self { matrix, rhs, constrained: Vec::new() }
    }

    pub fn with_dirichlet(mut self, pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        self.constrained.extend(pairs);
        self
    }
}

fn collect_constraints(
    n: usize,
    pairs: &[(usize, f64)],
) -> Result<BTreeMap<usize, f64>, FemError> {
    let mut map = BTreeMap::new();
    for &(i, v) in pairs {
        if i >= n {
            return Err(FemError::DirichletOutOfRange(i));
        }
        if let Some(&old) = map.get(&i) {
            if old != v {
                return Err(FemError::ConflictingDirichlet { index: i, first: old, second: v });
            }
        }
        map.insert(i, v);
    }
    Ok(map)
}

/// Symmetric elimination: constrained columns move to the right-hand side,
/// constrained rows become identity rows holding the boundary value.
pub fn apply_dirichlet(system: &LinearSystem) -> Result<LinearSystem, FemError> {
    let n = system.matrix.dim();
    if system.rhs.len() != n {
        return Err(FemError::DimensionMismatch { expected: n, found: system.rhs.len() });
    }
    let fixed = collect_constraints(n, &system.constrained)?;
    let mut a = system.matrix.clone();
    let mut rhs = system.rhs.clone();
    for i in 0..n {
        if let Some(&g) = fixed.get(&i) {
            let (cols, vals) = a.row_mut(i);
            for (c, v) in cols.iter().zip(vals.iter_mut()) {
                *v = if *c == i { 1.0 } else { 0.0 };
            }
            rhs[i] = g;
        } else {
            let (cols, vals) = a.row_mut(i);
            for (c, v) in cols.iter().zip(vals.iter_mut()) {
                if let Some(&g) = fixed.get(c) {
                    rhs[i] -= *v * g;
                    *v = 0.0;
                }
            }
        }
    }
    Ok(LinearSystem {
        matrix: a,
        rhs,
        constrained: fixed.into_iter().collect(),
    })
}

/// Solves a system, applying its Dirichlet constraints first.
pub fn solve_linear(system: &LinearSystem) -> Result<Vec<f64>, FemError> {
    let reduced = if system.constrained.is_empty() {
        system.clone()
    } else {
        apply_dirichlet(system)?
    };
    let lu = LuFactorization::new(&reduced.matrix)?;
    lu.solve(&reduced.rhs)
}

/// Relative residual `‖Ax − b‖₂ / ‖b‖₂` (absolute when `b = 0`).
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}
