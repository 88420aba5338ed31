//! Elementwise inverse averages of exponential coefficients.
//!
//! For a linear function `u` on a triangle `K`,
//! `(1/|K|) ∫_K exp(-u) dx = 2 · exp[-u₀, -u₁, -u₂]`, the second divided
//! difference of `exp` at the negated vertex values. Derivatives with respect
//! to a vertex value are divided differences with that node repeated, which
//! the exact discrete adjoint relies on.

use super::FemError;
use crate::mesh::TriangleMesh;

/// Sub-tables whose node spread is below this are summed as a series.
const SERIES_SPREAD: f64 = 0.5;
const SERIES_TERMS: usize = 40;

/// Divided difference `exp[x_0, …, x_m]` of nodes already shifted so that
/// `max x = 0`. Up to five nodes; repeated nodes are allowed.
fn shifted_divided_difference(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    debug_assert!((1..=5).contains(&m));
    // table[i][j] holds exp[x_i..=x_j]
    let mut table = [[0.0f64; 5]; 5];
    for len in 1..=m {
        for i in 0..=m - len {
            let j = i + len - 1;
            let spread = sorted[j] - sorted[i];
            table[i][j] = if spread < SERIES_SPREAD {
                series(&sorted[i..=j])
            } else {
                (table[i + 1][j] - table[i][j - 1]) / spread
            };
        }
    }
    table[0][m - 1]
}

/// `exp[x_0..x_n] = e^{x_0} Σ_k h_k(x - x_0) / (n + k)!` with `h_k` the
/// complete homogeneous symmetric polynomials; nodes sorted ascending so all
/// terms are nonnegative.
fn series(nodes: &[f64]) -> f64 {
    let base = nodes[0];
    let n = nodes.len() - 1;
    let mut t = [0.0f64; 5];
    for (tj, x) in t.iter_mut().zip(nodes) {
        *tj = x - base;
    }
    // col[j] = h_k(t_0..=t_j), advanced one degree k at a time
    let mut col = [1.0f64; 5];
    let mut fact = (1..=n).fold(1.0, |f, i| f * i as f64);
    let mut sum = 1.0 / fact;
    for k in 1..SERIES_TERMS {
        let mut prev = 0.0;
        for j in 0..=n {
            col[j] = prev + t[j] * col[j];
            prev = col[j];
        }
        fact *= (n + k) as f64;
        let term = col[n] / fact;
        sum += term;
        if term <= 1e-17 * sum {
            break;
        }
    }
    base.exp() * sum
}

/// Divided difference `exp[x_0, …, x_m]` returned as `(e^s, d)` with the
/// value equal to `e^s · d`, which avoids overflow for large nodes.
pub fn exp_divided_difference(nodes: &[f64]) -> (f64, f64) {
    let mut sorted: Vec<f64> = nodes.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let shift = *sorted.last().unwrap();
    for x in &mut sorted {
        *x -= shift;
    }
    (shift, shifted_divided_difference(&sorted))
}

/// Inverse average `E_K = ((1/|K|) ∫_K exp(-u) dx)^{-1}` for vertex values
/// `u` of a linear function.
pub fn inverse_average(u: [f64; 3]) -> f64 {
    let (shift, d) = exp_divided_difference(&[-u[0], -u[1], -u[2]]);
    (-shift).exp() / (2.0 * d)
}

/// `E_K` together with `∂E_K/∂u_j` for the three vertices.
pub fn inverse_average_with_gradient(u: [f64; 3]) -> (f64, [f64; 3]) {
    let x = [-u[0], -u[1], -u[2]];
    let (shift, d) = exp_divided_difference(&x);
    let scale = (-shift).exp();
    let e = scale / (2.0 * d);
    let mut grad = [0.0; 3];
    for j in 0..3 {
        let (s4, d4) = exp_divided_difference(&[x[0], x[1], x[2], x[j]]);
        // both tables share the same maximum node, hence the same shift
        debug_assert_eq!(s4, shift);
        grad[j] = scale * d4 / (2.0 * d * d);
    }
    (e, grad)
}

/// `E_K` for every triangle, given the exponent `u = α₀φ − zψ` at the
/// vertices.
pub fn elementwise_inverse_average(
    mesh: &TriangleMesh,
    exponent: &[f64],
) -> Result<Vec<f64>, FemError> {
    if exponent.len() != mesh.num_vertices() {
        return Err(FemError::DimensionMismatch {
            expected: mesh.num_vertices(),
            found: exponent.len(),
        });
    }
    (0..mesh.num_triangles())
        .map(|k| {
            let u = mesh.gather(k, exponent);
            let e = inverse_average(u);
            if e.is_finite() && e > 0.0 {
                Ok(e)
            } else {
                Err(FemError::NonFinite(format!(
                    "inverse average overflow on triangle {k} (exponents {u:?})"
                )))
            }
        })
        .collect()
}
