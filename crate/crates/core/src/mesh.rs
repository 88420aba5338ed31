//! Structured triangle meshes for the rectangular and annular design domains.
//!
//! Every mesh carries tagged boundary edges. The reservoir boundary
//! (`GammaIn`) and the electrode boundary (`GammaTwo`) receive Dirichlet data;
//! `GammaOne` is the insulating (natural) part and may be empty.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh dimensions: {0}")]
    InvalidDimensions(String),
    #[error("triangle {index} is inverted or degenerate (signed area {area:e})")]
    InvertedElement { index: usize, area: f64 },
    #[error("boundary edge ({0}, {1}) carries no tag")]
    UntaggedBoundaryEdge(usize, usize),
    #[error("tagged edge ({0}, {1}) is not on the mesh boundary")]
    TaggedInteriorEdge(usize, usize),
    #[error("triangle {index} references vertex {vertex} out of range")]
    VertexOutOfRange { index: usize, vertex: usize },
}

/// Boundary part a mesh edge belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    /// Ionic reservoir, Dirichlet.
    GammaIn,
    /// Insulating wall, natural boundary condition.
    GammaOne,
    /// Electrode contact, Dirichlet.
    GammaTwo,
}

impl BoundaryTag {
    pub fn is_dirichlet(self) -> bool {
        !matches!(self, BoundaryTag::GammaOne)
    }

    // Lower value wins when a vertex touches edges with different tags.
    fn priority(self) -> u8 {
        match self {
            BoundaryTag::GammaIn => 0,
            BoundaryTag::GammaTwo => 1,
            BoundaryTag::GammaOne => 2,
        }
    }
}

/// Per-vertex classification derived from the tagged boundary edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexTag {
    Interior,
    Boundary(BoundaryTag),
}

impl VertexTag {
    pub fn is_dirichlet(self) -> bool {
        matches!(self, VertexTag::Boundary(t) if t.is_dirichlet())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

/// Which side of the rectangle receives which tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectangleTags {
    pub left: BoundaryTag,
    pub right: BoundaryTag,
    pub bottom: BoundaryTag,
    pub top: BoundaryTag,
}

impl Default for RectangleTags {
    fn default() -> Self {
        Self {
            left: BoundaryTag::GammaIn,
            right: BoundaryTag::GammaTwo,
            bottom: BoundaryTag::GammaOne,
            top: BoundaryTag::GammaOne,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 2]>,
    /// Counterclockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub vertex_tags: Vec<VertexTag>,
}

/// Precomputed P1 data of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub area: f64,
    /// Gradients of the three barycentric basis functions.
    pub grads: [[f64; 2]; 3],
}

impl ElementGeometry {
    /// `∫_K ∇λ_a · ∇λ_b dx`.
    pub fn stiffness(&self) -> [[f64; 3]; 3] {
        let mut k = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                k[a][b] = self.area * dot(self.grads[a], self.grads[b]);
            }
        }
        k
    }

    /// Gradient of the P1 interpolant with the given vertex values.
    pub fn gradient(&self, values: [f64; 3]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for a in 0..3 {
            g[0] += values[a] * self.grads[a][0];
            g[1] += values[a] * self.grads[a][1];
        }
        g
    }
}

#[inline]
pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn signed_area(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> f64 {
    0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
}

impl TriangleMesh {
    /// Builds a mesh and derives the per-vertex tags. Dirichlet tags win at
    /// corners; between the two Dirichlet parts `GammaIn` wins.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Self {
        let mut vertex_tags = vec![VertexTag::Interior; vertices.len()];
        for edge in &boundary_edges {
            for &v in &edge.vertices {
                vertex_tags[v] = match vertex_tags[v] {
                    VertexTag::Boundary(t) if t.priority() <= edge.tag.priority() => {
                        VertexTag::Boundary(t)
                    }
                    _ => VertexTag::Boundary(edge.tag),
                };
            }
        }
        Self {
            vertices,
            triangles,
            boundary_edges,
            vertex_tags,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn element(&self, k: usize) -> ElementGeometry {
        let [i0, i1, i2] = self.triangles[k];
        let (p0, p1, p2) = (self.vertices[i0], self.vertices[i1], self.vertices[i2]);
        let area = signed_area(p0, p1, p2);
        let inv = 1.0 / (2.0 * area);
        // ∇λ_a = rot(p_{a+2} - p_{a+1}) / 2|K|
        let g = |pa: [f64; 2], pb: [f64; 2]| [(pa[1] - pb[1]) * inv, (pb[0] - pa[0]) * inv];
        ElementGeometry {
            area,
            grads: [g(p1, p2), g(p2, p0), g(p0, p1)],
        }
    }

    pub fn elements(&self) -> Vec<ElementGeometry> {
        (0..self.num_triangles()).map(|k| self.element(k)).collect()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|k| self.element(k).area).sum()
    }

    /// Vertices with a Dirichlet tag, in index order.
    pub fn dirichlet_vertices(&self) -> Vec<usize> {
        (0..self.num_vertices())
            .filter(|&v| self.vertex_tags[v].is_dirichlet())
            .collect()
    }

    pub fn vertices_tagged(&self, tag: BoundaryTag) -> Vec<usize> {
        (0..self.num_vertices())
            .filter(|&v| self.vertex_tags[v] == VertexTag::Boundary(tag))
            .collect()
    }

    /// Values of the three vertices of triangle `k`.
    #[inline]
    pub fn gather(&self, k: usize, field: &[f64]) -> [f64; 3] {
        let t = self.triangles[k];
        [field[t[0]], field[t[1]], field[t[2]]]
    }

    /// Mean of the vertex values on each triangle.
    pub fn centroid_values(&self, field: &[f64]) -> Vec<f64> {
        (0..self.num_triangles())
            .map(|k| {
                let v = self.gather(k, field);
                (v[0] + v[1] + v[2]) / 3.0
            })
            .collect()
    }

    /// Sorted vertex adjacency including the vertex itself.
    pub fn vertex_neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj: Vec<Vec<usize>> = (0..self.num_vertices()).map(|v| vec![v]).collect();
        for t in &self.triangles {
            for &a in t {
                for &b in t {
                    adj[a].push(b);
                }
            }
        }
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
        }
        adj
    }

    /// Edges used by exactly one triangle.
    fn topological_boundary(&self) -> Vec<[usize; 2]> {
        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        let mut edges: Vec<[usize; 2]> = count
            .into_iter()
            .filter(|&(_, c)| c == 1)
            .map(|(e, _)| e)
            .collect();
        edges.sort_unstable();
        edges
    }
}

/// Quality figures of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDiagnostics {
    pub min_area: f64,
    pub max_angle: f64,
    /// Largest element diameter.
    pub h: f64,
    pub is_nonobtuse: bool,
    pub obtuse_elements: Vec<usize>,
    pub tag_edge_counts: BTreeMap<BoundaryTag, usize>,
}

// Angles within this of π/2 count as right angles.
const RIGHT_ANGLE_SLACK: f64 = 1e-12;

pub fn validate_mesh(mesh: &TriangleMesh) -> Result<MeshDiagnostics, MeshError> {
    let n = mesh.num_vertices();
    let mut min_area = f64::INFINITY;
    let mut max_angle: f64 = 0.0;
    let mut h: f64 = 0.0;
    let mut obtuse_elements = Vec::new();
    for (k, t) in mesh.triangles.iter().enumerate() {
        if let Some(&v) = t.iter().find(|&&v| v >= n) {
            return Err(MeshError::VertexOutOfRange { index: k, vertex: v });
        }
        let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
        let area = signed_area(p[0], p[1], p[2]);
        if !(area > 0.0) {
            return Err(MeshError::InvertedElement { index: k, area });
        }
        min_area = min_area.min(area);
        let mut elem_max: f64 = 0.0;
        for a in 0..3 {
            let u = sub(p[(a + 1) % 3], p[a]);
            let w = sub(p[(a + 2) % 3], p[a]);
            let cos = dot(u, w) / (norm(u) * norm(w));
            elem_max = elem_max.max(cos.clamp(-1.0, 1.0).acos());
            h = h.max(norm(u));
        }
        max_angle = max_angle.max(elem_max);
        if elem_max > 0.5 * PI + RIGHT_ANGLE_SLACK {
            obtuse_elements.push(k);
        }
    }

    let mut tagged: HashMap<[usize; 2], BoundaryTag> = HashMap::new();
    let mut tag_edge_counts = BTreeMap::new();
    for e in &mesh.boundary_edges {
        let [a, b] = e.vertices;
        tagged.insert([a.min(b), a.max(b)], e.tag);
        *tag_edge_counts.entry(e.tag).or_insert(0) += 1;
    }
    let boundary = mesh.topological_boundary();
    for e in &boundary {
        if !tagged.contains_key(e) {
            return Err(MeshError::UntaggedBoundaryEdge(e[0], e[1]));
        }
    }
    if tagged.len() != boundary.len() {
        let on_boundary: std::collections::HashSet<_> = boundary.iter().copied().collect();
        let mut extra: Vec<_> = tagged.keys().filter(|e| !on_boundary.contains(*e)).collect();
        extra.sort_unstable();
        if let Some(e) = extra.first() {
            return Err(MeshError::TaggedInteriorEdge(e[0], e[1]));
        }
    }

    Ok(MeshDiagnostics {
        min_area,
        max_angle,
        h,
        is_nonobtuse: obtuse_elements.is_empty(),
        obtuse_elements,
        tag_edge_counts,
    })
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Structured grid on `(0, width) × (0, height)`, every cell cut along its
/// lower-left to upper-right diagonal.
pub fn generate_rectangle_mesh(
    nx: usize,
    ny: usize,
    width: f64,
    height: f64,
) -> Result<TriangleMesh, MeshError> {
    generate_rectangle_mesh_tagged(nx, ny, width, height, RectangleTags::default())
}

pub fn generate_rectangle_mesh_tagged(
    nx: usize,
    ny: usize,
    width: f64,
    height: f64,
    tags: RectangleTags,
) -> Result<TriangleMesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidDimensions(format!(
            "cell counts must be positive, got {nx}x{ny}"
        )));
    }
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(MeshError::InvalidDimensions(format!(
            "width and height must be positive, got {width} x {height}"
        )));
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([
                width * i as f64 / nx as f64,
                height * j as f64 / ny as f64,
            ]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    // Counterclockwise walk: bottom, right, top, left.
    let mut edges = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        edges.push(BoundaryEdge { vertices: [idx(i, 0), idx(i + 1, 0)], tag: tags.bottom });
    }
    for j in 0..ny {
        edges.push(BoundaryEdge { vertices: [idx(nx, j), idx(nx, j + 1)], tag: tags.right });
    }
    for i in (0..nx).rev() {
        edges.push(BoundaryEdge { vertices: [idx(i + 1, ny), idx(i, ny)], tag: tags.top });
    }
    for j in (0..ny).rev() {
        edges.push(BoundaryEdge { vertices: [idx(0, j + 1), idx(0, j)], tag: tags.left });
    }
    Ok(TriangleMesh::new(vertices, triangles, edges))
}

/// Polar mesh of the annulus `r_inner < |x| < r_outer` centred at the origin.
///
/// Odd rings are rotated by half a sector and each cell is cut along its short
/// diagonal, so that every triangle is acute for reasonable aspect ratios.
/// Inner circle is `GammaIn`, outer circle is `GammaTwo`.
pub fn generate_annulus_mesh(
    nr: usize,
    ntheta: usize,
    r_inner: f64,
    r_outer: f64,
) -> Result<TriangleMesh, MeshError> {
    if nr == 0 || ntheta < 3 {
        return Err(MeshError::InvalidDimensions(format!(
            "need nr >= 1 and ntheta >= 3, got nr = {nr}, ntheta = {ntheta}"
        )));
    }
    if !(r_inner > 0.0 && r_outer > r_inner && r_outer.is_finite()) {
        return Err(MeshError::InvalidDimensions(format!(
            "need 0 < r_inner < r_outer, got r_inner = {r_inner}, r_outer = {r_outer}"
        )));
    }
    let dtheta = 2.0 * PI / ntheta as f64;
    let idx = |k: usize, l: usize| k * ntheta + (l % ntheta);
    let mut vertices = Vec::with_capacity((nr + 1) * ntheta);
    for k in 0..=nr {
        let r = r_inner + (r_outer - r_inner) * k as f64 / nr as f64;
        let offset = if k % 2 == 1 { 0.5 * dtheta } else { 0.0 };
        for l in 0..ntheta {
            let theta = offset + dtheta * l as f64;
            vertices.push([r * theta.cos(), r * theta.sin()]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nr * ntheta);
    for k in 0..nr {
        for l in 0..ntheta {
            let (a, b, c, d) = (idx(k, l), idx(k, l + 1), idx(k + 1, l + 1), idx(k + 1, l));
            if k % 2 == 0 {
                // outer ring leads by half a sector: cut along b-d
                triangles.push([a, d, b]);
                triangles.push([b, d, c]);
            } else {
                triangles.push([a, d, c]);
                triangles.push([a, c, b]);
            }
        }
    }
    let mut edges = Vec::with_capacity(2 * ntheta);
    // Outer loop counterclockwise, inner loop clockwise.
    for l in 0..ntheta {
        edges.push(BoundaryEdge { vertices: [idx(nr, l), idx(nr, l + 1)], tag: BoundaryTag::GammaTwo });
    }
    for l in (0..ntheta).rev() {
        edges.push(BoundaryEdge { vertices: [idx(0, l + 1), idx(0, l)], tag: BoundaryTag::GammaIn });
    }
    Ok(TriangleMesh::new(vertices, triangles, edges))
}
