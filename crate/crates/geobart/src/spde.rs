//! Finite-element approximation of the Matern field: structured triangular
//! mesh, mass/stiffness matrices, the sparse precision matrix, and the
//! barycentric projection from mesh vertices to observation locations.
//!
//! The construction uses the α = 2 stochastic PDE in two dimensions, which
//! corresponds to Matern smoothness ν = 1, with the lumped (diagonal) mass
//! matrix so that the precision stays sparse.

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};
use crate::gp::MaternParams;
use crate::sparse::SparseMatrix;

/// Mesh resolution settings: target edge length and the fraction of the
/// data bounding box added as margin on every side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub edge: f64,
    pub extension: f64,
}

impl MeshConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge > 0.0 && self.edge.is_finite()) || !(self.extension >= 0.0) {
            return Err(Error::InvalidConfig(format!("mesh config {self:?}")));
        }
        Ok(())
    }
}

/// Structured triangular mesh over a rectangle: a regular vertex grid with
/// every cell split into two triangles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    nx: usize,
    ny: usize,
    x0: f64,
    y0: f64,
    hx: f64,
    hy: f64,
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Grid spacing (hx, hy).
    pub fn spacing(&self) -> (f64, f64) {
        (self.hx, self.hy)
    }

    /// Vertex closest to the centroid of the meshed rectangle.
    pub fn central_vertex(&self) -> usize {
        (self.ny / 2) * self.nx + self.nx / 2
    }
}

/// Builds a structured mesh covering the bounding box of `points`, extended
/// by `cfg.extension` times the box width/height on each side, with edge
/// length at most `cfg.edge` in each direction. Degenerate boxes (all
/// points collinear) are padded to one edge length.
pub fn build_mesh(points: &[Point], cfg: &MeshConfig) -> Result<Mesh> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyInput("mesh over no points".into()));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let pad = |lo: f64, hi: f64| -> (f64, f64) {
        let w = hi - lo;
        let (mut lo, mut hi) = (lo - cfg.extension * w, hi + cfg.extension * w);
        if hi - lo < cfg.edge {
            let mid = 0.5 * (lo + hi);
            lo = mid - 0.5 * cfg.edge;
            hi = mid + 0.5 * cfg.edge;
        }
        (lo, hi)
    };
    let (x0, x1) = pad(xmin, xmax);
    let (y0, y1) = pad(ymin, ymax);
    let cells_x = ((x1 - x0) / cfg.edge).ceil().max(1.0) as usize;
    let cells_y = ((y1 - y0) / cfg.edge).ceil().max(1.0) as usize;
    let nx = cells_x + 1;
    let ny = cells_y + 1;
    let hx = (x1 - x0) / cells_x as f64;
    let hy = (y1 - y0) / cells_y as f64;
    let mut vertices = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            vertices.push(Point::new(x0 + ix as f64 * hx, y0 + iy as f64 * hy));
        }
    }
    let mut triangles = Vec::with_capacity(2 * cells_x * cells_y);
    for iy in 0..cells_y {
        for ix in 0..cells_x {
            let v00 = iy * nx + ix;
            let v10 = v00 + 1;
            let v01 = v00 + nx;
            let v11 = v01 + 1;
            triangles.push([v00, v10, v01]);
            triangles.push([v10, v11, v01]);
        }
    }
    Ok(Mesh { vertices, triangles, nx, ny, x0, y0, hx, hy })
}

/// Assembles the lumped mass matrix C (diagonal, one third of the adjacent
/// triangle areas per vertex) and the stiffness matrix G over a mesh.
pub fn fem_matrices(mesh: &Mesh) -> Result<(SparseMatrix, SparseMatrix)> {
    let n = mesh.n_vertices();
    let mut c_diag = vec![0.0; n];
    let mut g_triplets = Vec::with_capacity(mesh.n_triangles() * 9);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let [a, b, c] = *tri;
        let (pa, pb, pc) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
        let area = 0.5 * ((pb.x - pa.x) * (pc.y - pa.y) - (pc.x - pa.x) * (pb.y - pa.y));
        if area.abs() < 1e-14 {
            return Err(Error::DegenerateTriangle(t));
        }
        let area = area.abs();
        for &v in tri {
            c_diag[v] += area / 3.0;
        }
        // Edge vector opposite each vertex, cyclic so e0 + e1 + e2 = 0;
        // the element stiffness is e_i . e_j / (4 area).
        let e = [
            (pc.x - pb.x, pc.y - pb.y),
            (pa.x - pc.x, pa.y - pc.y),
            (pb.x - pa.x, pb.y - pa.y),
        ];
        for i in 0..3 {
            for j in 0..3 {
                let dot = e[i].0 * e[j].0 + e[i].1 * e[j].1;
                g_triplets.push((tri[i], tri[j], dot / (4.0 * area)));
            }
        }
    }
    let c = SparseMatrix::from_diagonal(&c_diag);
    let g = SparseMatrix::from_triplets(n, n, &g_triplets)?;
    Ok((c, g))
}

/// Sparse precision matrix of the mesh-vertex field for Matern parameters
/// with ν = 1: Q = τ² (κ²C + G) C⁻¹ (κ²C + G), τ² = 1 / (4π κ² σ_m²).
pub fn precision_matrix(
    c: &SparseMatrix,
    g: &SparseMatrix,
    params: &MaternParams,
) -> Result<SparseMatrix> {
    params.validate()?;
    if (params.nu - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "sparse precision requires smoothness 1, got {}",
            params.nu
        )));
    }
    if params.sigma_m2 <= 0.0 {
        return Err(Error::InvalidConfig(
            "sparse precision requires positive field variance".into(),
        ));
    }
    let kappa = params.kappa();
    let tau2 = 1.0 / (4.0 * std::f64::consts::PI * kappa * kappa * params.sigma_m2);
    let k = g.add_scaled(kappa * kappa, c)?;
    let cinv: Vec<f64> = c.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut cinv_k = k.clone();
    cinv_k.scale_rows(&cinv);
    let mut q = k.matmul(&cinv_k)?;
    q.scale(tau2);
    Ok(q)
}

/// Barycentric projection matrix: each row maps mesh-vertex values to one
/// location by interpolation inside its containing triangle. Rows have at
/// most three entries, are nonnegative, and sum to one. Locations outside
/// the meshed rectangle are an error.
pub fn projection_matrix(mesh: &Mesh, points: &[Point]) -> Result<SparseMatrix> {
    let mut triplets = Vec::with_capacity(points.len() * 3);
    let cells_x = mesh.nx - 1;
    let cells_y = mesh.ny - 1;
    let tol = 1e-9 * (mesh.hx * cells_x as f64).max(mesh.hy * cells_y as f64).max(1.0);
    for (row, p) in points.iter().enumerate() {
        let u = (p.x - mesh.x0) / mesh.hx;
        let v = (p.y - mesh.y0) / mesh.hy;
        if u < -tol || v < -tol || u > cells_x as f64 + tol || v > cells_y as f64 + tol {
            return Err(Error::LocationOutsideMesh { x: p.x, y: p.y });
        }
        let cx = (u.floor() as isize).clamp(0, cells_x as isize - 1) as usize;
        let cy = (v.floor() as isize).clamp(0, cells_y as isize - 1) as usize;
        let lu = (u - cx as f64).clamp(0.0, 1.0);
        let lv = (v - cy as f64).clamp(0.0, 1.0);
        let v00 = cy * mesh.nx + cx;
        let v10 = v00 + 1;
        let v01 = v00 + mesh.nx;
        let v11 = v01 + 1;
        let weights: [(usize, f64); 3] = if lu + lv <= 1.0 {
            [(v00, 1.0 - lu - lv), (v10, lu), (v01, lv)]
        } else {
            [(v10, 1.0 - lv), (v11, lu + lv - 1.0), (v01, 1.0 - lu)]
        };
        for (col, w) in weights {
            if w > 0.0 {
                triplets.push((row, col, w));
            }
        }
    }
    SparseMatrix::from_triplets(points.len(), mesh.n_vertices(), &triplets)
}
