//! P1 finite elements on a structured triangulation of the unit square with
//! homogeneous Dirichlet conditions.
//!
//! Nodes are numbered row-major (`node = j * nx + i`, `x = i h`, `y = j h`).
//! Each grid cell `(i, j)` is split along the diagonal from its lower-left to
//! its upper-right corner. Boundary degrees of freedom are eliminated, so every
//! operator below acts on interior dofs only, numbered row-major over the
//! interior nodes.

use std::sync::atomic::{AtomicUsize, Ordering};

use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, ColRef};

use crate::error::{Error, Result};
use crate::linalg::{spmv, SparseMat};

/// Observation lattice spacing: measurements sit at `(i/20, j/20)`.
pub const OBS_LATTICE: usize = 20;
/// Number of measurement locations, `(OBS_LATTICE - 1)^2`.
pub const N_OBS: usize = (OBS_LATTICE - 1) * (OBS_LATTICE - 1);

/// Coefficients of a field in the interior P1 nodal basis.
pub type StateVector = Col<f64>;
/// Point values at the measurement lattice.
pub type ObservationVector = Col<f64>;

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub node_coords: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub interior_mask: Vec<bool>,
    /// Interior dof index of each node, `None` on the boundary.
    pub dof_of_node: Vec<Option<usize>>,
    /// Node index of each interior dof.
    pub node_of_dof: Vec<usize>,
}

/// Builds the default aligned mesh: `nx = ny`, `nx >= 21`, `(nx - 1)` a
/// multiple of 20 so that the measurement lattice falls on mesh nodes.
pub fn build_mesh(nx: usize, ny: usize) -> Result<Mesh> {
    if nx != ny {
        return Err(Error::InvalidMesh(format!("nx = {nx} differs from ny = {ny}")));
    }
    if nx < OBS_LATTICE + 1 || (nx - 1) % OBS_LATTICE != 0 {
        return Err(Error::InvalidMesh(format!(
            "nx - 1 = {} must be a positive multiple of {OBS_LATTICE}",
            nx as i64 - 1
        )));
    }
    Ok(Mesh::structured(nx, ny))
}

impl Mesh {
    /// Structured uniform triangulation without the alignment requirement.
    /// Meshes built this way carry no observation operator unless aligned.
    pub fn structured(nx: usize, ny: usize) -> Mesh {
        assert!(nx >= 3 && ny >= 3, "mesh needs at least one interior node");
        assert_eq!(nx, ny, "only square grids are supported");
        let h = 1.0 / (nx - 1) as f64;
        let mut node_coords = Vec::with_capacity(nx * ny);
        let mut interior_mask = Vec::with_capacity(nx * ny);
        let mut dof_of_node = Vec::with_capacity(nx * ny);
        let mut node_of_dof = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                node_coords.push([i as f64 * h, j as f64 * h]);
                let interior = i > 0 && j > 0 && i + 1 < nx && j + 1 < ny;
                interior_mask.push(interior);
                if interior {
                    dof_of_node.push(Some(node_of_dof.len()));
                    node_of_dof.push(j * nx + i);
                } else {
                    dof_of_node.push(None);
                }
            }
        }
        let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                let b = a + 1;
                let c = a + nx + 1;
                let d = a + nx;
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        Mesh { nx, ny, h, node_coords, triangles, interior_mask, dof_of_node, node_of_dof }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.node_of_dof.len()
    }

    pub fn is_aligned(&self) -> bool {
        self.nx == self.ny && self.nx > OBS_LATTICE && (self.nx - 1) % OBS_LATTICE == 0
    }

    /// Nodal interpolant of `f` restricted to interior dofs.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> StateVector {
        Col::from_fn(self.n_dofs(), |k| {
            let [x, y] = self.node_coords[self.node_of_dof[k]];
            f(x, y)
        })
    }

    /// Nodal interpolant of `f` over all nodes (boundary included).
    pub fn interpolate_full(&self, f: impl Fn(f64, f64) -> f64) -> Col<f64> {
        Col::from_fn(self.n_nodes(), |k| {
            let [x, y] = self.node_coords[k];
            f(x, y)
        })
    }

    /// Interior dof vector extended by zeros on the boundary.
    pub fn extend_to_nodes(&self, v: ColRef<'_, f64>) -> Col<f64> {
        let mut out = Col::zeros(self.n_nodes());
        for (k, &node) in self.node_of_dof.iter().enumerate() {
            out[node] = v[k];
        }
        out
    }

    /// FNV-1a digest of the mesh geometry; used to key on-disk caches.
    pub fn digest(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for v in [self.nx as u64, self.ny as u64] {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }
}

/// Geometric data of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub nodes: [usize; 3],
    /// Interior dof of each vertex.
    pub dofs: [Option<usize>; 3],
    pub area: f64,
    /// Constant gradients of the three barycentric basis functions.
    pub grad_x: [f64; 3],
    pub grad_y: [f64; 3],
}

fn element_geometry(mesh: &Mesh, tri: [usize; 3]) -> Element {
    let [p0, p1, p2] = tri.map(|n| mesh.node_coords[n]);
    let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    let area = 0.5 * det.abs();
    // grad of barycentric lambda_a = (y_b - y_c, x_c - x_b) / det
    let grad_x = [(p1[1] - p2[1]) / det, (p2[1] - p0[1]) / det, (p0[1] - p1[1]) / det];
    let grad_y = [(p2[0] - p1[0]) / det, (p0[0] - p2[0]) / det, (p1[0] - p0[0]) / det];
    Element { nodes: tri, dofs: tri.map(|n| mesh.dof_of_node[n]), area, grad_x, grad_y }
}

/// Symmetric 3-point Gauss rule on the reference triangle (degree 2), as
/// barycentric coordinates. Weights are `area / 3`.
pub const GAUSS3: [[f64; 3]; 3] = [
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];

/// The QGE forcing `F(x, y) = sin(pi (y - 1)) / 2`.
pub fn qge_forcing(_x: f64, y: f64) -> f64 {
    0.5 * (std::f64::consts::PI * (y - 1.0)).sin()
}

/// Operators assembled over all nodes before Dirichlet elimination.
pub struct FullAssembly {
    pub mass: SparseMat,
    pub stiffness: SparseMat,
    pub dx: SparseMat,
}

/// Assembles mass, stiffness and weak x-derivative over all nodes.
pub fn assemble_full(mesh: &Mesh) -> FullAssembly {
    let n = mesh.n_nodes();
    let mut m = Vec::new();
    let mut k = Vec::new();
    let mut d = Vec::new();
    for tri in &mesh.triangles {
        let e = element_geometry(mesh, *tri);
        for a in 0..3 {
            for b in 0..3 {
                let (r, c) = (e.nodes[a], e.nodes[b]);
                let mloc = if a == b { e.area / 6.0 } else { e.area / 12.0 };
                m.push(Triplet::new(r, c, mloc));
                k.push(Triplet::new(r, c, e.area * (e.grad_x[a] * e.grad_x[b] + e.grad_y[a] * e.grad_y[b])));
                d.push(Triplet::new(r, c, e.grad_x[b] * e.area / 3.0));
            }
        }
    }
    let build = |t: &[Triplet<usize, usize, f64>]| SparseColMat::try_new_from_triplets(n, n, t).expect("valid triplets");
    FullAssembly { mass: build(&m), stiffness: build(&k), dx: build(&d) }
}

/// All discrete operators of the QGE on interior dofs.
pub struct FemOperators {
    pub mesh: Mesh,
    /// `M_ij = (phi_j, phi_i)`.
    pub mass: SparseMat,
    /// `K_ij = (grad phi_j, grad phi_i)`.
    pub stiffness: SparseMat,
    /// `Dx_ij = (d phi_j / dx, phi_i)`.
    pub dx: SparseMat,
    /// `(F, phi_i)` for the QGE forcing.
    pub forcing: Col<f64>,
    pub elements: Vec<Element>,
    /// Interior dof observed at each measurement location, row-major in
    /// `(i, j)`; `None` if the mesh is not aligned with the lattice.
    pub obs_dofs: Option<Vec<usize>>,
    /// Number of calls to [`FemOperators::apply_trilinear`].
    pub trilinear_calls: AtomicUsize,
}

/// Assembles the interior-dof operators for `mesh`.
pub fn assemble_operators(mesh: &Mesh) -> FemOperators {
    assemble_operators_with_forcing(mesh, qge_forcing)
}

pub fn assemble_operators_with_forcing(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> FemOperators {
    let n = mesh.n_dofs();
    let elements: Vec<Element> = mesh.triangles.iter().map(|t| element_geometry(mesh, *t)).collect();
    let mut m = Vec::new();
    let mut k = Vec::new();
    let mut d = Vec::new();
    let mut forcing = Col::<f64>::zeros(n);
    for e in &elements {
        for a in 0..3 {
            let Some(r) = e.dofs[a] else { continue };
            for b in 0..3 {
                let Some(c) = e.dofs[b] else { continue };
                let mloc = if a == b { e.area / 6.0 } else { e.area / 12.0 };
                m.push(Triplet::new(r, c, mloc));
                k.push(Triplet::new(r, c, e.area * (e.grad_x[a] * e.grad_x[b] + e.grad_y[a] * e.grad_y[b])));
                d.push(Triplet::new(r, c, e.grad_x[b] * e.area / 3.0));
            }
            let p = e.nodes.map(|nd| mesh.node_coords[nd]);
            for q in GAUSS3 {
                let x = q[0] * p[0][0] + q[1] * p[1][0] + q[2] * p[2][0];
                let y = q[0] * p[0][1] + q[1] * p[1][1] + q[2] * p[2][1];
                forcing[r] += e.area / 3.0 * f(x, y) * q[a];
            }
        }
    }
    let build = |t: &[Triplet<usize, usize, f64>]| SparseColMat::try_new_from_triplets(n, n, t).expect("valid triplets");
    let obs_dofs = mesh.is_aligned().then(|| {
        let stride = (mesh.nx - 1) / OBS_LATTICE;
        let mut dofs = Vec::with_capacity(N_OBS);
        for i in 1..OBS_LATTICE {
            for j in 1..OBS_LATTICE {
                let node = (j * stride) * mesh.nx + i * stride;
                dofs.push(mesh.dof_of_node[node].expect("lattice point is interior"));
            }
        }
        dofs
    });
    FemOperators {
        mesh: mesh.clone(),
        mass: build(&m),
        stiffness: build(&k),
        dx: build(&d),
        forcing,
        elements,
        obs_dofs,
        trilinear_calls: AtomicUsize::new(0),
    }
}

impl FemOperators {
    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    /// Vector of `J(omega, psi, phi_i)` over all interior test functions,
    /// `J(w, p, e) = int p (dw/dy de/dx - dw/dx de/dy)`.
    ///
    /// Gradients are elementwise constant and `int_T p = |T| mean(p)`, so the
    /// element integral is evaluated in closed form.
    pub fn apply_trilinear(&self, omega: ColRef<'_, f64>, psi: ColRef<'_, f64>) -> Result<StateVector> {
        let n = self.n_dofs();
        if omega.nrows() != n || psi.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, found: omega.nrows().max(psi.nrows()) });
        }
        self.trilinear_calls.fetch_add(1, Ordering::Relaxed);
        let mut out = Col::zeros(n);
        self.trilinear_into(omega, psi, &mut out);
        Ok(out)
    }

    /// Unchecked accumulation of `J(omega, psi, .)` into `out`.
    pub(crate) fn trilinear_into(&self, omega: ColRef<'_, f64>, psi: ColRef<'_, f64>, out: &mut Col<f64>) {
        let val = |x: ColRef<'_, f64>, d: Option<usize>| d.map_or(0.0, |k| x[k]);
        for e in &self.elements {
            let w = e.dofs.map(|d| val(omega, d));
            let p = e.dofs.map(|d| val(psi, d));
            let wx = w[0] * e.grad_x[0] + w[1] * e.grad_x[1] + w[2] * e.grad_x[2];
            let wy = w[0] * e.grad_y[0] + w[1] * e.grad_y[1] + w[2] * e.grad_y[2];
            let scale = e.area * (p[0] + p[1] + p[2]) / 3.0;
            if scale == 0.0 && wx == 0.0 && wy == 0.0 {
                continue;
            }
            for a in 0..3 {
                if let Some(r) = e.dofs[a] {
                    out[r] += scale * (wy * e.grad_x[a] - wx * e.grad_y[a]);
                }
            }
        }
    }

    /// Point values at the 361 lattice locations `(i/20, j/20)`, ordered
    /// row-major in `(i, j)`.
    pub fn observe(&self, omega: ColRef<'_, f64>) -> Result<ObservationVector> {
        let dofs = self.obs_dofs.as_ref().ok_or(Error::UnalignedMesh)?;
        Ok(Col::from_fn(dofs.len(), |k| omega[dofs[k]]))
    }

    /// The selection operator realised by [`FemOperators::observe`].
    pub fn observation_operator(&self) -> Result<crate::filters::Observation> {
        let dofs = self.obs_dofs.as_ref().ok_or(Error::UnalignedMesh)?;
        Ok(crate::filters::Observation::new(dofs.clone(), self.n_dofs()))
    }

    /// L2 inner product `a^T M b`.
    pub fn v_inner(&self, a: ColRef<'_, f64>, b: ColRef<'_, f64>) -> Result<f64> {
        let n = self.n_dofs();
        if a.nrows() != n || b.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, found: a.nrows().max(b.nrows()) });
        }
        Ok(a.transpose() * spmv(&self.mass, b))
    }

    pub fn v_norm(&self, a: ColRef<'_, f64>) -> f64 {
        (a.transpose() * spmv(&self.mass, a)).max(0.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_counts() {
        let m = build_mesh(21, 21).unwrap();
        assert_eq!(m.n_nodes(), 441);
        assert_eq!(m.triangles.len(), 800);
        assert_eq!(m.n_dofs(), 361);
        let m = build_mesh(41, 41).unwrap();
        assert_eq!(m.n_nodes(), 1681);
        assert_eq!(m.h, 1.0 / 40.0);
        assert!(build_mesh(22, 22).is_err());
        assert!(build_mesh(41, 21).is_err());
        assert!(build_mesh(1, 1).is_err());
    }

    #[test]
    fn boundary_nodes_are_exactly_the_edges() {
        let m = build_mesh(21, 21).unwrap();
        for (k, &[x, y]) in m.node_coords.iter().enumerate() {
            let on_edge = x == 0.0 || x == 1.0 || y == 0.0 || y == 1.0;
            assert_eq!(m.interior_mask[k], !on_edge);
        }
    }

    #[test]
    fn full_mass_integrates_area() {
        let m = Mesh::structured(11, 11);
        let full = assemble_full(&m);
        let ones = Col::<f64>::ones(m.n_nodes());
        let total: f64 = spmv(&full.mass, ones.as_ref()).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((ones.transpose() * spmv(&full.mass, ones.as_ref()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let m = Mesh::structured(11, 11);
        let full = assemble_full(&m);
        let ones = Col::<f64>::ones(m.n_nodes());
        let k1 = spmv(&full.stiffness, ones.as_ref());
        assert!(k1.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dx_is_exact_for_linear_x() {
        // int (d x / dx) phi_i = int phi_i, compared with an elementwise
        // quadrature of the basis function itself.
        let m = Mesh::structured(9, 9);
        let full = assemble_full(&m);
        let u = m.interpolate_full(|x, _| x);
        let got = spmv(&full.dx, u.as_ref());
        let mut want = vec![0.0; m.n_nodes()];
        for tri in &m.triangles {
            let e = element_geometry(&m, *tri);
            for q in GAUSS3 {
                for a in 0..3 {
                    want[e.nodes[a]] += e.area / 3.0 * q[a];
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_selects_lattice_nodes() {
        let m = build_mesh(41, 41).unwrap();
        let ops = assemble_operators(&m);
        let u = m.interpolate(|x, _| x);
        let d = ops.observe(u.as_ref()).unwrap();
        assert_eq!(d.nrows(), N_OBS);
        for i in 1..20 {
            for j in 1..20 {
                assert!((d[(i - 1) * 19 + (j - 1)] - i as f64 / 20.0).abs() < 1e-15);
            }
        }
        let z = ops.observe(Col::<f64>::zeros(m.n_dofs()).as_ref()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let unaligned = assemble_operators(&Mesh::structured(6, 6));
        assert!(unaligned.observe(Col::<f64>::zeros(16).as_ref()).is_err());
    }

    #[test]
    fn trilinear_trivial_cases() {
        let m = Mesh::structured(8, 8);
        let ops = assemble_operators(&m);
        let w = m.interpolate(|x, y| (3.0 * x).sin() * y);
        let zero = Col::<f64>::zeros(m.n_dofs());
        let out = ops.apply_trilinear(w.as_ref(), zero.as_ref()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // constant over all nodes, including the boundary: build via full interpolant
        let mut ops_c = assemble_operators(&m);
        ops_c.elements.iter_mut().for_each(|e| e.dofs = e.nodes.map(|n| Some(n)));
        let c = Col::<f64>::ones(m.n_nodes());
        let p = m.interpolate_full(|x, y| x * y + 1.0);
        let mut out = Col::zeros(m.n_nodes());
        ops_c.trilinear_into(c.as_ref(), p.as_ref(), &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-14));
        assert!(ops.apply_trilinear(w.as_ref(), Col::<f64>::zeros(3).as_ref()).is_err());
    }
}
