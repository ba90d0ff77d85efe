//! Bilinear finite elements for the diffusion operator.
//!
//! The semi-discrete diffusion problem is `M dV/dt = -K V` with a row-sum
//! lumped mass `M` and an anisotropic stiffness `K`; zero-flux boundaries are
//! natural, so `K` has constants in its null space.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, TissueTag};

/// Safety factor applied to the diagonal-dominance step bound.
pub const GERSHGORIN_SAFETY: f64 = 0.9;

/// Rows per rayon task in the sub-step kernels.
const ROW_CHUNK: usize = 2048;

/// Per-element conductivity `D = d_l f f^T + d_t (I - f f^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionField {
    pub longitudinal: Vec<f64>,
    pub transverse: Vec<f64>,
    pub fibers: Vec<[f64; 2]>,
}

impl DiffusionField {
    pub fn tensor(&self, e: usize) -> [[f64; 2]; 2] {
        let (dl, dt, f) = (self.longitudinal[e], self.transverse[e], self.fibers[e]);
        let mut d = [[0.0; 2]; 2];
        for (a, row) in d.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let id = if a == b { 1.0 } else { 0.0 };
                *v = dl * f[a] * f[b] + dt * (id - f[a] * f[b]);
            }
        }
        d
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        DiffusionField {
            longitudinal: self.longitudinal.iter().map(|d| d * alpha).collect(),
            transverse: self.transverse.iter().map(|d| d * alpha).collect(),
            fibers: self.fibers.clone(),
        }
    }
}

/// Elements touching any fibroblast node get `d0_fibrotic`, all others
/// `d0_myocyte`; the transverse coefficient is `rho` times the longitudinal.
pub fn build_diffusion_field(mesh: &Mesh, d0_myocyte: f64, d0_fibrotic: f64, rho: f64) -> Result<DiffusionField> {
    let mut errs = Vec::new();
    if !(d0_myocyte > 0.0) {
        errs.push(format!("d0_myocyte must be positive, got {d0_myocyte}"));
    }
    if !(d0_fibrotic > 0.0) {
        errs.push(format!("d0_fibrotic must be positive, got {d0_fibrotic}"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        errs.push(format!("rho must lie in (0, 1], got {rho}"));
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let longitudinal: Vec<f64> = mesh
        .elements
        .iter()
        .map(|conn| {
            if conn.iter().any(|&i| mesh.tags[i] == TissueTag::Fibroblast) {
                d0_fibrotic
            } else {
                d0_myocyte
            }
        })
        .collect();
    Ok(DiffusionField {
        transverse: longitudinal.iter().map(|d| rho * d).collect(),
        longitudinal,
        fibers: mesh.fibers.clone(),
    })
}

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len() / 2);
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len() / 2);
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        let mut s = 0.0;
        for (&c, &v) in self.cols[r.clone()].iter().zip(&self.vals[r]) {
            s += v * x[c];
        }
        s
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut()
            .with_min_len(ROW_CHUNK)
            .enumerate()
            .for_each(|(i, yi)| *yi = self.row_dot(i, x));
    }

    pub fn scale(&mut self, alpha: f64) {
        self.vals.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Coordinate-format dump, one `i j value` line per stored entry.
    pub fn to_coo_text(&self) -> String {
        let mut out = String::with_capacity(self.nnz() * 24);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let _ = writeln!(out, "{i} {j} {v:e}");
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AssembledOperator {
    pub stiffness: CsrMatrix,
    pub mass: Vec<f64>,
    pub dt_s: f64,
}

impl AssembledOperator {
    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn write_coo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.stiffness.to_coo_text()).map_err(|e| Error::io(path, e))
    }

    /// `sum_i m_i v_i`, the quantity conserved by pure diffusion.
    pub fn weighted_sum(&self, v: &[f64]) -> f64 {
        self.mass.iter().zip(v).map(|(m, x)| m * x).sum()
    }
}

const GAUSS: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const REF_NODES: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// Element stiffness and lumped mass of a 4-node bilinear quad, 2x2 Gauss.
/// Returns `None` when the Jacobian is non-positive at a quadrature point.
pub(crate) fn element_matrices(x: [[f64; 2]; 4], d: [[f64; 2]; 2]) -> Option<([[f64; 4]; 4], [f64; 4])> {
    let mut ke = [[0.0; 4]; 4];
    let mut me = [0.0; 4];
    for gx in [-GAUSS, GAUSS] {
        for gy in [-GAUSS, GAUSS] {
            let mut shape = [0.0; 4];
            let mut dref = [[0.0; 2]; 4];
            for (a, r) in REF_NODES.iter().enumerate() {
                shape[a] = 0.25 * (1.0 + r[0] * gx) * (1.0 + r[1] * gy);
                dref[a] = [0.25 * r[0] * (1.0 + r[1] * gy), 0.25 * r[1] * (1.0 + r[0] * gx)];
            }
            // J[i][j] = d x_j / d xi_i
            let mut jac = [[0.0; 2]; 2];
            for a in 0..4 {
                for i in 0..2 {
                    for j in 0..2 {
                        jac[i][j] += dref[a][i] * x[a][j];
                    }
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            if !(det > 0.0) {
                return None;
            }
            let inv = [[jac[1][1] / det, -jac[0][1] / det], [-jac[1][0] / det, jac[0][0] / det]];
            let grads: [[f64; 2]; 4] = std::array::from_fn(|a| {
                [
                    inv[0][0] * dref[a][0] + inv[0][1] * dref[a][1],
                    inv[1][0] * dref[a][0] + inv[1][1] * dref[a][1],
                ]
            });
            for a in 0..4 {
                let dg = [
                    d[0][0] * grads[a][0] + d[0][1] * grads[a][1],
                    d[1][0] * grads[a][0] + d[1][1] * grads[a][1],
                ];
                for b in 0..4 {
                    ke[a][b] += det * (dg[0] * grads[b][0] + dg[1] * grads[b][1]);
                }
                me[a] += det * shape[a];
            }
        }
    }
    Some((ke, me))
}

/// Assembles stiffness and lumped mass and evaluates the stable step.
pub fn assemble(mesh: &Mesh, field: &DiffusionField) -> Result<AssembledOperator> {
    let n = mesh.n_nodes();
    if field.longitudinal.len() != mesh.n_elements() {
        return Err(Error::invalid(format!(
            "diffusion field has {} elements, mesh has {}",
            field.longitudinal.len(),
            mesh.n_elements()
        )));
    }
    let mut triplets = Vec::with_capacity(16 * mesh.n_elements());
    let mut mass = vec![0.0; n];
    for (e, conn) in mesh.elements.iter().enumerate() {
        let x = conn.map(|i| mesh.coords[i]);
        let (ke, me) = element_matrices(x, field.tensor(e))
            .ok_or_else(|| Error::invalid(format!("element {e} is degenerate (non-positive Jacobian)")))?;
        for a in 0..4 {
            mass[conn[a]] += me[a];
            for b in 0..4 {
                triplets.push((conn[a], conn[b], ke[a][b]));
            }
        }
    }
    let stiffness = CsrMatrix::from_triplets(n, triplets);
    let mut op = AssembledOperator {
        stiffness,
        mass,
        dt_s: 0.0,
    };
    op.dt_s = gershgorin_step(&op)?;
    debug_assert!(check_operator(&op).is_ok());
    Ok(op)
}

/// Symmetry, zero row sums and positive mass.
pub fn check_operator(op: &AssembledOperator) -> Result<()> {
    let k = &op.stiffness;
    let kmax = (0..k.n_rows())
        .flat_map(|i| k.row(i).map(|(_, v)| v.abs()))
        .fold(0.0, f64::max);
    let mut errs = Vec::new();
    for i in 0..k.n_rows() {
        let sum: f64 = k.row(i).map(|(_, v)| v).sum();
        if sum.abs() > 1e-10 * kmax {
            errs.push(format!("row {i} sums to {sum}"));
        }
        for (j, v) in k.row(i) {
            if (v - k.get(j, i)).abs() > 1e-12 * kmax {
                errs.push(format!("K[{i},{j}] != K[{j},{i}]"));
            }
        }
        if !(op.mass[i] > 0.0) {
            errs.push(format!("mass[{i}] = {}", op.mass[i]));
        }
        if errs.len() > 20 {
            break;
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// `0.9 * min_i m_i / (k_ii + sum_{j != i} |k_ij|)`.
pub fn gershgorin_step(op: &AssembledOperator) -> Result<f64> {
    let k = &op.stiffness;
    let mut best = f64::INFINITY;
    for i in 0..k.n_rows() {
        let mut radius = 0.0;
        for (j, v) in k.row(i) {
            radius += if j == i { v } else { v.abs() };
        }
        if !(radius > 0.0) {
            return Err(Error::Numerical(format!(
                "row {i} of the stiffness matrix has non-positive Gershgorin bound {radius}"
            )));
        }
        if !(op.mass[i] > 0.0) {
            return Err(Error::Numerical(format!("non-positive lumped mass at node {i}")));
        }
        best = best.min(op.mass[i] / radius);
    }
    Ok(GERSHGORIN_SAFETY * best)
}

/// One forward-Euler diffusion step, `v_out = v - dt/m * K v`. Each row sums
/// in stored column order, so the result does not depend on the thread count.
pub fn diffusion_substep(op: &AssembledOperator, v: &[f64], v_out: &mut [f64], dt_sub: f64) {
    let k = &op.stiffness;
    v_out
        .par_iter_mut()
        .with_min_len(ROW_CHUNK)
        .enumerate()
        .for_each(|(i, out)| *out = v[i] - dt_sub / op.mass[i] * k.row_dot(i, v));
}

/// `count` diffusion sub-steps in place, ping-ponging through `scratch`.
pub fn diffuse(op: &AssembledOperator, v: &mut Vec<f64>, scratch: &mut Vec<f64>, dt_sub: f64, count: usize) {
    for _ in 0..count {
        diffusion_substep(op, v, scratch, dt_sub);
        std::mem::swap(v, scratch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assign_fibrosis, build_regular_sheet};

    fn iso(mesh: &Mesh, d: f64) -> AssembledOperator {
        assemble(mesh, &build_diffusion_field(mesh, d, d, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn single_element_by_hand() {
        // Hand-integrated bilinear square: K = d/6 [[4,-1,-2,-1],...], m = h^2/4.
        let h = 0.3;
        let d = 0.7;
        let mesh = build_regular_sheet(h, h, h, 0.0).unwrap();
        let op = iso(&mesh, d);
        let stencil = [
            [4.0, -1.0, -2.0, -1.0],
            [-1.0, 4.0, -1.0, -2.0],
            [-2.0, -1.0, 4.0, -1.0],
            [-1.0, -2.0, -1.0, 4.0],
        ];
        // node order in the sheet is (0,0),(h,0),(0,h),(h,h); element is [0,1,3,2]
        let local = [0, 1, 3, 2];
        for a in 0..4 {
            assert!((op.mass[local[a]] - h * h / 4.0).abs() < 1e-15);
            for b in 0..4 {
                let want = d / 6.0 * stencil[a][b];
                assert!((op.stiffness.get(local[a], local[b]) - want).abs() < 1e-14);
            }
        }
        // isolated element: m / (k_ii + sum |k_ij|) = (h^2/4) / (8d/6)
        assert!((op.dt_s - 0.9 * (h * h / 4.0) / (8.0 * d / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn field_rules() {
        let mesh = build_regular_sheet(0.5, 0.5, 0.1, 0.0).unwrap();
        let f = build_diffusion_field(&mesh, 0.0017, 0.00066, 0.25).unwrap();
        assert!(f.longitudinal.iter().all(|&d| d == 0.0017));
        let t = f.tensor(0);
        assert!((t[0][0] - 0.0017).abs() < 1e-18 && (t[1][1] - 0.000425).abs() < 1e-18);
        assert!(t[0][1].abs() < 1e-18);

        let mut m2 = mesh.clone();
        m2.tags[14] = TissueTag::Fibroblast; // interior node (2, 2)
        let f2 = build_diffusion_field(&m2, 0.0017, 0.00066, 0.25).unwrap();
        let fib: Vec<usize> = (0..m2.n_elements()).filter(|&e| f2.longitudinal[e] == 0.00066).collect();
        assert_eq!(fib.len(), 4);
        assert!(fib.iter().all(|&e| m2.elements[e].contains(&14)));

        assert!(build_diffusion_field(&mesh, -1.0, 1.0, 0.5).is_err());
        assert!(build_diffusion_field(&mesh, 1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn rotated_tensor_eigenvalues() {
        let mesh = build_regular_sheet(0.2, 0.2, 0.1, 0.6).unwrap();
        let f = build_diffusion_field(&mesh, 2.0, 2.0, 0.25).unwrap();
        let t = f.tensor(0);
        let tr = t[0][0] + t[1][1];
        let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
        let disc = (tr * tr / 4.0 - det).sqrt();
        assert!((tr / 2.0 + disc - 2.0).abs() < 1e-12);
        assert!((tr / 2.0 - disc - 0.5).abs() < 1e-12);
        assert_eq!(t[0][1], t[1][0]);
    }

    #[test]
    fn operator_invariants_with_fibrosis() {
        let mesh = assign_fibrosis(&build_regular_sheet(1.0, 0.6, 0.05, 0.4).unwrap(), 0.2, 9).unwrap();
        let field = build_diffusion_field(&mesh, 0.002, 0.00066, 0.25).unwrap();
        let op = assemble(&mesh, &field).unwrap();
        check_operator(&op).unwrap();
        let total: f64 = op.mass.iter().sum();
        assert!((total - 0.6).abs() < 1e-12);
        let mut out = vec![0.0; op.n()];
        diffusion_substep(&op, &vec![-80.0; op.n()], &mut out, op.dt_s);
        assert!(out.iter().all(|&v| (v + 80.0).abs() < 1e-10));
    }

    #[test]
    fn anisotropic_sheet_matches_closed_form() {
        // With rho = 1/4 and fibers along x, an interior row has
        // k_ii + sum|k_ij| = 4 d, and m_i = h^2.
        let (d, h) = (0.0017, 0.01);
        let mesh = build_regular_sheet(0.2, 0.2, h, 0.0).unwrap();
        let op = assemble(&mesh, &build_diffusion_field(&mesh, d, d, 0.25).unwrap()).unwrap();
        assert!((op.dt_s - 0.9 * h * h / (4.0 * d)).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariance() {
        let mesh = assign_fibrosis(&build_regular_sheet(0.4, 0.3, 0.05, 0.2).unwrap(), 0.3, 1).unwrap();
        let n = mesh.n_nodes();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect(); // n = 63, coprime with 5
        let mut inv = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let permuted = Mesh {
            coords: (0..n).map(|i| mesh.coords[inv[i]]).collect(),
            tags: (0..n).map(|i| mesh.tags[inv[i]]).collect(),
            elements: mesh.elements.iter().map(|c| c.map(|i| perm[i])).collect(),
            ..mesh.clone()
        };
        let a = assemble(&mesh, &build_diffusion_field(&mesh, 0.002, 0.00066, 0.25).unwrap()).unwrap();
        let b = assemble(&permuted, &build_diffusion_field(&permuted, 0.002, 0.00066, 0.25).unwrap()).unwrap();
        assert!((a.dt_s - b.dt_s).abs() <= 1e-15 * a.dt_s);
    }

    #[test]
    fn step_scales_with_h_squared() {
        let a = iso(&build_regular_sheet(1.0, 1.0, 0.1, 0.0).unwrap(), 0.001);
        let b = iso(&build_regular_sheet(1.0, 1.0, 0.05, 0.0).unwrap(), 0.001);
        assert!((a.dt_s / b.dt_s - 4.0).abs() < 0.05 * 4.0);
    }

    #[test]
    fn rejects_degenerate_element() {
        let mut mesh = build_regular_sheet(0.2, 0.1, 0.1, 0.0).unwrap();
        mesh.coords[1] = mesh.coords[0];
        mesh.coords[4] = mesh.coords[3];
        let field = build_diffusion_field(&mesh, 1.0, 1.0, 1.0).unwrap();
        assert!(assemble(&mesh, &field).is_err());
    }

    #[test]
    fn gershgorin_rejects_zero_operator() {
        let op = AssembledOperator {
            stiffness: CsrMatrix::from_triplets(2, vec![(0, 0, 0.0), (1, 1, 0.0)]),
            mass: vec![1.0, 1.0],
            dt_s: 0.0,
        };
        assert!(gershgorin_step(&op).is_err());
    }

    #[test]
    fn coo_dump() {
        let mesh = build_regular_sheet(0.1, 0.1, 0.1, 0.0).unwrap();
        let text = iso(&mesh, 1.0).stiffness.to_coo_text();
        assert_eq!(text.lines().count(), 16);
        assert!(text.starts_with("0 0 "));
    }
}
