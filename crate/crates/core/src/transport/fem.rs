//! Trilinear hexahedral linear elasticity with a Jacobi-preconditioned
//! conjugate-gradient solver.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mesh::hex::{jacobian_from_gradients, shape_gradients};
use crate::mesh::{HexMesh, Vec3};

/// Block-sparse symmetric matrix with one `3 x 3` block per pair of nodes
/// sharing a cell.
pub(crate) struct BlockCsr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Matrix3<f64>>,
}

impl BlockCsr {
    fn pattern(mesh: &HexMesh) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); mesh.vertices.len()];
        for cell in &mesh.cells {
            for &a in cell {
                rows[a].extend_from_slice(cell);
            }
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
            cols.extend_from_slice(r);
            row_ptr.push(cols.len());
        }
        let vals = vec![Matrix3::zeros(); cols.len()];
        BlockCsr { row_ptr, cols, vals }
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        let r = &self.cols[self.row_ptr[row]..self.row_ptr[row + 1]];
        self.row_ptr[row] + r.binary_search(&col).expect("node pair in pattern")
    }

    fn mul(&self, x: &[Vec3], y: &mut [Vec3]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = Vec3::zeros();
            for s in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[s] * x[self.cols[s]];
            }
            *yi = acc;
        }
    }

    fn diagonal(&self) -> Vec<Vec3> {
        (0..self.row_ptr.len() - 1)
            .map(|i| {
                let b = &self.vals[self.slot(i, i)];
                Vec3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)])
            })
            .collect()
    }
}

/// 2-point Gauss rule on `[0, 1]`.
const GAUSS: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];

/// Stiffness matrix of `∇·[2μ ε(u) + λ (∇·u) I]` with per-cell Young's
/// modulus and Poisson ratio `nu`.
pub(crate) fn assemble(mesh: &HexMesh, young: &[f64], nu: f64) -> Result<BlockCsr> {
    let mut k = BlockCsr::pattern(mesh);
    let mut slots = [[0usize; 8]; 8];
    for (c, cell) in mesh.cells.iter().enumerate() {
        let e = young[c];
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let x = mesh.cell_vertices(c);
        let mut ke = [[Matrix3::<f64>::zeros(); 8]; 8];
        for &a in &GAUSS {
            for &b in &GAUSS {
                for &g in &GAUSS {
                    let grads = shape_gradients(&Vec3::new(a, b, g));
                    let j = jacobian_from_gradients(&x, &grads);
                    let det = j.determinant();
                    let jit = j.try_inverse().ok_or_else(|| Error::Singular(format!("degenerate cell {c}")))?.transpose();
                    let w = det.abs() / 8.0;
                    let dn: [Vec3; 8] = std::array::from_fn(|p| jit * grads[p]);
                    for p in 0..8 {
                        for q in 0..8 {
                            let dot = dn[p].dot(&dn[q]);
                            let blk = Matrix3::from_diagonal_element(mu * dot) + mu * dn[q] * dn[p].transpose() + lambda * dn[p] * dn[q].transpose();
                            ke[p][q] += blk * w;
                        }
                    }
                }
            }
        }
        for p in 0..8 {
            for q in 0..8 {
                slots[p][q] = k.slot(cell[p], cell[q]);
            }
        }
        for p in 0..8 {
            for q in 0..8 {
                k.vals[slots[p][q]] += ke[p][q];
            }
        }
    }
    Ok(k)
}

/// CG settings for the interior Dirichlet problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct SolverSettings {
    pub tol: f64,
    pub max_iters: usize,
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Solves `K u = 0` on free nodes with `u = dirichlet[i]` on fixed nodes.
/// Returns the full displacement and the CG iteration count.
pub(crate) fn solve_dirichlet(k: &BlockCsr, dirichlet: &[Option<Vec3>], s: SolverSettings) -> Result<(Vec<Vec3>, usize, f64)> {
    let n = dirichlet.len();
    let free: Vec<bool> = dirichlet.iter().map(Option::is_none).collect();
    if free.iter().all(|&f| f) {
        return Err(Error::Singular("elastic problem has no Dirichlet nodes".into()));
    }
    let mut u: Vec<Vec3> = dirichlet.iter().map(|d| d.unwrap_or_else(Vec3::zeros)).collect();
    let mask = |v: &mut [Vec3]| {
        for (x, &f) in v.iter_mut().zip(&free) {
            if !f {
                *x = Vec3::zeros();
            }
        }
    };
    let mut b = vec![Vec3::zeros(); n];
    k.mul(&u, &mut b);
    for x in &mut b {
        *x = -*x;
    }
    mask(&mut b);
    let bnorm = dot(&b, &b).sqrt();
    if bnorm == 0.0 {
        return Ok((u, 0, 0.0));
    }
    let diag = k.diagonal();
    if diag.iter().zip(&free).any(|(d, &f)| f && !(d.min() > 0.0)) {
        return Err(Error::Singular("non-positive stiffness diagonal".into()));
    }
    let precond = |r: &[Vec3], z: &mut [Vec3]| {
        for i in 0..n {
            z[i] = if free[i] { r[i].component_div(&diag[i]) } else { Vec3::zeros() };
        }
    };
    let mut x = vec![Vec3::zeros(); n];
    let mut r = b.clone();
    let mut z = vec![Vec3::zeros(); n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![Vec3::zeros(); n];
    let mut res = 1.0;
    for it in 1..=s.max_iters {
        k.mul(&p, &mut ap);
        mask(&mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt() / bnorm;
        if !res.is_finite() {
            return Err(Error::NonFinite("conjugate-gradient residual".into()));
        }
        if res <= s.tol {
            for i in 0..n {
                if free[i] {
                    u[i] = x[i];
                }
            }
            return Ok((u, it, res));
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged { residual: res, iterations: s.max_iters })
}
