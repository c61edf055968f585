//! Aspect-ratio smoothing: adaptive gradient descent on the mean squared
//! sampled aspect ratio of the worst cells, with the constrained vertices
//! held fixed.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::hex::jacobian_from_gradients;
use crate::mesh::{approx_aspect_ratio, min_jacobian_det, HexMesh, SampleSet, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    /// A cell is bad when its aspect ratio exceeds this fraction of the maximum.
    pub bad_fraction: f64,
    /// Stop once the loss drops below this value.
    pub stop_loss: f64,
    /// Initial step as a fraction of the mean edge length.
    pub initial_step: f64,
    pub grow: f64,
    pub max_backtracks: usize,
    pub max_iters: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { bad_fraction: 0.75, stop_loss: 100.0, initial_step: 0.02, grow: 1.5, max_backtracks: 40, max_iters: 5000 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bad_fraction > 0.0 && self.bad_fraction <= 1.0) {
            return Err(Error::invalid("bad-cell fraction must lie in (0, 1]"));
        }
        if !(self.stop_loss > 1.0) {
            return Err(Error::invalid("stop threshold must exceed 1"));
        }
        if !(self.initial_step > 0.0 && self.grow >= 1.0) {
            return Err(Error::invalid("step parameters must be positive"));
        }
        Ok(())
    }
}

/// One accepted iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingRecord {
    pub iteration: usize,
    pub loss: f64,
    pub max_aspect: f64,
    pub inversions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingResult {
    pub mesh: HexMesh,
    pub trace: Vec<SmoothingRecord>,
}

/// `σ_max² / σ_min²` of `J` and its gradient with respect to `J`. Eigenvalues
/// of `JᵀJ` within `1e-8·trace` of the extreme ones are averaged, which keeps
/// the gradient defined at singular-value ties.
pub fn squared_ratio_grad(j: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let m = j.transpose() * j;
    let eig = SymmetricEigen::new(m);
    let (lam, vecs) = (eig.eigenvalues, eig.eigenvectors);
    let tol = 1e-8 * m.trace();
    let lo = lam.min();
    let hi = lam.max();
    let group = |near: &dyn Fn(f64) -> bool| {
        let idx: Vec<usize> = (0..3).filter(|&k| near(lam[k])).collect();
        let mean = idx.iter().map(|&k| lam[k]).sum::<f64>() / idx.len() as f64;
        let mut d = Matrix3::zeros();
        for &k in &idx {
            let v = vecs.column(k).into_owned();
            d += 2.0 * (j * v) * v.transpose();
        }
        (mean, d / idx.len() as f64)
    };
    let (l1, d1) = group(&|l| l - lo <= tol);
    let (l3, d3) = group(&|l| hi - l <= tol);
    if hi - lo <= tol {
        return (1.0, Matrix3::zeros());
    }
    let r = l3 / l1;
    (r, d3 / l1 - d1 * (l3 / (l1 * l1)))
}

/// `Ãsp²` of a cell and its gradient with respect to the eight vertices,
/// taken at the maximising sample.
pub fn cell_aspect_grad(cell: &[Vec3; 8], samples: &SampleSet) -> (f64, [Vec3; 8]) {
    let mut best = (f64::NEG_INFINITY, 0);
    let mut jac = Matrix3::zeros();
    for (s, g) in samples.gradients().iter().enumerate() {
        let j = jacobian_from_gradients(cell, g);
        let eig = SymmetricEigen::new(j.transpose() * j);
        let r = eig.eigenvalues.max() / eig.eigenvalues.min();
        if r > best.0 {
            best = (r, s);
            jac = j;
        }
    }
    let (r2, dj) = squared_ratio_grad(&jac);
    let g = &samples.gradients()[best.1];
    // J = Σ_a x_a g_aᵀ, so ∂r²/∂x_a = (∂r²/∂J) g_a.
    (r2, std::array::from_fn(|a| dj * g[a]))
}

struct State {
    aspect: Vec<f64>,
}

impl State {
    fn new(mesh: &HexMesh, samples: &SampleSet) -> Result<Self> {
        let aspect = (0..mesh.cells.len()).map(|c| approx_aspect_ratio(&mesh.cell_vertices(c), samples)).collect::<Result<_>>()?;
        Ok(State { aspect })
    }

    fn max(&self) -> f64 {
        self.aspect.iter().copied().fold(1.0, f64::max)
    }

    fn bad(&self, frac: f64) -> Vec<usize> {
        let m = self.max();
        (0..self.aspect.len()).filter(|&c| self.aspect[c] > frac * m || self.aspect[c] == m).collect()
    }

    fn loss(&self, frac: f64) -> f64 {
        let bad = self.bad(frac);
        bad.iter().map(|&c| self.aspect[c].powi(2)).sum::<f64>() / bad.len() as f64
    }
}

/// `ℒ = mean over bad cells of Ãsp²`.
pub fn smoothing_loss(mesh: &HexMesh, bad_fraction: f64, samples: &SampleSet) -> Result<f64> {
    Ok(State::new(mesh, samples)?.loss(bad_fraction))
}

/// Gradient of `ℒ` with respect to every vertex for a fixed bad-cell set.
pub fn smoothing_loss_grad(mesh: &HexMesh, bad: &[usize], samples: &SampleSet) -> Vec<Vec3> {
    let mut g = vec![Vec3::zeros(); mesh.vertices.len()];
    let w = 1.0 / bad.len() as f64;
    for &c in bad {
        let (_, dg) = cell_aspect_grad(&mesh.cell_vertices(c), samples);
        for (a, &v) in mesh.cells[c].iter().enumerate() {
            g[v] += w * dg[a];
        }
    }
    g
}

/// Minimises `ℒ` over the vertices with `fixed[i] == false`. Each iteration
/// takes an RMS-normalised gradient step; a step that inverts a cell or
/// raises `ℒ` is halved until accepted, and the step grows after success.
pub fn smooth_aspect_ratio_masked(mesh: &HexMesh, fixed: &[bool], cfg: &SmoothingConfig) -> Result<SmoothingResult> {
    cfg.validate()?;
    if fixed.len() != mesh.vertices.len() {
        return Err(Error::invalid("fixed mask does not match the mesh"));
    }
    let samples = SampleSet::default();
    let mut mesh = mesh.clone();
    let mut state = State::new(&mesh, &samples)?;
    let vertex_cells = mesh.vertex_cells();
    let mut loss = state.loss(cfg.bad_fraction);
    let mut trace = vec![SmoothingRecord { iteration: 0, loss, max_aspect: state.max(), inversions: 0 }];
    let edge = mean_edge_length(&mesh);
    let mut eta = cfg.initial_step * edge;
    for it in 1..=cfg.max_iters {
        if loss < cfg.stop_loss {
            break;
        }
        let bad = state.bad(cfg.bad_fraction);
        let mut grad = smoothing_loss_grad(&mesh, &bad, &samples);
        for (g, &f) in grad.iter_mut().zip(fixed) {
            if f {
                *g = Vec3::zeros();
            }
        }
        let moved: Vec<usize> = (0..grad.len()).filter(|&v| grad[v] != Vec3::zeros()).collect();
        if moved.is_empty() {
            break;
        }
        let rms = (moved.iter().map(|&v| grad[v].norm_squared()).sum::<f64>() / (3 * moved.len()) as f64).sqrt();
        let mut touched: Vec<usize> = moved.iter().flat_map(|&v| vertex_cells[v].iter().copied()).collect();
        touched.sort_unstable();
        touched.dedup();
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            let mut trial = mesh.clone();
            for &v in &moved {
                trial.vertices[v] -= (eta / rms) * grad[v];
            }
            let mut next = State { aspect: state.aspect.clone() };
            let mut inverted = false;
            for &c in &touched {
                let cell = trial.cell_vertices(c);
                if !(min_jacobian_det(&cell, &samples) > 0.0) {
                    inverted = true;
                    break;
                }
                next.aspect[c] = approx_aspect_ratio(&cell, &samples)?;
            }
            if !inverted {
                let l = next.loss(cfg.bad_fraction);
                if l <= loss {
                    mesh = trial;
                    state = next;
                    loss = l;
                    accepted = true;
                    eta *= cfg.grow;
                    break;
                }
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(SmoothingRecord { iteration: it, loss, max_aspect: state.max(), inversions: 0 });
    }
    Ok(SmoothingResult { mesh, trace })
}

/// [`smooth_aspect_ratio_masked`] with the boundary vertices fixed.
pub fn smooth_aspect_ratio(mesh: &HexMesh, cfg: &SmoothingConfig) -> Result<SmoothingResult> {
    smooth_aspect_ratio_masked(mesh, &mesh.boundary_vertex_flags(), cfg)
}

pub(crate) fn mean_edge_length(mesh: &HexMesh) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..mesh.cells.len() {
        let x = mesh.cell_vertices(c);
        for [a, b] in crate::mesh::CELL_EDGES {
            sum += (x[a] - x[b]).norm();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::detect_inverted_cells;
    use crate::mesh::generate::box_hex_mesh;
    use crate::mesh::hex::REF_CORNERS;

    fn unit_cube() -> [Vec3; 8] {
        std::array::from_fn(|a| Vec3::from(REF_CORNERS[a]))
    }

    #[test]
    fn ratio_gradient_matches_finite_differences() {
        let j = Matrix3::new(1.3, 0.2, -0.1, 0.05, 0.8, 0.3, 0.1, -0.2, 0.6);
        let (_, g) = squared_ratio_grad(&j);
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let (mut p, mut m) = (j, j);
                p[(r, c)] += h;
                m[(r, c)] -= h;
                let fd = (squared_ratio_grad(&p).0 - squared_ratio_grad(&m).0) / (2.0 * h);
                assert!((fd - g[(r, c)]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ties_give_finite_gradients() {
        let (r, g) = squared_ratio_grad(&Matrix3::identity());
        assert_eq!(r, 1.0);
        assert_eq!(g, Matrix3::zeros());
        let (r, g) = squared_ratio_grad(&Matrix3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0)));
        assert!((r - 4.0).abs() < 1e-12);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let mut cell = unit_cube();
        let offsets = [0.1, -0.05, 0.08, 0.02, -0.12, 0.07, 0.03, -0.04];
        for (a, o) in offsets.iter().enumerate() {
            cell[a] += Vec3::new(*o, 0.5 * o, -0.3 * o) + Vec3::new(0.3 * (a % 2) as f64, 0.0, 0.0);
        }
        let s = SampleSet::default();
        let (_, g) = cell_aspect_grad(&cell, &s);
        let f = |c: &[Vec3; 8]| approx_aspect_ratio(c, &s).unwrap().powi(2);
        let h = 1e-7;
        let mut worst = 0.0f64;
        for a in 0..8 {
            for k in 0..3 {
                let (mut p, mut m) = (cell, cell);
                p[a][k] += h;
                m[a][k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                worst = worst.max((fd - g[a][k]).abs() / fd.abs().max(1e-6));
            }
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut mesh = box_hex_mesh([3, 3, 3], Vec3::zeros(), Vec3::repeat(1.0));
        let tie_break = [Vec3::new(0.04, -0.02, 0.01), Vec3::new(-0.03, 0.05, 0.02), Vec3::new(0.01, 0.03, -0.06)];
        let interior: Vec<usize> = (0..mesh.vertices.len()).filter(|&v| !mesh.boundary_vertex_flags()[v]).collect();
        for (i, &v) in interior.iter().enumerate() {
            mesh.vertices[v] += tie_break[i % 3] * (1.0 + 0.4 * (i % 4) as f64);
        }
        let s = SampleSet::default();
        let state = State::new(&mesh, &s).unwrap();
        let bad = state.bad(0.75);
        let g = smoothing_loss_grad(&mesh, &bad, &s);
        let fixed_loss = |m: &HexMesh| bad.iter().map(|&c| approx_aspect_ratio(&m.cell_vertices(c), &s).unwrap().powi(2)).sum::<f64>() / bad.len() as f64;
        let h = 1e-7;
        for &v in &interior {
            for k in 0..3 {
                let (mut p, mut m) = (mesh.clone(), mesh.clone());
                p.vertices[v][k] += h;
                m.vertices[v][k] -= h;
                let fd = (fixed_loss(&p) - fixed_loss(&m)) / (2.0 * h);
                assert!((fd - g[v][k]).abs() <= 1e-3 * fd.abs().max(1e-3), "vertex {v} axis {k}: {fd} vs {}", g[v][k]);
            }
        }
    }

    #[test]
    fn regular_grid_returns_immediately() {
        let mesh = box_hex_mesh([3, 3, 3], Vec3::zeros(), Vec3::repeat(1.0));
        let out = smooth_aspect_ratio(&mesh, &SmoothingConfig::default()).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert!((out.trace[0].loss - 1.0).abs() < 1e-12);
        assert_eq!(out.mesh, mesh);
    }

    #[test]
    fn inverted_input_is_rejected() {
        let mut mesh = box_hex_mesh([2, 2, 2], Vec3::zeros(), Vec3::repeat(1.0));
        mesh.vertices[13] += Vec3::new(0.8, 0.8, 0.8);
        assert!(!detect_inverted_cells(&mesh, &SampleSet::default()).is_empty());
        assert!(smooth_aspect_ratio(&mesh, &SmoothingConfig::default()).is_err());
    }
}
