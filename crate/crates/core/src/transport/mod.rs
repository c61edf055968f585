//! Extension of a surface displacement into a hexahedral volume hierarchy:
//! incremental linear elasticity, inverted-cell repair, aspect-ratio
//! smoothing and coarse-to-fine propagation.

mod fem;
mod smoothing;

use serde::{Deserialize, Serialize};

pub use smoothing::{
    cell_aspect_grad, smooth_aspect_ratio, smooth_aspect_ratio_masked, smoothing_loss, smoothing_loss_grad, squared_ratio_grad,
    SmoothingConfig, SmoothingRecord, SmoothingResult,
};

use crate::error::{Error, Result};
use crate::mesh::hex::aspect_ratio_unsigned;
use crate::mesh::{detect_inverted_cells, HexHierarchy, HexMesh, SampleSet, Vec3};

/// Young's modulus is the squared aspect ratio, capped so that nearly
/// degenerate cells keep the system well scaled.
const ASPECT_CAP: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticExtensionConfig {
    pub n_steps: usize,
    pub nu: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub repair_passes: usize,
}

impl Default for ElasticExtensionConfig {
    fn default() -> Self {
        ElasticExtensionConfig { n_steps: 8, nu: 0.3, tol: 1e-10, max_iters: 20_000, repair_passes: 50 }
    }
}

impl ElasticExtensionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("at least one extension step"));
        }
        if !(self.nu > 0.0 && self.nu < 0.5) {
            return Err(Error::invalid("Poisson ratio must lie in (0, 0.5)"));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::invalid("solver tolerance and iteration cap must be positive"));
        }
        Ok(())
    }

    fn solver(&self) -> fem::SolverSettings {
        fem::SolverSettings { tol: self.tol, max_iters: self.max_iters }
    }
}

/// Boundary-data factor `(e^{−n/N} − 1)/(e^{−1} − 1)` of step `n`.
pub fn boundary_schedule(n: usize, n_steps: usize) -> f64 {
    if n == 0 {
        0.0
    } else if n >= n_steps {
        1.0
    } else {
        ((-(n as f64) / n_steps as f64).exp() - 1.0) / ((-1f64).exp() - 1.0)
    }
}

/// Per-cell `E = Ãsp²` of the current geometry, orientation ignored.
pub fn young_modulus(mesh: &HexMesh) -> Vec<f64> {
    let s = SampleSet::default();
    (0..mesh.cells.len()).map(|c| aspect_ratio_unsigned(&mesh.cell_vertices(c), &s, ASPECT_CAP).powi(2)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElasticSolution {
    pub displacement: Vec<Vec3>,
    pub iterations: usize,
    pub residual: f64,
}

/// Finite-element solution of the elastic problem on `mesh` with Dirichlet
/// data on the nodes where `dirichlet[i]` is set.
pub fn solve_elastic_step(mesh: &HexMesh, dirichlet: &[Option<Vec3>], young: &[f64], cfg: &ElasticExtensionConfig) -> Result<ElasticSolution> {
    cfg.validate()?;
    if dirichlet.len() != mesh.vertices.len() || young.len() != mesh.cells.len() {
        return Err(Error::invalid("elastic data does not match the mesh"));
    }
    if young.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::invalid("Young's modulus must be positive"));
    }
    let k = fem::assemble(mesh, young, cfg.nu)?;
    let (displacement, iterations, residual) = fem::solve_dirichlet(&k, dirichlet, cfg.solver())?;
    Ok(ElasticSolution { displacement, iterations, residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub passes: usize,
    pub initial: Vec<usize>,
    pub remaining: Vec<usize>,
}

/// Relaxes the free vertices of inverted cells halfway toward the mean of
/// their edge neighbours until no cell is inverted or `max_passes` runs
/// out. Vertices with `fixed[i]` never move.
pub fn repair_inversions(mesh: &HexMesh, displacement: &[Vec3], fixed: &[bool], max_passes: usize) -> (Vec<Vec3>, RepairReport) {
    let s = SampleSet::default();
    let reference = mesh;
    let deformed = |u: &[Vec3]| reference.with_vertices(reference.vertices.iter().zip(u).map(|(x, d)| x + d).collect());
    let mut u = displacement.to_vec();
    let mut bad = detect_inverted_cells(&deformed(&u), &s);
    let initial = bad.clone();
    let nbrs = mesh.vertex_neighbors();
    let mut passes = 0;
    while !bad.is_empty() && passes < max_passes {
        let mut verts: Vec<usize> = bad.iter().flat_map(|&c| mesh.cells[c]).filter(|&v| !fixed[v]).collect();
        verts.sort_unstable();
        verts.dedup();
        if verts.is_empty() {
            break;
        }
        let old = u.clone();
        for v in verts {
            let avg = nbrs[v].iter().fold(Vec3::zeros(), |a, &j| a + old[j]) / nbrs[v].len() as f64;
            u[v] = 0.5 * (old[v] + avg);
        }
        passes += 1;
        bad = detect_inverted_cells(&deformed(&u), &s);
    }
    (u, RepairReport { passes, initial, remaining: bad })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionStep {
    pub step: usize,
    pub factor: f64,
    pub cg_iterations: usize,
    pub residual: f64,
    pub inverted_before_repair: usize,
    pub repair_passes: usize,
    pub max_aspect: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtensionResult {
    pub mesh: HexMesh,
    pub displacement: Vec<Vec3>,
    pub trace: Vec<ExtensionStep>,
}

/// Extends `surface_disp` (one vector per finest-level boundary vertex, in
/// ascending vertex order) into the finest mesh over `n_steps` elastic
/// solves on the progressively deformed geometry.
pub fn extend_displacement(hierarchy: &HexHierarchy, surface_disp: &[Vec3], cfg: &ElasticExtensionConfig) -> Result<ExtensionResult> {
    extend_mesh(hierarchy.finest(), surface_disp, cfg)
}

/// [`extend_displacement`] on a single mesh.
pub fn extend_mesh(mesh: &HexMesh, surface_disp: &[Vec3], cfg: &ElasticExtensionConfig) -> Result<ExtensionResult> {
    cfg.validate()?;
    let boundary = mesh.boundary_vertices();
    if surface_disp.len() != boundary.len() {
        return Err(Error::invalid(format!(
            "surface displacement has {} vectors for {} boundary vertices",
            surface_disp.len(),
            boundary.len()
        )));
    }
    let fixed = mesh.boundary_vertex_flags();
    let n = mesh.vertices.len();
    let mut u = vec![Vec3::zeros(); n];
    let mut trace = Vec::with_capacity(cfg.n_steps);
    let s = SampleSet::default();
    let mut remaining = Vec::new();
    for step in 1..=cfg.n_steps {
        let (f0, f1) = (boundary_schedule(step - 1, cfg.n_steps), boundary_schedule(step, cfg.n_steps));
        let current = mesh.with_vertices(mesh.vertices.iter().zip(&u).map(|(x, d)| x + d).collect());
        let mut dirichlet = vec![None; n];
        for (&v, d) in boundary.iter().zip(surface_disp) {
            dirichlet[v] = Some((f1 - f0) * d);
        }
        let sol = solve_elastic_step(&current, &dirichlet, &young_modulus(&current), cfg)?;
        for (a, b) in u.iter_mut().zip(&sol.displacement) {
            *a += b;
        }
        // Boundary data is imposed, not accumulated, so no drift builds up.
        for (&v, d) in boundary.iter().zip(surface_disp) {
            u[v] = f1 * d;
        }
        let (repaired, report) = repair_inversions(mesh, &u, &fixed, cfg.repair_passes);
        u = repaired;
        let deformed = mesh.with_vertices(mesh.vertices.iter().zip(&u).map(|(x, d)| x + d).collect());
        let max_aspect = (0..deformed.cells.len())
            .map(|c| aspect_ratio_unsigned(&deformed.cell_vertices(c), &s, f64::INFINITY))
            .fold(1.0, f64::max);
        trace.push(ExtensionStep {
            step,
            factor: f1,
            cg_iterations: sol.iterations,
            residual: sol.residual,
            inverted_before_repair: report.initial.len(),
            repair_passes: report.passes,
            max_aspect,
        });
        remaining = report.remaining;
    }
    if !remaining.is_empty() {
        return Err(Error::InvalidVolumeMesh(format!("{} cells remain inverted after extension", remaining.len())));
    }
    let displaced = mesh.with_vertices(mesh.vertices.iter().zip(&u).map(|(x, d)| x + d).collect());
    Ok(ExtensionResult { mesh: displaced, displacement: u, trace })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationResult {
    pub hierarchy: HexHierarchy,
    /// Smoothing trace per level, coarsest first; empty without smoothing.
    pub traces: Vec<Vec<SmoothingRecord>>,
}

/// Applies a finest-level displacement to every level; coarse levels take
/// their vertices' displacements from the finest level. With `smoothing`,
/// each level is smoothed coarsest first over its boundary-free vertices not
/// inherited from the level below, and the result is inherited upward.
pub fn propagate_hierarchy(hierarchy: &HexHierarchy, finest_disp: &[Vec3], smoothing: Option<&SmoothingConfig>) -> Result<PropagationResult> {
    hierarchy.check_shared_vertices()?;
    let fine = hierarchy.finest();
    if finest_disp.len() != fine.vertices.len() {
        return Err(Error::invalid("displacement does not match the finest level"));
    }
    let mut levels: Vec<HexMesh> = Vec::with_capacity(hierarchy.levels.len());
    let mut traces = Vec::new();
    for (k, level) in hierarchy.levels.iter().enumerate() {
        let n = level.vertices.len();
        let mut verts: Vec<Vec3> = level.vertices.iter().zip(&finest_disp[..n]).map(|(x, d)| x + d).collect();
        let inherited = levels.last().map_or(0, |m: &HexMesh| m.vertices.len());
        if let Some(prev) = levels.last() {
            verts[..inherited].copy_from_slice(&prev.vertices);
        }
        let mut mesh = level.with_vertices(verts);
        if let Some(cfg) = smoothing {
            let mut fixed = hierarchy.boundary_flags[k].clone();
            fixed[..inherited].iter_mut().for_each(|f| *f = true);
            let out = smooth_aspect_ratio_masked(&mesh, &fixed, cfg)?;
            mesh = out.mesh;
            traces.push(out.trace);
        }
        levels.push(mesh);
    }
    let out = HexHierarchy { levels, parent_maps: hierarchy.parent_maps.clone(), boundary_flags: hierarchy.boundary_flags.clone() };
    out.check_shared_vertices()?;
    Ok(PropagationResult { hierarchy: out, traces })
}
