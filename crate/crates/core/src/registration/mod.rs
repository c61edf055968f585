//! Chamfer-based LDDMM registration with residual time steps.

mod chamfer;
mod flow;
mod transport;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{KdTree, SurfaceMesh, Vec3};
use crate::nn::{array_to_points, Adam};

pub use chamfer::{chamfer, chamfer_rms, chamfer_with_grad};
pub use flow::{check_invertibility, similarity_matrix, InvertibilityReport, TimeFlow};
pub use transport::{transport_field, Direction, TransportedField};

/// One stage of the multilevel schedule: a vertex fraction used until
/// (excluding) epoch `until_epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub fraction: f64,
    pub until_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub n_steps: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub lambda_fid: f64,
    pub lambda_grad: f64,
    /// Stages in increasing epoch order; the last `until_epoch` is the
    /// total epoch count.
    pub levels: Vec<Level>,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            n_steps: 10,
            hidden: vec![32, 32],
            lr: 1e-3,
            lambda_fid: 1.0,
            lambda_grad: 0.1,
            levels: vec![
                Level { fraction: 0.25, until_epoch: 3000 },
                Level { fraction: 0.5, until_epoch: 4000 },
                Level { fraction: 1.0, until_epoch: 5000 },
            ],
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("registration needs n_steps >= 1 and nonzero hidden widths"));
        }
        if !(self.lr >= 0.0) || !(self.lambda_fid >= 0.0) || !(self.lambda_grad >= 0.0) {
            return Err(Error::invalid("registration rates and weights must be non-negative"));
        }
        let mut prev = 0;
        for lv in &self.levels {
            if !(lv.fraction > 0.0 && lv.fraction <= 1.0) || lv.until_epoch < prev {
                return Err(Error::invalid("levels need fractions in (0, 1] and increasing epochs"));
            }
            prev = lv.until_epoch;
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.levels.last().map_or(0, |l| l.until_epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub flow: TimeFlow,
    pub initial_chamfer: f64,
    pub final_chamfer: f64,
    pub energy_trace: Vec<f64>,
    pub invertibility: InvertibilityReport,
}

/// Energy terms recorded on a tape for a flow, in physical units:
/// `(1/L)Σ_l [mean‖v_l‖² + λ_grad·mean‖∇w_l‖²_F] + λ_fid·chamfer(φ₁(S), T)`.
struct EnergyTape {
    total: Var,
    params: Vec<Vec<Var>>,
    #[cfg_attr(not(test), allow(dead_code))]
    end: Var,
}

/// `source` and `target` are in the flow's normalised coordinates; `tree`
/// indexes `target`.
fn record_energy(flow: &TimeFlow, tape: &mut Tape, source: &Array2<f64>, target: &[Vec3], tree: &KdTree) -> EnergyTape {
    let l_steps = flow.n_steps() as f64;
    let s = flow.scale();
    let n = source.nrows() as f64;
    let mut x = tape.leaf(source.clone());
    let mut params = Vec::with_capacity(flow.n_steps());
    let mut kinetic: Option<Var> = None;
    for net in &flow.step_nets {
        let p = net.record_params(tape);
        let (w, jac) = net.forward_with_jacobian_tape(tape, x, &p);
        let sq = tape.square(w);
        let mut term = tape.sum(sq);
        term = tape.scale(term, s * s / n);
        if flow.lambda_grad != 0.0 {
            for j in jac {
                let sq = tape.square(j);
                let g = tape.sum(sq);
                let g = tape.scale(g, flow.lambda_grad / n);
                term = tape.add(term, g);
            }
        }
        term = tape.scale(term, 1.0 / l_steps);
        kinetic = Some(match kinetic {
            None => term,
            Some(k) => tape.add(k, term),
        });
        let step = tape.scale(w, 1.0 / l_steps);
        x = tape.add(x, step);
        params.push(p);
    }
    // Chamfer on normalised coordinates, rescaled to physical units.
    let end = array_to_points(tape.value(x));
    let (ch, grad) = chamfer_with_grad(&end, target, tree);
    let c = flow.lambda_fid * s * s;
    let grad_norm = Array2::from_shape_fn((end.len(), 3), |(i, k)| grad[i][k] * c);
    let fid = tape.custom_scalar(x, c * ch, grad_norm);
    let total = tape.add(kinetic.expect("at least one step"), fid);
    EnergyTape { total, params, end: x }
}

/// LDDMM energy of `flow` between two point sets.
pub fn lddmm_energy_points(flow: &TimeFlow, source: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("energy needs nonempty source and target"));
    }
    let tgt = normalized_points(flow, target);
    let mut tape = Tape::new();
    let e = record_energy(flow, &mut tape, &flow.normalize(source), &tgt, &KdTree::new(&tgt));
    Ok(tape.scalar(e.total))
}

pub fn lddmm_energy(flow: &TimeFlow, source: &SurfaceMesh, target: &SurfaceMesh) -> Result<f64> {
    lddmm_energy_points(flow, &source.vertices, &target.vertices)
}

/// Energy and its gradient with respect to every step-net parameter, in
/// [`crate::nn::Mlp::params`] order per step.
pub fn lddmm_energy_grad(flow: &TimeFlow, source: &[Vec3], target: &[Vec3]) -> Result<(f64, Vec<Vec<Array2<f64>>>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("energy needs nonempty source and target"));
    }
    let tgt = normalized_points(flow, target);
    let mut tape = Tape::new();
    let e = record_energy(flow, &mut tape, &flow.normalize(source), &tgt, &KdTree::new(&tgt));
    let mut g = tape.backward(e.total);
    let grads = e.params.iter().map(|p| p.iter().map(|&v| g.take(v)).collect()).collect();
    Ok((tape.scalar(e.total), grads))
}

fn normalized_points(flow: &TimeFlow, points: &[Vec3]) -> Vec<Vec3> {
    array_to_points(&flow.normalize(points))
}

/// Nested subsets: the first `ceil(f·n)` entries of one seeded permutation.
fn subset_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn take_fraction(points: &[Vec3], order: &[usize], fraction: f64) -> Vec<Vec3> {
    let k = ((fraction * points.len() as f64).ceil() as usize).clamp(1, points.len());
    let mut idx = order[..k].to_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Minimises the Chamfer-augmented LDDMM energy with Adam under the
/// multilevel vertex schedule. The flow lives in the source bounding box.
pub fn register(source: &SurfaceMesh, target: &SurfaceMesh, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    register_points(&source.vertices, &target.vertices, cfg)
}

pub fn register_points(source: &[Vec3], target: &[Vec3], cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("registration needs nonempty source and target"));
    }
    let bbox = crate::mesh::BoundingBox::from_points(source);
    let mut flow = TimeFlow::new(cfg.n_steps, &cfg.hidden, bbox, cfg.lambda_fid, cfg.lambda_grad, cfg.seed);
    if !(flow.scale() > 0.0) {
        return Err(Error::invalid("source points span a degenerate box"));
    }
    let initial_chamfer = chamfer(source, target)?;
    // Same seed for both sides: equal-size point sets get matching subsets.
    let subset_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let src_order = subset_order(source.len(), &mut ChaCha8Rng::seed_from_u64(subset_seed));
    let tgt_order = subset_order(target.len(), &mut ChaCha8Rng::seed_from_u64(subset_seed));

    let mut opt = Adam::new(cfg.lr);
    let mut energy_trace = Vec::with_capacity(cfg.epochs());
    let mut epoch = 0;
    for level in &cfg.levels {
        let src = take_fraction(source, &src_order, level.fraction);
        let tgt = normalized_points(&flow, &take_fraction(target, &tgt_order, level.fraction));
        let src_norm = flow.normalize(&src);
        let tree = KdTree::new(&tgt);
        while epoch < level.until_epoch {
            let mut tape = Tape::new();
            let e = record_energy(&flow, &mut tape, &src_norm, &tgt, &tree);
            let energy = tape.scalar(e.total);
            if !energy.is_finite() {
                return Err(Error::NonFinite(format!("registration energy at epoch {epoch}")));
            }
            energy_trace.push(energy);
            let mut g = tape.backward(e.total);
            let grads: Vec<Array2<f64>> = e.params.iter().flatten().map(|&v| g.take(v)).collect();
            let params = flow.step_nets.iter_mut().flat_map(|n| n.params_mut()).collect();
            opt.step(params, &grads);
            epoch += 1;
        }
    }
    let mapped = flow.forward(source, 1.0);
    let final_chamfer = chamfer(&mapped, target)?;
    let invertibility = check_invertibility(&flow, source);
    Ok(RegistrationResult { flow, initial_chamfer, final_chamfer, energy_trace, invertibility })
}

/// Registers `template` to every target concurrently; results keep input order.
pub fn register_many(template: &[Vec3], targets: &[Vec<Vec3>], cfg: &RegistrationConfig) -> Vec<Result<RegistrationResult>> {
    targets.par_iter().map(|t| register_points(template, t, cfg)).collect()
}

/// End state of the source under the recorded flow (normalised), for tests.
#[cfg(test)]
fn end_state(flow: &TimeFlow, source: &[Vec3], target: &[Vec3]) -> Vec<Vec3> {
    let tgt = normalized_points(flow, target);
    let mut tape = Tape::new();
    let e = record_energy(flow, &mut tape, &flow.normalize(source), &tgt, &KdTree::new(&tgt));
    array_to_points(tape.value(e.end))
}
