use nalgebra::Matrix3;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::io::Document;
use crate::mesh::{BoundingBox, Vec3};
use crate::nn::{array_to_points, Activation, Mlp};

/// Fixed-point tolerance and iteration cap for inverting one residual step.
const INVERSE_TOL: f64 = 1e-14;
const INVERSE_MAX_ITERS: usize = 100;

/// Discrete LDDMM flow built from `L` residual steps
/// `x ↦ x + (1/L)·v_l(x)`. Each step net acts on coordinates normalised by
/// the box `U`: `x̃ = (x − c)/s` with `c` the box centre and `s` its largest
/// half-extent, and `v_l(x) = s·w_l(x̃)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeFlow {
    pub step_nets: Vec<Mlp>,
    pub bbox: BoundingBox,
    pub lambda_fid: f64,
    pub lambda_grad: f64,
    pub seed: u64,
}

impl Document for TimeFlow {
    const SCHEMA: &'static str = "timeflow-v1";

    fn validate_doc(&self) -> Result<()> {
        if self.step_nets.is_empty() {
            return Err(Error::Schema("timeflow needs at least one step".into()));
        }
        if self.step_nets.iter().any(|n| n.n_in() != 3 || n.n_out() != 3) {
            return Err(Error::Schema("step nets must map R^3 to R^3".into()));
        }
        if !(self.scale() > 0.0) {
            return Err(Error::Schema("degenerate bounding box".into()));
        }
        Ok(())
    }
}

impl TimeFlow {
    /// `n_steps` tanh networks with the given hidden widths, output layers
    /// at zero (identity flow).
    pub fn new(n_steps: usize, hidden: &[usize], bbox: BoundingBox, lambda_fid: f64, lambda_grad: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![3];
        sizes.extend_from_slice(hidden);
        sizes.push(3);
        let step_nets = (0..n_steps.max(1))
            .map(|_| Mlp::new(&sizes, Activation::Tanh, Activation::Identity, true, &mut rng))
            .collect();
        TimeFlow { step_nets, bbox, lambda_fid, lambda_grad, seed }
    }

    /// Flow whose step `l` has the constant physical velocity `velocities[l]`.
    pub fn constant(velocities: &[Vec3], bbox: BoundingBox) -> Self {
        let mut f = TimeFlow::new(velocities.len(), &[4], bbox, 1.0, 0.0, 0);
        let s = f.scale();
        for (net, v) in f.step_nets.iter_mut().zip(velocities) {
            let out = net.layers.last_mut().unwrap();
            for k in 0..3 {
                out.bias[[0, k]] = v[k] / s;
            }
        }
        f
    }

    pub fn n_steps(&self) -> usize {
        self.step_nets.len()
    }

    pub fn n_params(&self) -> usize {
        self.step_nets.iter().map(Mlp::n_params).sum()
    }

    pub fn center(&self) -> Vec3 {
        self.bbox.center()
    }

    /// Largest half-extent of the box.
    pub fn scale(&self) -> f64 {
        0.5 * (self.bbox.max - self.bbox.min).max()
    }

    pub fn normalize(&self, points: &[Vec3]) -> Array2<f64> {
        let (c, s) = (self.center(), self.scale());
        Array2::from_shape_fn((points.len(), 3), |(i, k)| (points[i][k] - c[k]) / s)
    }

    pub fn denormalize(&self, a: &Array2<f64>) -> Vec<Vec3> {
        let (c, s) = (self.center(), self.scale());
        array_to_points(a).into_iter().map(|p| p * s + c).collect()
    }

    /// Physical velocity of step `l` at the given points.
    pub fn step_velocity(&self, l: usize, points: &[Vec3]) -> Vec<Vec3> {
        let w = self.step_nets[l].forward(&self.normalize(points));
        let s = self.scale();
        array_to_points(&w).into_iter().map(|v| v * s).collect()
    }

    fn step_norm(&self, l: usize, x: &Array2<f64>, frac: f64) -> Array2<f64> {
        let inv_l = frac / self.n_steps() as f64;
        x + &(self.step_nets[l].forward(x) * inv_l)
    }

    /// Number of full steps and the fraction of the next one covered by time `t`.
    pub fn split_time(&self, t: f64) -> (usize, f64) {
        let l = self.n_steps();
        let tl = t.clamp(0.0, 1.0) * l as f64;
        let r = tl.round();
        // Grid times are evaluated exactly despite rounding in `t * L`.
        if (tl - r).abs() <= 1e-12 * l as f64 {
            return (r as usize, 0.0);
        }
        let full = tl.floor();
        (full as usize, tl - full)
    }

    /// One step (or a fraction of one) on physical points; a zero network
    /// leaves the points bit-identical.
    pub(crate) fn step_phys(&self, l: usize, x: &[Vec3], frac: f64) -> Vec<Vec3> {
        let c = frac * self.scale() / self.n_steps() as f64;
        let w = array_to_points(&self.step_nets[l].forward(&self.normalize(x)));
        x.iter().zip(w).map(|(p, v)| p + c * v).collect()
    }

    /// `φ_t`: the first `⌊tL⌋` steps and a linearly scaled partial step.
    pub fn forward(&self, points: &[Vec3], t: f64) -> Vec<Vec3> {
        let (full, frac) = self.split_time(t);
        let mut x = points.to_vec();
        for l in 0..full {
            x = self.step_phys(l, &x, 1.0);
        }
        if frac > 0.0 {
            x = self.step_phys(full, &x, frac);
        }
        x
    }

    /// States `x_0, ..., x_L` at the grid times `l/L`.
    pub fn trajectory(&self, points: &[Vec3]) -> Vec<Vec<Vec3>> {
        let mut out = vec![points.to_vec()];
        for l in 0..self.n_steps() {
            let next = self.step_phys(l, out.last().unwrap(), 1.0);
            out.push(next);
        }
        out
    }

    /// Inverse of one (possibly partial) step by fixed-point iteration
    /// `x ← y − (frac/L)·v_l(x)`.
    fn invert_step(&self, l: usize, y: &[Vec3], frac: f64) -> Vec<Vec3> {
        let c = frac * self.scale() / self.n_steps() as f64;
        let tol = INVERSE_TOL * self.scale();
        let mut x = y.to_vec();
        for _ in 0..INVERSE_MAX_ITERS {
            let w = array_to_points(&self.step_nets[l].forward(&self.normalize(&x)));
            let next: Vec<Vec3> = y.iter().zip(w).map(|(p, v)| p - c * v).collect();
            let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs().max()).fold(0.0f64, f64::max);
            x = next;
            if change <= tol {
                break;
            }
        }
        x
    }

    /// `φ_t⁻¹`: undoes the steps of [`TimeFlow::forward`] in reverse order.
    pub fn backward(&self, points: &[Vec3], t: f64) -> Vec<Vec3> {
        let (full, frac) = self.split_time(t);
        let mut x = points.to_vec();
        if frac > 0.0 {
            x = self.invert_step(full, &x, frac);
        }
        for l in (0..full).rev() {
            x = self.invert_step(l, &x, 1.0);
        }
        x
    }

    /// Spatial Jacobian of step `l` (`I + (1/L)∇w_l`) at a physical point by
    /// central finite differences in normalised coordinates.
    pub fn step_jacobian_fd(&self, l: usize, p: &Vec3, h: f64) -> Matrix3<f64> {
        let x = self.normalize(std::slice::from_ref(p));
        let mut j = Matrix3::zeros();
        for k in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[0, k]] += h;
            xm[[0, k]] -= h;
            let d = (self.step_norm(l, &xp, 1.0) - self.step_norm(l, &xm, 1.0)) / (2.0 * h);
            for i in 0..3 {
                j[(i, k)] = d[[0, i]];
            }
        }
        j
    }
}

/// A posteriori invertibility diagnostics of a flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityReport {
    /// Largest `‖φ₁⁻¹(φ₁(p)) − p‖` over the probes (length units).
    pub max_round_trip: f64,
    /// Smallest step Jacobian determinant along the probe trajectories.
    pub min_step_det: f64,
}

/// Round-trip error and finite-difference step Jacobians at `probes`.
pub fn check_invertibility(flow: &TimeFlow, probes: &[Vec3]) -> InvertibilityReport {
    let there = flow.forward(probes, 1.0);
    let back = flow.backward(&there, 1.0);
    let max_round_trip = probes.iter().zip(&back).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    let traj = flow.trajectory(probes);
    let mut min_step_det = f64::INFINITY;
    for l in 0..flow.n_steps() {
        for p in &traj[l] {
            min_step_det = min_step_det.min(flow.step_jacobian_fd(l, p, 1e-6).determinant());
        }
    }
    InvertibilityReport { max_round_trip, min_step_det }
}

/// Pairwise `L²` distance between registration maps:
/// `d_ij = sqrt(mean_x ‖φ₁^i(x) − φ₁^j(x)‖²)` over the probe points.
pub fn similarity_matrix(flows: &[TimeFlow], probes: &[Vec3]) -> Result<Vec<Vec<f64>>> {
    if flows.len() < 2 {
        return Err(Error::invalid("similarity matrix needs at least two flows"));
    }
    if probes.is_empty() {
        return Err(Error::invalid("similarity matrix needs probe points"));
    }
    let mapped: Vec<Vec<Vec3>> = flows.iter().map(|f| f.forward(probes, 1.0)).collect();
    let n = flows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let ms = mapped[i].iter().zip(&mapped[j]).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()
                / probes.len() as f64;
            d[i][j] = ms.sqrt();
            d[j][i] = d[i][j];
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::io::{from_json_str, to_json_string};

    fn unit_box() -> BoundingBox {
        BoundingBox { min: Vec3::repeat(-1.0), max: Vec3::repeat(1.0) }
    }

    fn points() -> Vec<Vec3> {
        (0..20).map(|i| Vec3::new((i as f64 * 0.37).sin(), (i as f64 * 0.71).cos(), 0.05 * i as f64 - 0.5)).collect()
    }

    #[test]
    fn constant_flow_translates() {
        let v = Vec3::new(0.3, -0.2, 0.1);
        let f = TimeFlow::constant(&[v; 5], unit_box());
        for (p, q) in points().iter().zip(f.forward(&points(), 1.0)) {
            assert!((q - p - v).norm() < 1e-15);
        }
    }

    #[test]
    fn two_step_hand_composition() {
        let f = TimeFlow::constant(&[Vec3::x(), Vec3::y()], unit_box());
        let p = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(f.forward(&[p], 1.0)[0], p + Vec3::new(0.5, 0.5, 0.0));
        assert_eq!(f.forward(&[p], 0.25)[0], p + Vec3::new(0.25, 0.0, 0.0));
    }

    #[test]
    fn time_zero_is_identity() {
        let mut f = TimeFlow::new(4, &[8, 8], unit_box(), 1.0, 0.1, 3);
        f.step_nets[0].layers[2].bias[[0, 1]] = 1.0;
        assert_eq!(f.forward(&points(), 0.0), points());
    }

    #[test]
    fn grid_times_are_exact_steps() {
        let f = TimeFlow::new(3, &[4], unit_box(), 1.0, 0.1, 3);
        assert_eq!(f.split_time(1.0 / 3.0), (1, 0.0));
        assert_eq!(f.split_time(2.0 / 3.0), (2, 0.0));
        assert_eq!(f.split_time(1.0), (3, 0.0));
        let (full, frac) = f.split_time(0.5);
        assert_eq!(full, 1);
        assert!((frac - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_flow_round_trip_is_zero_and_constant_is_tiny() {
        let f = TimeFlow::new(4, &[8], unit_box(), 1.0, 0.1, 3);
        let r = check_invertibility(&f, &points());
        assert_eq!(r.max_round_trip, 0.0);
        assert!((r.min_step_det - 1.0).abs() < 1e-9);
        let c = TimeFlow::constant(&[Vec3::new(0.2, 0.1, -0.3); 4], unit_box());
        assert!(check_invertibility(&c, &points()).max_round_trip <= 1e-12);
    }

    #[test]
    fn folding_step_reports_negative_determinant() {
        // w(x̃) = -3·L·x̃ along x collapses and flips the x axis in one step.
        let mut f = TimeFlow::new(1, &[3], unit_box(), 1.0, 0.0, 0);
        let net = &mut f.step_nets[0];
        net.layers[0].weight.fill(0.0);
        net.layers[0].weight[[0, 0]] = 0.01;
        net.layers[1].weight.fill(0.0);
        net.layers[1].weight[[0, 0]] = -300.0;
        let r = check_invertibility(&f, &[Vec3::new(0.1, 0.0, 0.0)]);
        assert!(r.min_step_det <= 0.0);
    }

    #[test]
    fn similarity_of_translations() {
        let vs = [Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.2, 0.0), Vec3::new(0.1, 0.2, 0.3)];
        let flows: Vec<TimeFlow> = vs.iter().map(|v| TimeFlow::constant(&[*v; 2], unit_box())).collect();
        let d = similarity_matrix(&flows, &points()).unwrap();
        for i in 0..3 {
            assert_eq!(d[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(d[i][j], d[j][i]);
                assert!((d[i][j] - (vs[i] - vs[j]).norm()).abs() < 1e-12);
            }
        }
        assert!(similarity_matrix(&flows[..1], &points()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = TimeFlow::new(3, &[5, 5], unit_box(), 2.0, 0.3, 17);
        let back: TimeFlow = from_json_str(&to_json_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
