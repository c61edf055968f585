use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::io::Document;
use crate::mesh::{knn_graph, BoundingBox, CenterlineEncoding, Vec3};
use crate::nn::{array_to_points, Activation, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftNetConfig {
    /// Fourier frequencies `1, 2, ..., 2^{n_f−1}`.
    pub n_f: usize,
    pub n_cntrl: usize,
    /// Time-encoding and conditioning width `d`; `4·n_cntrl` when unset.
    pub d: Option<usize>,
    pub head_width: usize,
    /// Per-node trunk widths; message passing acts at the first width.
    pub trunk: Vec<usize>,
    pub message_passing: usize,
    pub k: usize,
    /// Template box growth before mapping positions to `[0,1]³`.
    pub margin: f64,
    pub seed: u64,
}

impl Default for DriftNetConfig {
    fn default() -> Self {
        DriftNetConfig {
            n_f: 8,
            n_cntrl: 1,
            d: None,
            head_width: 128,
            trunk: vec![64, 64],
            message_passing: 0,
            k: 12,
            margin: 1.5,
            seed: 0,
        }
    }
}

impl DriftNetConfig {
    pub fn dim(&self) -> usize {
        self.d.unwrap_or(4 * self.n_cntrl)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.n_f == 0 || self.n_cntrl == 0 || self.head_width == 0 || self.trunk.is_empty() || self.trunk.contains(&0) {
            return Err(Error::invalid("drift net widths must be positive"));
        }
        if d == 0 || d % 2 != 0 {
            return Err(Error::invalid("time-encoding width d must be even and positive"));
        }
        if self.message_passing > 10 {
            return Err(Error::invalid("at most 10 message-passing rounds"));
        }
        if !(self.margin >= 1.0) {
            return Err(Error::invalid("position margin must be at least 1"));
        }
        Ok(())
    }
}

/// `[cos(v⊗x), sin(v⊗x)]` with `v = 1, 2, ..., 2^{n_f−1}`, positions given
/// in `[0,1]³`. Row width `3·n_f·2`; column `j·3 + k` of each half uses
/// frequency `2^j` on coordinate `k`.
pub fn fourier_features(unit_points: &[Vec3], n_f: usize) -> Array2<f64> {
    let w = 3 * n_f;
    let mut out = Array2::zeros((unit_points.len(), 2 * w));
    for (i, p) in unit_points.iter().enumerate() {
        for j in 0..n_f {
            let v = (1u64 << j) as f64;
            for k in 0..3 {
                let a = v * p[k];
                out[[i, j * 3 + k]] = a.cos();
                out[[i, w + j * 3 + k]] = a.sin();
            }
        }
    }
    out
}

/// `[sin(ω_0 t), cos(ω_0 t), ..., sin(ω_{d/2−1} t), cos(ω_{d/2−1} t)]` with
/// `ω_i = exp(−ln(10000)·2i/d)`.
pub fn time_encoding(t: f64, d: usize) -> Vec<f64> {
    (0..d / 2)
        .flat_map(|i| {
            let w = (-(10000f64.ln()) * (2 * i) as f64 / d as f64).exp();
            [(w * t).sin(), (w * t).cos()]
        })
        .collect()
}

/// Drift network `b(I_t, t, c)`: per-node Fourier position features, a
/// time head and a conditioning head are concatenated and fed through a
/// per-node trunk with optional kNN message passing. Output rows are
/// physical velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftNet {
    pub config: DriftNetConfig,
    pub time_head: Mlp,
    pub cond_head: Mlp,
    pub trunk_in: Mlp,
    pub rounds: Vec<Mlp>,
    pub trunk_out: Mlp,
    pub center: Vec3,
    /// Half-width of the cube mapped onto `[0,1]³`.
    pub half_width: f64,
    /// Output scale: the template's largest half-extent.
    pub out_scale: f64,
    /// Per-feature affine normalisation of the flattened condition.
    pub cond_shift: Vec<f64>,
    pub cond_scale: Vec<f64>,
    pub cond_fitted: bool,
    /// Template kNN graph, present when message passing is enabled.
    pub graph: Option<Arc<Vec<Vec<usize>>>>,
    pub loss_trace: Vec<f64>,
}

impl Document for DriftNet {
    const SCHEMA: &'static str = "driftnet-v1";

    fn validate_doc(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::Schema(e.to_string()))?;
        let d = self.config.dim();
        let e = 6 * self.config.n_f;
        let h0 = self.config.trunk[0];
        let shapes_ok = self.time_head.n_in() == d
            && self.time_head.n_out() == e
            && self.cond_head.n_in() == d
            && self.cond_head.n_out() == e
            && self.trunk_in.n_in() == 3 * e
            && self.trunk_in.n_out() == h0
            && self.rounds.len() == self.config.message_passing
            && self.rounds.iter().all(|r| r.n_in() == h0 && r.n_out() == h0)
            && self.trunk_out.n_in() == h0
            && self.trunk_out.n_out() == 3
            && self.cond_shift.len() == d
            && self.cond_scale.len() == d;
        if !shapes_ok {
            return Err(Error::Schema("drift net layer shapes do not match its config".into()));
        }
        if self.config.message_passing > 0 && self.graph.is_none() {
            return Err(Error::Schema("message passing needs the template graph".into()));
        }
        Ok(())
    }
}

impl DriftNet {
    /// Fresh network for a template point set. The final layer starts at
    /// zero, so the untrained drift vanishes.
    pub fn new(config: DriftNetConfig, template_points: &[Vec3]) -> Result<Self> {
        config.validate()?;
        if template_points.is_empty() {
            return Err(Error::InsufficientPoints { needed: 1, got: 0 });
        }
        let bbox = BoundingBox::from_points(template_points);
        let ext = (bbox.max - bbox.min) * 0.5;
        let out_scale = ext.max();
        if !(out_scale > 0.0) {
            return Err(Error::invalid("template points are all coincident"));
        }
        let graph = if config.message_passing > 0 {
            Some(Arc::new(knn_graph(template_points, config.k)?))
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim();
        let e = 6 * config.n_f;
        let h0 = config.trunk[0];
        let head = |rng: &mut ChaCha8Rng| Mlp::new(&[d, config.head_width, e], Activation::Relu, Activation::Tanh, false, rng);
        let time_head = head(&mut rng);
        let cond_head = head(&mut rng);
        let trunk_in = Mlp::new(&[3 * e, h0], Activation::Tanh, Activation::Tanh, false, &mut rng);
        let rounds = (0..config.message_passing)
            .map(|_| Mlp::new(&[h0, h0], Activation::Tanh, Activation::Tanh, false, &mut rng))
            .collect();
        let mut sizes = config.trunk.clone();
        sizes.push(3);
        let trunk_out = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, true, &mut rng);
        Ok(DriftNet {
            time_head,
            cond_head,
            trunk_in,
            rounds,
            trunk_out,
            center: bbox.center(),
            half_width: out_scale * config.margin,
            out_scale,
            cond_shift: vec![0.0; d],
            cond_scale: vec![1.0; d],
            cond_fitted: false,
            graph,
            loss_trace: Vec::new(),
            config,
        })
    }

    fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.time_head, &self.cond_head, &self.trunk_in];
        v.extend(self.rounds.iter());
        v.push(&self.trunk_out);
        v
    }

    pub fn n_params(&self) -> usize {
        self.mlps().iter().map(|m| m.n_params()).sum()
    }

    /// All weights: time head, condition head, trunk input, message-passing
    /// rounds, trunk output; `[W, b]` per layer.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.mlps().into_iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.time_head.params_mut();
        v.extend(self.cond_head.params_mut());
        v.extend(self.trunk_in.params_mut());
        for r in &mut self.rounds {
            v.extend(r.params_mut());
        }
        v.extend(self.trunk_out.params_mut());
        v
    }

    pub fn record_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Standardises each flattened condition feature over `conditions`.
    pub fn fit_condition_normalizer(&mut self, conditions: &[&CenterlineEncoding]) -> Result<()> {
        let rows: Vec<Vec<f64>> = conditions.iter().map(|c| self.raw_condition(c)).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(Error::invalid("no conditions to fit"));
        }
        let n = rows.len() as f64;
        for j in 0..self.config.dim() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.cond_shift[j] = mean;
            self.cond_scale[j] = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
        }
        self.cond_fitted = true;
        Ok(())
    }

    /// Flattened condition, zero-padded or truncated to `d`.
    fn raw_condition(&self, c: &CenterlineEncoding) -> Result<Vec<f64>> {
        if c.n_cntrl() != self.config.n_cntrl {
            return Err(Error::invalid(format!(
                "condition has {} control points, the drift net expects {}",
                c.n_cntrl(),
                self.config.n_cntrl
            )));
        }
        let mut f = c.flatten();
        f.resize(self.config.dim(), 0.0);
        Ok(f)
    }

    fn condition_row(&self, c: &CenterlineEncoding) -> Result<Array2<f64>> {
        let f = self.raw_condition(c)?;
        Ok(Array2::from_shape_fn((1, f.len()), |(_, j)| (f[j] - self.cond_shift[j]) / self.cond_scale[j]))
    }

    fn unit_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        let off = Vec3::repeat(0.5);
        points.iter().map(|p| (p - self.center) / (2.0 * self.half_width) + off).collect()
    }

    /// Records `b(points, t, c)` (an `n x 3` physical velocity) on `tape`
    /// from parameter leaves in [`DriftNet::params`] order.
    pub fn record(&self, tape: &mut Tape, params: &[Var], points: &[Vec3], t: f64, cond: &CenterlineEncoding) -> Result<Var> {
        let n = points.len();
        if let Some(g) = &self.graph {
            if g.len() != n {
                return Err(Error::invalid("message passing needs the template point count"));
            }
        }
        let d = self.config.dim();
        let c = self.condition_row(cond)?;
        let te = time_encoding(t, d);
        let te = tape.leaf(Array2::from_shape_vec((1, d), te).expect("shape"));
        let c = tape.leaf(c);
        let pos = tape.leaf(fourier_features(&self.unit_points(points), self.config.n_f));

        let mut offset = 0;
        let mut take = |m: &Mlp| {
            let k = 2 * m.layers.len();
            let p = &params[offset..offset + k];
            offset += k;
            p
        };
        let tp = take(&self.time_head);
        let cp = take(&self.cond_head);
        let ip = take(&self.trunk_in);
        let rp: Vec<&[Var]> = self.rounds.iter().map(&mut take).collect();
        let op = take(&self.trunk_out);

        let th = self.time_head.forward_tape(tape, te, tp);
        let th = tape.broadcast_rows(th, n);
        let ch = self.cond_head.forward_tape(tape, c, cp);
        let ch = tape.broadcast_rows(ch, n);
        let x = tape.concat_cols(&[pos, th, ch]);
        let mut h = self.trunk_in.forward_tape(tape, x, ip);
        for (round, p) in self.rounds.iter().zip(rp) {
            let agg = tape.mean_aggregate(h, self.graph.clone().expect("validated"));
            let upd = round.forward_tape(tape, agg, p);
            h = tape.add(h, upd);
        }
        let out = self.trunk_out.forward_tape(tape, h, op);
        Ok(tape.scale(out, self.out_scale))
    }

    /// Drift at the given points.
    pub fn drift(&self, points: &[Vec3], t: f64, cond: &CenterlineEncoding) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let p = self.record_params(&mut tape);
        let b = self.record(&mut tape, &p, points, t, cond)?;
        Ok(array_to_points(tape.value(b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::max_rel_error;
    use crate::mesh::generate::icosphere;
    use crate::nn::points_to_array;

    fn cond(n: usize, s: f64) -> CenterlineEncoding {
        CenterlineEncoding::new(
            (0..n).map(|i| Vec3::new(i as f64 * s, 0.5 * s, -0.2 * i as f64)).collect(),
            (0..n).map(|i| 0.3 + 0.1 * i as f64 * s).collect(),
        )
        .unwrap()
    }

    fn small(mp: usize) -> DriftNetConfig {
        DriftNetConfig { n_f: 2, n_cntrl: 1, head_width: 4, trunk: vec![5, 4], message_passing: mp, k: 3, seed: 4, ..Default::default() }
    }

    #[test]
    fn time_encoding_frequencies() {
        let d = 8;
        let te = time_encoding(1.0, d);
        assert_eq!(te.len(), d);
        // ω_0 = 1
        assert_eq!(te[0], 1f64.sin());
        assert_eq!(te[1], 1f64.cos());
        for i in 0..d / 2 {
            let w = 10000f64.powf(-((2 * i) as f64) / d as f64);
            assert!((te[2 * i] - w.sin()).abs() < 1e-15);
        }
        assert!(time_encoding(0.0, d).chunks(2).all(|p| p == [0.0, 1.0]));
    }

    #[test]
    fn fourier_feature_layout() {
        let f = fourier_features(&[Vec3::new(0.1, 0.2, 0.3)], 3);
        assert_eq!(f.dim(), (1, 18));
        assert_eq!(f[[0, 0]], 0.1f64.cos());
        assert_eq!(f[[0, 2 * 3 + 1]], (4.0 * 0.2f64).cos());
        assert_eq!(f[[0, 9 + 3 + 2]], (2.0 * 0.3f64).sin());
    }

    #[test]
    fn untrained_net_is_zero_and_checks_condition_size() {
        let tpl = icosphere(1, 1.0);
        let net = DriftNet::new(DriftNetConfig { n_cntrl: 2, ..Default::default() }, &tpl.vertices).unwrap();
        let b = net.drift(&tpl.vertices, 0.3, &cond(2, 1.0)).unwrap();
        assert!(b.iter().all(|v| *v == Vec3::zeros()));
        assert!(net.drift(&tpl.vertices, 0.3, &cond(3, 1.0)).is_err());
        // d larger than 4·n_cntrl pads with zeros
        let padded = DriftNet::new(DriftNetConfig { n_cntrl: 2, d: Some(12), ..Default::default() }, &tpl.vertices).unwrap();
        assert!(padded.drift(&tpl.vertices, 0.3, &cond(2, 1.0)).is_ok());
    }

    fn perturb(net: &mut DriftNet) {
        // Move the zero output layer off zero so every head gets a gradient.
        for (i, p) in net.trunk_out.params_mut().into_iter().enumerate() {
            p.mapv_inplace(|_| 0.1 * ((i + 1) as f64).sin());
            let n = p.len();
            for (j, v) in p.iter_mut().enumerate() {
                *v += 0.05 * ((j * 7 + n) as f64).cos();
            }
        }
    }

    fn gradient_check(mp: usize) {
        let pts: Vec<Vec3> = (0..6).map(|i| Vec3::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), 0.2 * i as f64)).collect();
        let mut net = DriftNet::new(small(mp), &pts).unwrap();
        perturb(&mut net);
        assert!(net.n_params() <= 500, "{}", net.n_params());
        let c = cond(1, 1.0);
        let u = points_to_array(&pts.iter().map(|p| p * 0.3).collect::<Vec<_>>());
        let (t, mut params): (f64, Vec<Array2<f64>>) = (0.37, net.params().into_iter().cloned().collect());
        let loss_of = |net: &DriftNet, tape: &mut Tape, p: &[Var]| {
            let b = net.record(tape, p, &pts, t, &c).unwrap();
            let u = tape.leaf(u.clone());
            tape.sum_squared_error(b, u)
        };
        let mut tape = Tape::new();
        let p = net.record_params(&mut tape);
        let l = loss_of(&net, &mut tape, &p);
        let g = tape.backward(l);
        let analytic: Vec<Array2<f64>> = p.iter().map(|&v| g.get(v)).collect();
        let err = max_rel_error(&mut params, &analytic, 1e-6, 1e-6, |ps| {
            let mut tape = Tape::new();
            let p: Vec<Var> = ps.iter().map(|a| tape.leaf(a.clone())).collect();
            let l = loss_of(&net, &mut tape, &p);
            tape.scalar(l)
        });
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_dense_trunk() {
        gradient_check(0);
    }

    #[test]
    fn gradients_match_finite_differences_with_message_passing() {
        gradient_check(2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let tpl = icosphere(1, 1.0);
        let mut net = DriftNet::new(DriftNetConfig { message_passing: 1, ..Default::default() }, &tpl.vertices).unwrap();
        perturb(&mut net);
        net.loss_trace = vec![1.5, 0.25];
        let s = crate::mesh::io::to_json_string(&net).unwrap();
        let back: DriftNet = crate::mesh::io::from_json_str(&s).unwrap();
        assert_eq!(back, net);
        let c = cond(1, 1.0);
        assert_eq!(back.drift(&tpl.vertices, 0.5, &c).unwrap(), net.drift(&tpl.vertices, 0.5, &c).unwrap());
    }
}
