//! Small dense networks, the Adam optimizer and a plateau learning-rate
//! schedule.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    pub fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Affine layer `x ↦ x W + b` acting on row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`.
    pub weight: Array2<f64>,
    /// `1 x out`.
    pub bias: Array2<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((n_in, n_out), |_| rng.random_range(-a..a)),
            bias: Array2::zeros((1, n_out)),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense { weight: Array2::zeros((n_in, n_out)), bias: Array2::zeros((1, n_out)) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// Layer widths `sizes = [in, h1, ..., out]`. With `zero_output` the last
    /// layer starts at zero, so the network is initially the zero map.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, zero_output: bool, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                if zero_output && l + 1 == n {
                    Dense::zeros(sizes[l], sizes[l + 1])
                } else {
                    Dense::new(sizes[l], sizes[l + 1], rng)
                }
            })
            .collect();
        Mlp { layers, hidden, output }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in the order `[W0, b0, W1, b1, ...]`.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn act(&self, l: usize) -> Activation {
        if l + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            self.act(l).apply(&mut h);
        }
        h
    }

    /// Records the parameters on `tape`, in [`Mlp::params`] order.
    pub fn record_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Var {
        let mut h = x;
        for l in 0..self.layers.len() {
            let z = tape.matmul(h, params[2 * l]);
            let z = tape.add_row(z, params[2 * l + 1]);
            h = self.act(l).record(tape, z);
        }
        h
    }

    /// Forward pass plus the input Jacobian in forward mode: returns the
    /// output and, for every input coordinate `k`, the `n x out` matrix of
    /// `∂ output / ∂ x_k`. Only tanh and identity activations are supported.
    pub fn forward_with_jacobian_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> (Var, Vec<Var>) {
        let n = tape.value(x).nrows();
        let mut h = x;
        let mut dh: Vec<Option<Var>> = vec![None; self.n_in()];
        for l in 0..self.layers.len() {
            let (w, b) = (params[2 * l], params[2 * l + 1]);
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            let mut dz: Vec<Var> = (0..dh.len())
                .map(|k| match dh[k] {
                    // d(x W)/dx_k at the first layer is row k of W, the same for every node.
                    None => {
                        let row = tape.select_row(w, k);
                        tape.broadcast_rows(row, n)
                    }
                    Some(d) => tape.matmul(d, w),
                })
                .collect();
            let act = self.act(l);
            h = act.record(tape, z);
            match act {
                Activation::Identity => {}
                Activation::Tanh => {
                    let sq = tape.square(h);
                    let neg = tape.scale(sq, -1.0);
                    let deriv = tape.add_scalar(neg, 1.0);
                    for d in &mut dz {
                        *d = tape.mul(deriv, *d);
                    }
                }
                Activation::Relu => panic!("input Jacobian requires smooth activations"),
            }
            dh = dz.into_iter().map(Some).collect();
        }
        (h, dh.into_iter().map(|d| d.expect("at least one layer")).collect())
    }

    /// Input Jacobian `∂ out_i / ∂ x_k` at each row of `x`, without a tape.
    pub fn input_jacobian(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let n = x.nrows();
        let mut h = x.clone();
        let mut dh: Vec<Array2<f64>> = (0..self.n_in())
            .map(|k| {
                let mut e = Array2::zeros((n, self.n_in()));
                e.column_mut(k).fill(1.0);
                e
            })
            .collect();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            for d in &mut dh {
                *d = d.dot(&layer.weight);
            }
            match self.act(l) {
                Activation::Identity => {}
                Activation::Tanh => {
                    h.mapv_inplace(f64::tanh);
                    let deriv = h.mapv(|y| 1.0 - y * y);
                    for d in &mut dh {
                        *d *= &deriv;
                    }
                }
                Activation::Relu => {
                    let mask = h.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
                    h.mapv_inplace(|v| v.max(0.0));
                    for d in &mut dh {
                        *d *= &mask;
                    }
                }
            }
        }
        dh
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Halves (by `factor`) the learning rate after `patience` epochs without
/// improvement of the monitored loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Plateau { patience, factor, best: f64::INFINITY, wait: 0 }
    }

    /// Feeds one epoch loss; returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            lr
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.wait = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

/// Column-wise concatenation of row-major `[x, y, z]` points.
pub fn points_to_array(points: &[crate::mesh::Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

pub fn array_to_points(a: &Array2<f64>) -> Vec<crate::mesh::Vec3> {
    a.axis_iter(Axis(0)).map(|r| crate::mesh::Vec3::new(r[0], r[1], r[2])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_input(n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_output_layer_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[3, 8, 3], Activation::Tanh, Activation::Identity, true, &mut rng);
        assert!(m.forward(&sample_input(5, 3)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(&[3, 6, 5, 2], Activation::Relu, Activation::Tanh, false, &mut rng);
        let x = sample_input(7, 3);
        let mut t = Tape::new();
        let p = m.record_params(&mut t);
        let xv = t.leaf(x.clone());
        let y = m.forward_tape(&mut t, xv, &p);
        assert_eq!(t.value(y), &m.forward(&x));
    }

    #[test]
    fn forward_mode_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mlp::new(&[3, 5, 5, 3], Activation::Tanh, Activation::Identity, false, &mut rng);
        let x = sample_input(4, 3);
        let mut t = Tape::new();
        let p = m.record_params(&mut t);
        let xv = t.leaf(x.clone());
        let (_, jac) = m.forward_with_jacobian_tape(&mut t, xv, &p);
        let plain = m.input_jacobian(&x);
        let h = 1e-6;
        for k in 0..3 {
            assert!((t.value(jac[k]) - &plain[k]).iter().all(|d| d.abs() < 1e-14));
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.column_mut(k).mapv_inplace(|v| v + h);
            xm.column_mut(k).mapv_inplace(|v| v - h);
            let fd = (m.forward(&xp) - m.forward(&xm)) / (2.0 * h);
            assert!((&fd - t.value(jac[k])).iter().all(|d| d.abs() < 1e-8));
        }
    }

    #[test]
    fn gradient_penalty_weights_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mlp::new(&[3, 6, 6, 3], Activation::Tanh, Activation::Identity, false, &mut rng);
        let x = sample_input(6, 3);
        let eval = |m: &Mlp, t: &mut Tape| {
            let p = m.record_params(t);
            let xv = t.leaf(x.clone());
            let (y, jac) = m.forward_with_jacobian_tape(t, xv, &p);
            let mut total = t.sum(y);
            for j in jac {
                let sq = t.square(j);
                let s = t.mean(sq);
                total = t.add(total, s);
            }
            (p, total)
        };
        let mut t = Tape::new();
        let (p, out) = eval(&m, &mut t);
        let g = t.backward(out);
        let analytic: Vec<_> = p.iter().map(|&v| g.get(v)).collect();
        let mut params: Vec<Array2<f64>> = m.params().into_iter().cloned().collect();
        let err = max_rel_error(&mut params, &analytic, 1e-6, 1e-4, |ps| {
            let mut mm = m.clone();
            for (dst, src) in mm.params_mut().into_iter().zip(ps) {
                dst.assign(src);
            }
            let mut t = Tape::new();
            let (_, o) = eval(&mm, &mut t);
            t.scalar(o)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn adam_with_zero_lr_leaves_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Mlp::new(&[3, 4, 3], Activation::Tanh, Activation::Identity, false, &mut rng);
        let before = m.clone();
        let grads: Vec<_> = m.params().iter().map(|p| p.mapv(|_| 0.3)).collect();
        let mut opt = Adam::new(0.0);
        opt.step(m.params_mut(), &grads);
        assert_eq!(m, before);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Array2::from_elem((1, 2), 3.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = &p * 2.0;
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = Plateau::new(3, 0.5);
        let mut lr = 1.0;
        for loss in [5.0, 4.0, 4.0, 4.0, 4.0] {
            lr = s.observe(loss, lr);
        }
        assert_eq!(lr, 0.5);
    }
}
