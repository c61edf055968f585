//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Values are
//! `rows x cols` matrices; per-node rows usually index mesh vertices and
//! columns features. [`Tape::backward`] accumulates gradients of a `1 x 1`
//! output in reverse recording order, so the reduction order is fixed and
//! results are bit-reproducible.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    BroadcastRows(Var),
    SelectRow(Var, usize),
    MeanAggregate(Var, Arc<Vec<Vec<usize>>>),
    /// Scalar function of the input with a precomputed gradient.
    Custom(Var, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one output with respect to every recorded variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Array2<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + 1ᵀ·row`: adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ (a - b)²` as a `1 x 1` value.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.sum(sq)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "broadcast_rows expects a single row");
        let v = row.broadcast((rows, row.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let v = self.value(a).slice(s![row..row + 1, ..]).to_owned();
        self.push(v, Op::SelectRow(a, row))
    }

    /// Row `i` of the result is the mean of the rows `graph[i]` of `a`.
    pub fn mean_aggregate(&mut self, a: Var, graph: Arc<Vec<Vec<usize>>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((graph.len(), x.ncols()));
        for (i, nbrs) in graph.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / nbrs.len() as f64;
            let mut row = v.row_mut(i);
            for &j in nbrs {
                row.scaled_add(w, &x.row(j));
            }
        }
        self.push(v, Op::MeanAggregate(a, graph))
    }

    /// Records a scalar `value` of `a` whose gradient with respect to `a` is `grad`.
    pub fn custom_scalar(&mut self, a: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.value(a).dim(), "custom gradient shape");
        self.push(Array2::from_elem((1, 1), value), Op::Custom(a, grad))
    }

    /// Reverse sweep from the `1 x 1` value `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let n = out.0 + 1;
        let shapes = self.nodes.iter().map(|nd| nd.value.dim()).collect();
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| *g *= x.cos());
                    acc(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| *g *= -x.sin());
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| *g *= 2.0 * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::SelectRow(a, row) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.row_mut(*row).assign(&g.row(0));
                    acc(&mut grads, *a, ga);
                }
                Op::MeanAggregate(a, graph) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, nbrs) in graph.iter().enumerate() {
                        if nbrs.is_empty() {
                            continue;
                        }
                        let w = 1.0 / nbrs.len() as f64;
                        for &j in nbrs {
                            ga.row_mut(j).scaled_add(w, &g.row(i));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Custom(a, grad) => acc(&mut grads, *a, grad * g[[0, 0]]),
            }
        }
        Gradients { grads, shapes }
    }
}

#[cfg(test)]
pub(crate) mod check {
    //! Central finite-difference gradient checks shared by module tests.

    use ndarray::Array2;

    /// Largest relative error `|g - fd| / max(|fd|, floor)` over all entries.
    pub fn max_rel_error(
        params: &mut [Array2<f64>],
        analytic: &[Array2<f64>],
        h: f64,
        floor: f64,
        mut f: impl FnMut(&[Array2<f64>]) -> f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        for p in 0..params.len() {
            for idx in 0..params[p].len() {
                let orig = params[p].as_slice().unwrap()[idx];
                params[p].as_slice_mut().unwrap()[idx] = orig + h;
                let fp = f(params);
                params[p].as_slice_mut().unwrap()[idx] = orig - h;
                let fm = f(params);
                params[p].as_slice_mut().unwrap()[idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let g = analytic[p].as_standard_layout().as_slice().unwrap()[idx];
                worst = worst.max((g - fd).abs() / fd.abs().max(floor));
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_and_sum() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(array![[1.0], [1.0]]);
        let c = t.matmul(a, b);
        let s = t.sum(c);
        assert_eq!(t.scalar(s), 10.0);
        let g = t.backward(s);
        assert_eq!(g.get(a), array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(g.get(b), array![[4.0], [6.0]]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let graph = Arc::new(vec![vec![1, 2], vec![0], vec![0, 1, 3], vec![2]]);
        let mut params = vec![
            random(&mut rng, 4, 3),
            random(&mut rng, 3, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 1, 2),
        ];
        let build = |t: &mut Tape, p: &[Array2<f64>]| {
            let x = t.leaf(p[0].clone());
            let w = t.leaf(p[1].clone());
            let b = t.leaf(p[2].clone());
            let e = t.leaf(p[3].clone());
            let h = t.matmul(x, w);
            let h = t.add_row(h, b);
            let h1 = t.tanh(h);
            let h2 = t.relu(h);
            let h3 = t.sin(h);
            let h4 = t.cos(h);
            let m = t.mul(h1, h3);
            let m = t.add(m, h2);
            let m = t.sub(m, h4);
            let m = t.scale(m, 0.7);
            let m = t.add_scalar(m, 0.3);
            let agg = t.mean_aggregate(m, graph.clone());
            let eb = t.broadcast_rows(e, 4);
            let cat = t.concat_cols(&[agg, eb]);
            let r = t.select_row(cat, 2);
            let sq = t.square(cat);
            let s1 = t.mean(sq);
            let s2 = t.sum(r);
            let total = t.add(s1, s2);
            let val = t.value(x).sum();
            let cx = t.custom_scalar(x, val * val, Array2::from_elem((4, 3), 2.0 * val));
            t.add(total, cx)
        };
        let mut t = Tape::new();
        let out = build(&mut t, &params);
        // Leaves are the first `Var`s recorded, in order.
        let g = t.backward(out);
        let analytic: Vec<_> = (0..4).map(|i| g.get(Var(i))).collect();
        let err = check::max_rel_error(&mut params, &analytic, 1e-6, 1e-3, |p| {
            let mut t = Tape::new();
            let o = build(&mut t, p);
            t.scalar(o)
        });
        assert!(err < 1e-5, "relative error {err}");
    }
}
