use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    RowScale(Var, Array1<T>),
    GraphMix {
        adj: Var,
        x: Var,
    },
    StraightThrough {
        phi: Var,
        probs: Array2<T>,
        mask: Array2<T>,
    },
    SumAll(Var),
    Mae(Var, Array2<T>),
    Pinball {
        q: Var,
        y: Array2<T>,
        levels: Vec<T>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that it can be differentiated.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar output with respect to every recorded value.
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant that receives no gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that does receive a gradient (used by gradient checks).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter; repeated calls return the same handle.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Add a `[1 x c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a) + self.value(bias);
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Repeat each row `reps` times consecutively: row `i` lands at
    /// `i*reps .. (i+1)*reps`. Turns per-node parameters into node-major rows.
    pub fn repeat_rows(&mut self, a: Var, reps: usize) -> Var {
        let v = self.value(a);
        let (r, c) = v.dim();
        let out = Array2::from_shape_fn((r * reps, c), |(k, j)| v[[k / reps, j]]);
        let ng = self.ng(a);
        self.push(out, Op::RepeatRows(a, reps), ng)
    }

    /// Multiply row `i` by the constant `scale[i]`.
    pub fn row_scale(&mut self, a: Var, scale: Array1<T>) -> Var {
        let out = self.value(a) * &scale.view().insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::RowScale(a, scale), ng)
    }

    /// `out[i*B + b] = sum_j adj[i, j] * x[j*B + b]` for node-major `x`.
    pub fn graph_mix(&mut self, adj: Var, x: Var) -> Var {
        let n = self.value(adj).nrows();
        let xv = self.value(x);
        let (rows, h) = xv.dim();
        assert_eq!(rows % n, 0, "rows not a multiple of node count");
        let flat = node_view(xv, n);
        let out = self
            .value(adj)
            .dot(&flat)
            .into_shape((rows, h))
            .expect("contiguous product");
        let ng = self.ng(adj) || self.ng(x);
        self.push(out, Op::GraphMix { adj, x }, ng)
    }

    /// Forward value `hard` (`[N x N]`), backward routed through the row
    /// softmax `probs` of `phi` (`[N x (N+D)]`) on entries where `mask` is one.
    /// Dummy columns (`>= N`) always receive the normalization gradient.
    pub fn straight_through(
        &mut self,
        phi: Var,
        hard: Array2<T>,
        probs: Array2<T>,
        mask: Array2<T>,
    ) -> Var {
        assert_eq!(hard.dim(), mask.dim());
        assert_eq!(probs.dim(), self.value(phi).dim());
        let ng = self.ng(phi);
        self.push(hard, Op::StraightThrough { phi, probs, mask }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, pred: Var, target: Array2<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        let n = T::from_usize(p.len()).unwrap();
        let total: T = Zip::from(p)
            .and(&target)
            .fold(T::zero(), |acc, &a, &b| acc + (a - b).abs());
        let ng = self.ng(pred);
        self.push(
            Array2::from_elem((1, 1), total / n),
            Op::Mae(pred, target),
            ng,
        )
    }

    /// Pinball loss averaged over rows and levels: column `k` of `q` is the
    /// prediction at `levels[k]`, `y` is `[rows x 1]`.
    pub fn pinball(&mut self, q: Var, y: Array2<T>, levels: &[T]) -> Var {
        let qv = self.value(q);
        assert_eq!(qv.ncols(), levels.len());
        assert_eq!(y.dim(), (qv.nrows(), 1));
        let mut total = T::zero();
        for (row, yr) in qv.outer_iter().zip(y.outer_iter()) {
            for (&qh, &a) in row.iter().zip(levels) {
                total += crate::relqn::pinball_loss(qh, yr[0], a);
            }
        }
        let n = T::from_usize(qv.len()).unwrap();
        let ng = self.ng(q);
        self.push(
            Array2::from_elem((1, 1), total / n),
            Op::Pinball {
                q,
                y,
                levels: levels.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a `[1 x 1]` output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        for k in (0..=out.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[k] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let mut acc = |v: Var, d: Array2<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.ng(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Sigmoid(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * y * (T::one() - y));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * (T::one() - y * y));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = Zip::from(g).and(&node.value).map_collect(|&g, &y| {
                    if y > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                });
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::RepeatRows(a, reps) => {
                let (r, c) = self.value(*a).dim();
                let d = g
                    .view()
                    .into_shape((r, *reps, c))
                    .expect("repeat layout")
                    .sum_axis(Axis(1));
                acc(*a, d);
            }
            Op::RowScale(a, scale) => acc(*a, g * &scale.view().insert_axis(Axis(1))),
            Op::GraphMix { adj, x } => {
                let av = self.value(*adj);
                let n = av.nrows();
                let gflat = node_view(g, n);
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let d = av
                        .t()
                        .dot(&gflat)
                        .into_shape(xv.dim())
                        .expect("contiguous product");
                    acc(*x, d);
                }
                if self.ng(*adj) {
                    let xflat = node_view(self.value(*x), n);
                    acc(*adj, gflat.dot(&xflat.t()));
                }
            }
            Op::StraightThrough { phi, probs, mask } => {
                let n = mask.nrows();
                let width = probs.ncols();
                let mut gp = Array2::zeros((n, width));
                gp.slice_mut(s![.., ..n]).assign(&(g * mask));
                let mut d = Array2::zeros((n, width));
                for i in 0..n {
                    let p = probs.row(i);
                    let gi = gp.row(i);
                    let dot: T = p.iter().zip(gi.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..width {
                        let m = if j < n { mask[[i, j]] } else { T::one() };
                        d[[i, j]] = m * p[j] * (gi[j] - dot);
                    }
                }
                acc(*phi, d);
            }
            Op::SumAll(a) => {
                let dim = self.value(*a).dim();
                acc(*a, Array2::from_elem(dim, g[[0, 0]]));
            }
            Op::Mae(pred, target) => {
                let p = self.value(*pred);
                let scale = g[[0, 0]] / T::from_usize(p.len()).unwrap();
                let d = Zip::from(p).and(target).map_collect(|&a, &b| {
                    let e = a - b;
                    if e > T::zero() {
                        scale
                    } else if e < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                acc(*pred, d);
            }
            Op::Pinball { q, y, levels } => {
                let qv = self.value(*q);
                let scale = g[[0, 0]] / T::from_usize(qv.len()).unwrap();
                let mut d = Array2::zeros(qv.dim());
                for ((mut drow, qrow), yr) in
                    d.outer_iter_mut().zip(qv.outer_iter()).zip(y.outer_iter())
                {
                    for ((dk, &qh), &a) in drow.iter_mut().zip(qrow.iter()).zip(levels) {
                        *dk = if qh >= yr[0] {
                            (T::one() - a) * scale
                        } else {
                            -a * scale
                        };
                    }
                }
                acc(*q, d);
            }
        }
    }
}

/// View node-major `[N*B x h]` rows as `[N x (B*h)]`.
fn node_view<T: Real>(x: &Array2<T>, n: usize) -> ndarray::ArrayView2<'_, T> {
    let (rows, h) = x.dim();
    x.view()
        .into_shape((n, rows / n * h))
        .expect("node-major arrays are contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x`.
    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Array2<f64>) {
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let out = build(&mut tape, v);
        let out = tape.sum_all(out);
        let analytic = tape.backward(out).wrt(v).unwrap().clone();
        let numeric = numeric_grad(
            |z| {
                let mut t = Tape::new();
                let v = t.input(z.clone());
                let o = build(&mut t, v);
                t.value(o).sum()
            },
            &x,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() < 1e-6 * (1.0 + n.abs()),
                "{analytic} vs {numeric}"
            );
        }
    }

    fn sample() -> Array2<f64> {
        array![
            [0.3, -1.2, 0.7],
            [1.5, 0.1, -0.4],
            [-0.9, 0.8, 0.25],
            [0.6, -0.3, 1.1]
        ]
    }

    #[test]
    fn elementwise_gradients() {
        check(|t, v| t.sigmoid(v), sample());
        check(|t, v| t.tanh(v), sample());
        check(|t, v| t.relu(v), sample());
        check(|t, v| t.scale(v, -2.5), sample());
        check(|t, v| t.mul(v, v), sample());
        check(
            |t, v| {
                let s = t.sigmoid(v);
                t.sub(s, v)
            },
            sample(),
        );
    }

    #[test]
    fn structural_gradients() {
        let w = array![[0.2, -0.5], [1.0, 0.3], [-0.7, 0.9]];
        check(
            move |t, v| {
                let w = t.constant(w.clone());
                let p = t.matmul(v, w);
                t.tanh(p)
            },
            sample(),
        );
        check(
            |t, v| {
                let a = t.slice_cols(v, 1, 3);
                let b = t.slice_cols(v, 0, 1);
                let c = t.concat_cols(&[a, b, a]);
                t.mul(c, c)
            },
            sample(),
        );
        check(
            |t, v| {
                let r = t.repeat_rows(v, 3);
                t.tanh(r)
            },
            sample(),
        );
        check(
            |t, v| {
                let b = t.slice_cols(v, 0, 3);
                let row = t.constant(array![[1.0, 2.0, 3.0]]);
                let x = t.add_row(b, row);
                t.mul(x, x)
            },
            sample(),
        );
        check(
            |t, v| {
                let x = t.row_scale(v, array![1.0, -2.0, 0.5, 3.0]);
                t.tanh(x)
            },
            sample(),
        );
    }

    #[test]
    fn bias_gradient_sums_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(sample());
        let b = tape.input(array![[0.1, 0.2, 0.3]]);
        let y = tape.add_row(x, b);
        let y = tape.mul(y, y);
        let out = tape.sum_all(y);
        let g = tape.backward(out).wrt(b).unwrap().clone();
        let expected = (sample() + &array![[0.1, 0.2, 0.3]]).sum_axis(Axis(0)) * 2.0;
        for (a, e) in g.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_mix_matches_per_node_sum_and_gradients() {
        // 2 nodes, batch 2, width 3: rows are (n0,b0), (n0,b1), (n1,b0), (n1,b1)
        let adj = array![[0.5, 2.0], [-1.0, 0.0]];
        let x = sample();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(adj.clone());
        let xv = tape.constant(x.clone());
        let y = tape.graph_mix(a, xv);
        let y = tape.value(y);
        for i in 0..2 {
            for b in 0..2 {
                for c in 0..3 {
                    let e: f64 = (0..2).map(|j| adj[[i, j]] * x[[j * 2 + b, c]]).sum();
                    assert!((y[[i * 2 + b, c]] - e).abs() < 1e-12);
                }
            }
        }
        let adj2 = adj.clone();
        check(
            move |t, v| {
                let a = t.constant(adj2.clone());
                let m = t.graph_mix(a, v);
                t.tanh(m)
            },
            x.clone(),
        );
        check(
            move |t, v| {
                let xv = t.constant(x.clone());
                let m = t.graph_mix(v, xv);
                t.tanh(m)
            },
            adj,
        );
    }

    #[test]
    fn losses_and_gradients() {
        let target = array![
            [0.0, 1.0, 0.5],
            [2.0, -1.0, 0.3],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0]
        ];
        let mut tape = Tape::<f64>::new();
        let p = tape.input(sample());
        let l = tape.mae(p, target.clone());
        let expected = (&sample() - &target).mapv(f64::abs).mean().unwrap();
        assert!((tape.value(l)[[0, 0]] - expected).abs() < 1e-12);
        check(move |t, v| t.mae(v, target.clone()), sample());

        let y = array![[0.2], [0.0], [-0.5], [1.0]];
        let levels = [0.1, 0.5, 0.9];
        check(move |t, v| t.pinball(v, y.clone(), &levels), sample());
    }

    #[test]
    fn frozen_params_and_constants_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", array![[1.0, 2.0]]);
        let b = store.add("b", array![[3.0, 4.0]]);
        store.set_trainable(b, false);
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        assert_eq!(tape.param(&store, a), va);
        let y = tape.mul(va, vb);
        let out = tape.sum_all(y);
        let g = tape.backward(out);
        assert_eq!(g.param(a).unwrap(), &array![[3.0, 4.0]]);
        assert!(g.param(b).is_none());
    }
}
