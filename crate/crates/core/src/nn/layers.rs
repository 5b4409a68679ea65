use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Real;

fn uniform<T: Real, R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)))
}

/// `y = x W + b`, weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            &format!("{name}.weight"),
            uniform(fan_in, fan_out, bound, rng),
        );
        let bias =
            bias.then(|| store.add(&format!("{name}.bias"), uniform(1, fan_out, bound, rng)));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Gated recurrent unit with reset, update and candidate blocks stacked
/// column-wise in that order.
#[derive(Debug, Clone)]
pub struct Gru {
    pub hidden: usize,
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
}

impl Gru {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            hidden,
            wx: store.add(
                &format!("{name}.wx"),
                uniform(input, 3 * hidden, bound, rng),
            ),
            wh: store.add(
                &format!("{name}.wh"),
                uniform(hidden, 3 * hidden, bound, rng),
            ),
            bx: store.add(&format!("{name}.bx"), uniform(1, 3 * hidden, bound, rng)),
            bh: store.add(&format!("{name}.bh"), uniform(1, 3 * hidden, bound, rng)),
        }
    }

    pub fn step<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (wx, wh, bx, bh) = (
            tape.param(store, self.wx),
            tape.param(store, self.wh),
            tape.param(store, self.bx),
            tape.param(store, self.bh),
        );
        let gx = tape.matmul(x, wx);
        let gx = tape.add_row(gx, bx);
        let gh = tape.matmul(h, wh);
        let gh = tape.add_row(gh, bh);

        let xr = tape.slice_cols(gx, 0, 2 * hd);
        let hr = tape.slice_cols(gh, 0, 2 * hd);
        let rz = tape.add(xr, hr);
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, hd);
        let z = tape.slice_cols(rz, hd, 2 * hd);

        let xn = tape.slice_cols(gx, 2 * hd, 3 * hd);
        let hn = tape.slice_cols(gh, 2 * hd, 3 * hd);
        let rn = tape.mul(r, hn);
        let n = tape.add(xn, rn);
        let n = tape.tanh(n);

        // h' = (1 - z) n + z h = n + z (h - n)
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        tape.add(n, zd)
    }

    /// Roll over a sequence of `[rows x input]` steps from a zero state.
    pub fn run<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, xs: &[Var]) -> Var {
        let rows = tape.value(xs[0]).nrows();
        let mut h = tape.constant(Array2::zeros((rows, self.hidden)));
        for &x in xs {
            h = self.step(tape, store, x, h);
        }
        h
    }
}

/// Residual message-passing round:
/// `h' = h + relu(h W_self + b + (A h) W_nbr)` with `A` supplied by the caller.
#[derive(Debug, Clone)]
pub struct MessagePassing {
    pub self_lin: Linear,
    pub nbr_lin: Linear,
}

impl MessagePassing {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_lin: Linear::new(store, &format!("{name}.self"), hidden, hidden, true, rng),
            nbr_lin: Linear::new(store, &format!("{name}.nbr"), hidden, hidden, false, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        adj: Var,
    ) -> Var {
        let agg = tape.graph_mix(adj, h);
        let s = self.self_lin.forward(tape, store, h);
        let m = self.nbr_lin.forward(tape, store, agg);
        let u = tape.add(s, m);
        let u = tape.relu(u);
        tape.add(h, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gru_step_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let gru = Gru::new(&mut store, "g", 2, 3, &mut rng);
        let x = Array2::from_shape_vec((1, 2), vec![0.4, -0.7]).unwrap();
        let h0 = Array2::from_shape_vec((1, 3), vec![0.1, -0.2, 0.3]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h0.clone());
        let out = gru.step(&mut tape, &store, xv, hv);
        let out = tape.value(out).clone();

        let (wx, wh) = (store.value(gru.wx), store.value(gru.wh));
        let (bx, bh) = (store.value(gru.bx), store.value(gru.bh));
        let lin = |k: usize, from_x: bool| -> f64 {
            if from_x {
                (0..2).map(|i| x[[0, i]] * wx[[i, k]]).sum::<f64>() + bx[[0, k]]
            } else {
                (0..3).map(|i| h0[[0, i]] * wh[[i, k]]).sum::<f64>() + bh[[0, k]]
            }
        };
        for j in 0..3 {
            let r = sig(lin(j, true) + lin(j, false));
            let z = sig(lin(3 + j, true) + lin(3 + j, false));
            let n = (lin(6 + j, true) + r * lin(6 + j, false)).tanh();
            let expected = (1.0 - z) * n + z * h0[[0, j]];
            assert!((out[[0, j]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn message_passing_with_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let mp = MessagePassing::new(&mut store, "mp", 4, &mut rng);
        for id in 0..store.len() {
            store.value_mut(id).fill(0.0);
        }
        let h = Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 1.0);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let adj = tape.constant(Array2::ones((3, 3)));
        let out = mp.forward(&mut tape, &store, hv, adj);
        assert_eq!(tape.value(out), &h);
    }
}
