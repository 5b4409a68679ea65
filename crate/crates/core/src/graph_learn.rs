//! Latent graph over the series: edge scores `phi` (`N x (N + D)`, the last
//! `D` columns being dummy nodes), Gumbel-TopK sampling of K-NN graphs and
//! the straight-through adjacency used during training.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Real, Tape, Var};

/// A sampled graph together with the softmax it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph<T> {
    /// Binary `N x N`, row `i` marks the neighbours node `i` aggregates from.
    pub hard: Array2<T>,
    /// Row softmax of the scores with self edges masked, `N x (N + D)`.
    pub probs: Array2<T>,
    /// Selected columns per row, including dummies, best first.
    pub selected: Vec<Vec<usize>>,
}

impl<T: Real> SampledGraph<T> {
    pub fn num_nodes(&self) -> usize {
        self.hard.nrows()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.hard
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&v| v != T::zero()).count())
            .collect()
    }
}

/// Row softmax of `phi` with the self-edge entry `(i, i)` excluded.
pub fn row_softmax<T: Real>(phi: ArrayView2<'_, T>) -> Array2<T> {
    let (n, width) = phi.dim();
    let mut out = Array2::zeros((n, width));
    for i in 0..n {
        let row = phi.row(i);
        let max = (0..width)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for j in (0..width).filter(|&j| j != i) {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            total += e;
        }
        out.row_mut(i).mapv_inplace(|v| v / total);
    }
    out
}

/// Standard Gumbel draw `-ln(-ln u)`.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Indices of the `k` largest `scores` (ties to the lowest index), skipping
/// `exclude`. With `rng` the scores are perturbed by Gumbel noise, which
/// draws `k` items without replacement from the softmax of `scores`.
pub fn top_k<T: Real, R: Rng>(
    scores: &[T],
    k: usize,
    exclude: Option<usize>,
    rng: Option<&mut R>,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, s)| (s.f64(), j))
        .collect();
    if let Some(rng) = rng {
        for (s, _) in keyed.iter_mut() {
            *s += gumbel(rng);
        }
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Sample a K-NN graph row by row; dummy selections are dropped, so row
/// degrees range over `0..=K`.
pub fn gumbel_topk_sample<T: Real, R: Rng>(
    phi: ArrayView2<'_, T>,
    k: usize,
    rng: &mut R,
    deterministic: bool,
) -> Result<SampledGraph<T>> {
    let (n, width) = phi.dim();
    if width < n {
        return Err(Error::Shape(format!(
            "scores {:?} narrower than square",
            phi.dim()
        )));
    }
    if k == 0 || k > width - 1 {
        return Err(Error::Config(format!(
            "K = {k} outside 1..={} for {n} nodes and {} dummies",
            width - 1,
            width - n
        )));
    }
    let mut hard = Array2::zeros((n, n));
    let mut selected = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<T> = phi.row(i).to_vec();
        let picks = if deterministic {
            top_k::<T, R>(&row, k, Some(i), None)
        } else {
            top_k(&row, k, Some(i), Some(&mut *rng))
        };
        for &j in picks.iter().filter(|&&j| j < n) {
            hard[[i, j]] = T::one();
        }
        selected.push(picks);
    }
    Ok(SampledGraph {
        hard,
        probs: row_softmax(phi),
        selected,
    })
}

/// Entries allowed to pass gradient: the sampled edges plus a fresh uniform
/// `frac` share of the other off-diagonal real entries.
pub fn backward_mask<T: Real, R: Rng>(
    sampled: &SampledGraph<T>,
    frac: f64,
    rng: &mut R,
) -> Array2<T> {
    let n = sampled.num_nodes();
    let mut mask = sampled.hard.clone();
    if frac >= 1.0 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    mask[[i, j]] = T::one();
                }
            }
        }
    } else if frac > 0.0 {
        for i in 0..n {
            for j in 0..n {
                if i != j && mask[[i, j]] == T::zero() && rng.gen::<f64>() < frac {
                    mask[[i, j]] = T::one();
                }
            }
        }
    }
    mask
}

/// Put the sampled graph on the tape: the forward value is the hard
/// adjacency, gradients reach `phi` through the row softmax on masked entries.
pub fn straight_through_adjacency<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    phi: Var,
    sampled: &SampledGraph<T>,
    sparsify_frac: f64,
    rng: &mut R,
) -> Var {
    let mask = backward_mask(sampled, sparsify_frac, rng);
    tape.straight_through(phi, sampled.hard.clone(), sampled.probs.clone(), mask)
}

/// Write the deterministic top-K graph as `source,target,score,probability`
/// (edge `source -> target` means `target` aggregates from `source`).
pub fn export_edge_list<T: Real>(phi: ArrayView2<'_, T>, k: usize, path: &Path) -> Result<()> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let g = gumbel_topk_sample(phi, k, &mut rng, true)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "target", "score", "probability"])?;
    for (i, picks) in g.selected.iter().enumerate() {
        for &j in picks.iter().filter(|&&j| j < g.num_nodes()) {
            w.write_record([
                j.to_string(),
                i.to_string(),
                phi[[i, j]].f64().to_string(),
                g.probs[[i, j]].f64().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn softmax_examples() {
        // one row over 4 candidates: node 0 plus 4 dummy columns, self masked
        let phi: Array2<f64> = array![[9.0, 0.0, 0.0, 0.0, 0.0]];
        let p = row_softmax(phi.view());
        assert_eq!(p[[0, 0]], 0.0);
        for j in 1..5 {
            assert!((p[[0, j]] - 0.25).abs() < 1e-12);
        }
        let phi: Array2<f64> = array![[0.0, 1e6, 0.0, 0.0]];
        let p = row_softmax(phi.view());
        assert!((p[[0, 1]] - 1.0).abs() < 1e-12);
        let phi = array![[0.0, 0.0, 3f64.ln()]];
        let p = row_softmax(phi.view());
        assert!((p[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((p[[0, 2]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let phi: Array2<f64> = Array2::from_shape_fn((6, 9), |_| r.gen_range(-3.0..3.0));
        let p = row_softmax(phi.view());
        for i in 0..6 {
            assert_eq!(p[[i, i]], 0.0);
            assert!((p.row(i).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_top_k() {
        let picks = top_k::<f64, ChaCha8Rng>(&[3.0, 1.0, 2.0], 2, None, None);
        assert_eq!(picks, vec![0, 2]);
        let picks = top_k::<f64, ChaCha8Rng>(&[1.0, 1.0, 1.0, 1.0], 2, Some(0), None);
        assert_eq!(picks, vec![1, 2]);
    }

    #[test]
    fn degrees_without_and_with_dummies() {
        let phi = Array2::<f64>::zeros((3, 3));
        for det in [true, false] {
            let g = gumbel_topk_sample(phi.view(), 2, &mut rng(), det).unwrap();
            assert_eq!(g.degrees(), vec![2, 2, 2]);
            for i in 0..3 {
                assert_eq!(g.hard[[i, i]], 0.0);
            }
        }
        let mut r = rng();
        let phi = Array2::from_shape_fn((5, 9), |_| r.gen_range(-1.0..1.0));
        for _ in 0..20 {
            let g = gumbel_topk_sample(phi.view(), 3, &mut r, false).unwrap();
            assert!(g.degrees().iter().all(|&d| d <= 3));
            assert!(g.hard.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(gumbel_topk_sample(phi.view(), 9, &mut r, true).is_err());
        assert!(gumbel_topk_sample(phi.view(), 8, &mut r, true).is_ok());
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let phi = array![
            [0.0, 2.0, 1.0, -1.0],
            [0.5, 0.0, 0.7, 3.0],
            [1.0, 1.0, 0.0, 0.0]
        ];
        let a = gumbel_topk_sample(phi.view(), 2, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        let b = gumbel_topk_sample(phi.view(), 2, &mut ChaCha8Rng::seed_from_u64(2), true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected[1], vec![3, 2]);
        assert_eq!(a.hard.row(1).to_vec(), vec![0.0, 0.0, 1.0]);
    }

    /// Exact probability that item `j` is among the first two draws without
    /// replacement from softmax weights `w`.
    fn plackett_luce_top2(w: &[f64], j: usize) -> f64 {
        let total: f64 = w.iter().sum();
        let mut p = 0.0;
        for a in 0..w.len() {
            for b in 0..w.len() {
                if a != b && (a == j || b == j) {
                    p += w[a] / total * w[b] / (total - w[a]);
                }
            }
        }
        p
    }

    #[test]
    fn gumbel_top2_matches_plackett_luce() {
        let scores = [0.3, -0.8, 1.2, 0.0];
        let w: Vec<f64> = scores.iter().map(|s: &f64| s.exp()).collect();
        let mut r = rng();
        let draws = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            for j in top_k(&scores, 2, None, Some(&mut r)) {
                counts[j] += 1;
            }
        }
        for j in 0..4 {
            let freq = counts[j] as f64 / draws as f64;
            assert!((freq - plackett_luce_top2(&w, j)).abs() < 0.01, "item {j}");
        }
    }

    #[test]
    fn mask_fractions() {
        let mut r = rng();
        let phi = Array2::from_shape_fn((6, 8), |_| r.gen_range(-1.0..1.0));
        let g = gumbel_topk_sample(phi.view(), 2, &mut r, false).unwrap();
        let full = backward_mask(&g, 1.0, &mut r);
        let none = backward_mask(&g, 0.0, &mut r);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(full[[i, j]], if i == j { 0.0 } else { 1.0 });
                assert_eq!(none[[i, j]], g.hard[[i, j]]);
            }
        }
        let part = backward_mask(&g, 0.5, &mut r);
        assert!(part.iter().zip(g.hard.iter()).all(|(&m, &h)| m >= h));
    }

    /// `f(phi) = sum(mask * softmax(phi)[:, :N] * c)`, the surrogate the
    /// straight-through backward differentiates.
    fn surrogate(phi: &Array2<f64>, mask: &Array2<f64>, c: &Array2<f64>) -> f64 {
        let p = row_softmax(phi.view());
        let n = mask.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += mask[[i, j]] * p[[i, j]] * c[[i, j]];
            }
        }
        s
    }

    #[test]
    fn straight_through_gradient_matches_softmax_surrogate() {
        let mut r = rng();
        let n = 4;
        let phi = Array2::from_shape_fn((n, n), |_| r.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((n, n), |_| r.gen_range(-2.0..2.0));
        for frac in [1.0, 0.3, 0.0] {
            let g = gumbel_topk_sample(phi.view(), 2, &mut r, false).unwrap();
            let mask = backward_mask(&g, frac, &mut r);
            let mut tape = Tape::new();
            let pv = tape.input(phi.clone());
            let a = tape.straight_through(pv, g.hard.clone(), g.probs.clone(), mask.clone());
            assert_eq!(tape.value(a), &g.hard);
            let cv = tape.constant(c.clone());
            let prod = tape.mul(a, cv);
            let loss = tape.sum_all(prod);
            let grad = tape.backward(loss).wrt(pv).unwrap().clone();
            let h = 1e-6;
            for i in 0..n {
                for j in 0..n {
                    if mask[[i, j]] == 0.0 {
                        assert_eq!(grad[[i, j]], 0.0, "unmasked ({i},{j}) got gradient");
                        continue;
                    }
                    let mut up = phi.clone();
                    up[[i, j]] += h;
                    let mut dn = phi.clone();
                    dn[[i, j]] -= h;
                    let fd = (surrogate(&up, &mask, &c) - surrogate(&dn, &mask, &c)) / (2.0 * h);
                    assert!(
                        (grad[[i, j]] - fd).abs() < 1e-7,
                        "({i},{j}) {} vs {fd}",
                        grad[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn edge_list_export() {
        let phi = array![
            [0.0, 2.0, 1.0, 5.0],
            [0.5, 0.0, 0.7, -3.0],
            [1.0, 2.0, 0.0, 0.0]
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        export_edge_list(phi.view(), 2, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "source,target,score,probability");
        // row 0 picks dummy 3 and node 1; row 1 picks 2 and 0; row 2 picks 1 and 0
        assert_eq!(lines.len(), 1 + 5);
        assert!(lines[1].starts_with("1,0,2,"));
    }
}
