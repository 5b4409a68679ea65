//! Prediction intervals and the metrics used to score them.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relqn::QuantileGrid;

/// One interval for one node at one target step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub node: usize,
    pub target_step: usize,
    pub alpha: f64,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Intervals for every node over a run of target steps, stored as
/// `[T' x N]` bound matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
    pub target_steps: Vec<usize>,
    pub alpha: f64,
    /// Set when β-optimization had to fall back to the plain interval.
    pub fallback: bool,
}

impl IntervalSet {
    pub fn new(
        lower: Array2<f64>,
        upper: Array2<f64>,
        target_steps: Vec<usize>,
        alpha: f64,
    ) -> Result<Self> {
        if lower.dim() != upper.dim() || lower.nrows() != target_steps.len() {
            return Err(Error::Shape(format!(
                "bounds {:?}/{:?} for {} steps",
                lower.dim(),
                upper.dim(),
                target_steps.len()
            )));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Numerical("interval with lower > upper".into()));
        }
        Ok(Self {
            lower,
            upper,
            target_steps,
            alpha,
            fallback: false,
        })
    }

    pub fn len(&self) -> usize {
        self.target_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_steps.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.lower.ncols()
    }

    pub fn get(&self, row: usize, node: usize) -> PredictionInterval {
        PredictionInterval {
            lower: self.lower[[row, node]],
            upper: self.upper[[row, node]],
            node,
            target_step: self.target_steps[row],
            alpha: self.alpha,
        }
    }

    /// Keep only the given rows.
    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> IntervalSet {
        IntervalSet {
            lower: self.lower.slice(ndarray::s![rows.clone(), ..]).to_owned(),
            upper: self.upper.slice(ndarray::s![rows.clone(), ..]).to_owned(),
            target_steps: self.target_steps[rows].to_vec(),
            alpha: self.alpha,
            fallback: self.fallback,
        }
    }

    /// Long-format CSV: `step,node,lower,upper`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "node", "lower", "upper"])?;
        for (r, &step) in self.target_steps.iter().enumerate() {
            for i in 0..self.num_nodes() {
                w.write_record([
                    step.to_string(),
                    i.to_string(),
                    self.lower[[r, i]].to_string(),
                    self.upper[[r, i]].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `[forecast + q(alpha/2), forecast + q(1 - alpha/2)]`.
pub fn build_interval(
    forecast: f64,
    quantiles: ArrayView1<'_, f64>,
    grid: &QuantileGrid,
    alpha: f64,
) -> Result<(f64, f64)> {
    let lo = grid.value_at(quantiles, alpha / 2.0)?;
    let hi = grid.value_at(quantiles, 1.0 - alpha / 2.0)?;
    Ok((forecast + lo, forecast + hi.max(lo)))
}

/// Width-minimizing shift `beta` of the quantile pair at fixed nominal
/// coverage, restricted to grid offsets. Returns the bounds and whether the
/// search fell back to the plain interval.
pub fn build_interval_beta(
    forecast: f64,
    quantiles: ArrayView1<'_, f64>,
    grid: &QuantileGrid,
    alpha: f64,
) -> Result<((f64, f64), bool)> {
    let (Some(lo), Some(hi)) = (grid.index_of(alpha / 2.0), grid.index_of(1.0 - alpha / 2.0))
    else {
        return Ok((build_interval(forecast, quantiles, grid, alpha)?, true));
    };
    let span = hi - lo;
    // candidate shifts in grid steps, ordered by |shift| then sign so that
    // ties resolve toward zero and then toward the smaller beta
    let mut shifts: Vec<isize> = (0..grid.len() as isize - span as isize)
        .map(|start| start - lo as isize)
        .collect();
    shifts.sort_by_key(|&d| (d.abs(), d));
    let mut best: Option<(f64, usize)> = None;
    for d in shifts {
        let a = (lo as isize + d) as usize;
        let width = quantiles[a + span] - quantiles[a];
        if best.map_or(true, |(w, _)| width < w) {
            best = Some((width, a));
        }
    }
    let (_, a) = best.expect("the unshifted pair is always admissible");
    let lower = forecast + quantiles[a];
    let upper = forecast + quantiles[a + span].max(quantiles[a]);
    Ok(((lower, upper), false))
}

/// Intervals from `[T' x N x |grid|]` quantile predictions of the residual.
pub fn intervals_from_quantiles(
    forecasts: ArrayView2<'_, f64>,
    quantiles: ArrayView3<'_, f64>,
    target_steps: &[usize],
    grid: &QuantileGrid,
    alpha: f64,
    beta: bool,
) -> Result<IntervalSet> {
    let (t, n) = forecasts.dim();
    if quantiles.dim() != (t, n, grid.len()) {
        return Err(Error::Shape(format!(
            "quantiles {:?} vs forecasts {:?} and {} levels",
            quantiles.dim(),
            forecasts.dim(),
            grid.len()
        )));
    }
    let mut lower = Array2::zeros((t, n));
    let mut upper = Array2::zeros((t, n));
    let mut fallback = false;
    for r in 0..t {
        for i in 0..n {
            let q = quantiles.slice(ndarray::s![r, i, ..]);
            let (l, u) = if beta {
                let (b, f) = build_interval_beta(forecasts[[r, i]], q, grid, alpha)?;
                fallback |= f;
                b
            } else {
                build_interval(forecasts[[r, i]], q, grid, alpha)?
            };
            lower[[r, i]] = l;
            upper[[r, i]] = u;
        }
    }
    let mut set = IntervalSet::new(lower, upper, target_steps.to_vec(), alpha)?;
    set.fallback = fallback;
    Ok(set)
}

fn check_aligned(intervals: &IntervalSet, actuals: ArrayView2<'_, f64>) -> Result<()> {
    if intervals.lower.dim() != actuals.dim() {
        return Err(Error::Shape(format!(
            "intervals {:?} vs actuals {:?}",
            intervals.lower.dim(),
            actuals.dim()
        )));
    }
    Ok(())
}

fn case_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Achieved minus nominal coverage, in percentage points.
pub fn delta_cov(intervals: &IntervalSet, actuals: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    check_aligned(intervals, actuals)?;
    let covered = Zip::from(&intervals.lower)
        .and(&intervals.upper)
        .and(actuals)
        .map_collect(|&l, &u, &x| if l <= x && x <= u { 1.0 } else { 0.0 });
    Ok(100.0 * (case_mean(covered.into_iter()) - (1.0 - alpha)))
}

pub fn pi_width(intervals: &IntervalSet) -> f64 {
    case_mean(
        Zip::from(&intervals.lower)
            .and(&intervals.upper)
            .map_collect(|&l, &u| u - l)
            .into_iter(),
    )
}

/// Width plus `2/alpha` times the distance by which the observation misses.
pub fn winkler_score(lower: f64, upper: f64, x: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if x < lower {
        s += 2.0 / alpha * (lower - x);
    } else if x > upper {
        s += 2.0 / alpha * (x - upper);
    }
    s
}

pub fn winkler(intervals: &IntervalSet, actuals: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    check_aligned(intervals, actuals)?;
    let scores = Zip::from(&intervals.lower)
        .and(&intervals.upper)
        .and(actuals)
        .map_collect(|&l, &u, &x| winkler_score(l, u, x, alpha));
    Ok(case_mean(scores.into_iter()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: usize,
    pub delta_cov: f64,
    pub pi_width: f64,
    pub winkler: f64,
}

/// Aggregate and per-node metrics for one evaluated method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub base_model: String,
    pub alpha: f64,
    pub seed: u64,
    pub delta_cov: f64,
    pub pi_width: f64,
    pub winkler: f64,
    pub per_node: Vec<NodeMetrics>,
}

impl MetricReport {
    pub fn evaluate(
        intervals: &IntervalSet,
        actuals: ArrayView2<'_, f64>,
        method: &str,
        dataset: &str,
        base_model: &str,
        seed: u64,
    ) -> Result<Self> {
        let alpha = intervals.alpha;
        let per_node = (0..intervals.num_nodes())
            .map(|i| {
                let col = |a: &Array2<f64>| a.column(i).to_owned().insert_axis(ndarray::Axis(1));
                let sub = IntervalSet {
                    lower: col(&intervals.lower),
                    upper: col(&intervals.upper),
                    target_steps: intervals.target_steps.clone(),
                    alpha,
                    fallback: intervals.fallback,
                };
                let x = actuals.column(i).to_owned().insert_axis(ndarray::Axis(1));
                Ok(NodeMetrics {
                    node: i,
                    delta_cov: delta_cov(&sub, x.view(), alpha)?,
                    pi_width: pi_width(&sub),
                    winkler: winkler(&sub, x.view(), alpha)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            base_model: base_model.to_string(),
            alpha,
            seed,
            delta_cov: delta_cov(intervals, actuals, alpha)?,
            pi_width: pi_width(intervals),
            winkler: winkler(intervals, actuals, alpha)?,
            per_node,
        })
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "method",
        "dataset",
        "base_model",
        "alpha",
        "delta_cov",
        "pi_width",
        "winkler",
        "seed",
    ];

    pub fn csv_row(&self) -> [String; 8] {
        [
            self.method.clone(),
            self.dataset.clone(),
            self.base_model.clone(),
            self.alpha.to_string(),
            self.delta_cov.to_string(),
            self.pi_width.to_string(),
            self.winkler.to_string(),
            self.seed.to_string(),
        ]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        for r in reports {
            w.write_record(r.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn single(lower: f64, upper: f64, alpha: f64) -> IntervalSet {
        IntervalSet::new(array![[lower]], array![[upper]], vec![0], alpha).unwrap()
    }

    fn grid_values(f: impl Fn(f64) -> f64) -> (QuantileGrid, Array1<f64>) {
        let grid = QuantileGrid::default();
        let q = grid.levels().iter().map(|&l| f(l)).collect();
        (grid, q)
    }

    #[test]
    fn plain_interval() {
        let grid = QuantileGrid::default();
        let mut q = Array1::zeros(39);
        q[1] = -2.0;
        q[37] = 3.0;
        assert_eq!(
            build_interval(10.0, q.view(), &grid, 0.1).unwrap(),
            (8.0, 13.0)
        );
        let (_, q) = grid_values(|l| (l - 0.5) * 4.0);
        let (lo, hi) = build_interval(1.0, q.view(), &grid, 0.1).unwrap();
        assert!(((hi - 1.0) + (lo - 1.0)).abs() < 1e-12);
        let z = Array1::zeros(39);
        assert_eq!(
            build_interval(4.0, z.view(), &grid, 0.1).unwrap(),
            (4.0, 4.0)
        );
    }

    #[test]
    fn missing_level_is_error() {
        let grid = QuantileGrid::new(vec![0.25, 0.5, 0.75]).unwrap();
        let q = array![-1.0, 0.0, 1.0];
        assert!(build_interval(0.0, q.view(), &grid, 0.1).is_err());
        let (b, fallback) = build_interval_beta(0.0, q.view(), &grid, 0.5).unwrap();
        assert_eq!((b, fallback), ((-1.0, 1.0), false));
    }

    #[test]
    fn beta_on_linear_profile_is_zero_shift() {
        let (grid, q) = grid_values(|l| 3.0 * l);
        let plain = build_interval(0.0, q.view(), &grid, 0.1).unwrap();
        let (beta, fb) = build_interval_beta(0.0, q.view(), &grid, 0.1).unwrap();
        assert!(!fb);
        assert_eq!(plain, beta);
    }

    #[test]
    fn beta_admissible_shifts_on_coarse_window() {
        // levels 0.025..0.975 with alpha 0.1: pair (0.05, 0.95) can move by
        // one grid step either way, so exactly three candidates exist
        let grid = QuantileGrid::default();
        let lo = grid.index_of(0.05).unwrap();
        let hi = grid.index_of(0.95).unwrap();
        let span = hi - lo;
        let admissible: Vec<isize> = (0..grid.len() - span)
            .map(|s| s as isize - lo as isize)
            .collect();
        assert_eq!(admissible, vec![-1, 0, 1]);
        // widths 5 (beta=-1), 4 (beta=0), 6 (beta=+1) -> beta = 0
        let mut q = Array1::from_shape_fn(39, |k| k as f64);
        q[0] = 0.0;
        q[1] = 1.0;
        q[2] = 2.0;
        q[36] = 5.0;
        q[37] = 5.0;
        q[38] = 8.0;
        for k in 3..36 {
            q[k] = 2.0 + (k as f64 - 2.0) * 3.0 / 34.0;
        }
        let widths: Vec<f64> = [0usize, 1, 2].iter().map(|&a| q[a + span] - q[a]).collect();
        assert_eq!(widths, vec![5.0, 4.0, 6.0]);
        let ((l, u), _) = build_interval_beta(0.0, q.view(), &grid, 0.1).unwrap();
        assert_eq!((l, u), (1.0, 5.0));
    }

    #[test]
    fn beta_moves_left_on_right_skewed_profile() {
        // right skew: quantiles spread out in the upper tail
        let (grid, q) = grid_values(|l| (3.0 * l).exp());
        let plain = build_interval(0.0, q.view(), &grid, 0.1).unwrap();
        let ((l, u), _) = build_interval_beta(0.0, q.view(), &grid, 0.1).unwrap();
        assert!(u - l < plain.1 - plain.0);
        assert!(l < plain.0);
    }

    #[test]
    fn beta_ties_prefer_zero_then_smaller() {
        let grid = QuantileGrid::default();
        let q = Array1::from_shape_fn(39, |k| if k == 38 { 100.0 } else { 0.0 });
        let ((l, u), _) = build_interval_beta(0.0, q.view(), &grid, 0.1).unwrap();
        assert_eq!((l, u), (0.0, 0.0));
        let q = Array1::from_shape_fn(39, |k| if k >= 37 { 1.0 } else { 0.0 });
        // widths: beta=-1 -> 0, beta=0 -> 1, beta=+1 -> 1
        let ((l, u), _) = build_interval_beta(0.0, q.view(), &grid, 0.1).unwrap();
        assert_eq!((l, u), (0.0, 0.0));
    }

    #[test]
    fn metric_examples() {
        let cov = |l: f64, u: f64, x: f64| {
            delta_cov(&single(l, u, 0.1), array![[x]].view(), 0.1).unwrap()
        };
        assert!((cov(0.0, 1.0, 0.5) - 10.0).abs() < 1e-12);
        assert!((cov(0.0, 1.0, 2.0) + 90.0).abs() < 1e-12);
        assert!(
            (cov(0.0, 1.0, 1.0) - 10.0).abs() < 1e-12,
            "boundary is covered"
        );

        let lower = Array2::zeros((10, 1));
        let upper = Array2::ones((10, 1));
        let set = IntervalSet::new(lower, upper, (0..10).collect(), 0.1).unwrap();
        let mut x = Array2::from_elem((10, 1), 0.5);
        x[[0, 0]] = 3.0;
        assert!(delta_cov(&set, x.view(), 0.1).unwrap().abs() < 1e-9);

        assert_eq!(pi_width(&single(8.0, 13.0, 0.1)), 5.0);
        assert_eq!(pi_width(&single(2.0, 2.0, 0.1)), 0.0);
        let two = IntervalSet::new(array![[0.0, 1.0]], array![[2.0, 5.0]], vec![0], 0.1).unwrap();
        assert_eq!(pi_width(&two), 3.0);

        let w = |x: f64, a: f64| winkler(&single(4.0, 6.0, a), array![[x]].view(), a).unwrap();
        assert_eq!(w(5.0, 0.1), 2.0);
        assert!((w(3.0, 0.1) - 22.0).abs() < 1e-12);
        assert!((w(7.0, 0.2) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_and_empty_intervals() {
        let x = array![[0.3, -5.0], [1e6, 2.0]];
        let inf = IntervalSet::new(
            Array2::from_elem((2, 2), f64::NEG_INFINITY),
            Array2::from_elem((2, 2), f64::INFINITY),
            vec![0, 1],
            0.1,
        )
        .unwrap();
        assert!((delta_cov(&inf, x.view(), 0.1).unwrap() - 10.0).abs() < 1e-12);
        let empty = IntervalSet::new(
            Array2::from_elem((2, 2), 1e9),
            Array2::from_elem((2, 2), 1e9),
            vec![0, 1],
            0.1,
        )
        .unwrap();
        assert!((delta_cov(&empty, x.view(), 0.1).unwrap() + 90.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip_and_per_node() {
        let set = IntervalSet::new(array![[0.0, 0.0]], array![[1.0, 3.0]], vec![7], 0.1).unwrap();
        let r = MetricReport::evaluate(&set, array![[0.5, 4.0]].view(), "scp", "gpvar", "rnn", 1)
            .unwrap();
        assert_eq!(r.per_node.len(), 2);
        assert_eq!(r.per_node[1].pi_width, 3.0);
        assert!((r.winkler - (1.0 + 3.0 + 20.0) / 2.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.write_json(&p).unwrap();
        assert_eq!(MetricReport::read_json(&p).unwrap(), r);
        MetricReport::write_csv(&[r.clone(), r], &dir.path().join("r.csv")).unwrap();
    }

    proptest! {
        #[test]
        fn winkler_dominates_width(
            cases in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0, -8.0f64..8.0), 1..40),
            alpha in 0.01f64..0.5,
        ) {
            let n = cases.len();
            let lower = Array2::from_shape_fn((n, 1), |(r, _)| cases[r].0);
            let upper = Array2::from_shape_fn((n, 1), |(r, _)| cases[r].0 + cases[r].1);
            let x = Array2::from_shape_fn((n, 1), |(r, _)| cases[r].2);
            let set = IntervalSet::new(lower, upper, (0..n).collect(), alpha).unwrap();
            let w = winkler(&set, x.view(), alpha).unwrap();
            let width = pi_width(&set);
            let all_covered = delta_cov(&set, x.view(), alpha).unwrap() > 100.0 * alpha - 1e-9;
            prop_assert!(w >= width - 1e-12);
            prop_assert_eq!((w - width).abs() < 1e-12, all_covered);
        }

        #[test]
        fn metrics_are_permutation_invariant(
            cases in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0, -8.0f64..8.0), 2..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = cases.len();
            let build = |cs: &[(f64, f64, f64)]| {
                let lower = Array2::from_shape_fn((n, 1), |(r, _)| cs[r].0);
                let upper = Array2::from_shape_fn((n, 1), |(r, _)| cs[r].0 + cs[r].1);
                let x = Array2::from_shape_fn((n, 1), |(r, _)| cs[r].2);
                (IntervalSet::new(lower, upper, (0..n).collect(), 0.1).unwrap(), x)
            };
            let mut shuffled = cases.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, xa) = build(&cases);
            let (b, xb) = build(&shuffled);
            prop_assert!((winkler(&a, xa.view(), 0.1).unwrap() - winkler(&b, xb.view(), 0.1).unwrap()).abs() < 1e-9);
            prop_assert!((pi_width(&a) - pi_width(&b)).abs() < 1e-9);
            prop_assert!((delta_cov(&a, xa.view(), 0.1).unwrap() - delta_cov(&b, xb.view(), 0.1).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn beta_never_wider_than_plain(raw in prop::collection::vec(-3.0f64..3.0, 39)) {
            let mut q = raw.clone();
            q.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = Array1::from(q);
            let grid = QuantileGrid::default();
            let (l, u) = build_interval(0.0, q.view(), &grid, 0.1).unwrap();
            let ((bl, bu), _) = build_interval_beta(0.0, q.view(), &grid, 0.1).unwrap();
            prop_assert!(bu - bl <= u - l + 1e-12);
        }
    }
}
