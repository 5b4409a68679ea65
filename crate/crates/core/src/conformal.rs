//! Classic conformal baselines over calibration residuals: split CP,
//! exponentially reweighted CP (NexCP) and sliding-window CP (SeqCP).

use ndarray::{Array2, ArrayView2};

use crate::data::ResidualSet;
use crate::error::{Error, Result};
use crate::intervals::IntervalSet;

/// Values with non-negative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty sample".into()));
        }
        if values.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} values with {} weights",
                values.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(
                "weights must be finite and >= 0".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidInput("all weights are zero".into()));
        }
        Ok(Self { values, weights })
    }

    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![1.0; n])
    }
}

/// Smallest `v` whose normalized cumulative weight reaches `level`, after
/// appending a virtual `+inf` point carrying the largest single weight.
/// Selecting the virtual point returns the largest positively weighted value.
pub fn weighted_quantile(sample: &WeightedSample, level: f64) -> f64 {
    let mut order: Vec<usize> = (0..sample.values.len()).collect();
    order.sort_by(|&a, &b| sample.values[a].total_cmp(&sample.values[b]));
    quantile_sorted(&sample.values, &sample.weights, &order, level)
}

fn quantile_sorted(values: &[f64], weights: &[f64], order: &[usize], level: f64) -> f64 {
    let w_max = weights.iter().cloned().fold(0.0, f64::max);
    let total: f64 = weights.iter().sum::<f64>() + w_max;
    let target = level * total;
    let mut cum = 0.0;
    for &k in order {
        cum += weights[k];
        if cum >= target {
            return values[k];
        }
    }
    // virtual point: fall back to the largest value that carries weight
    order
        .iter()
        .rev()
        .find(|&&k| weights[k] > 0.0)
        .map(|&k| values[k])
        .expect("sample has positive weight")
}

/// `(lower, upper)` offsets at nominal `1 - alpha`: the upper tail directly,
/// the lower tail by mirroring so both sides are conservative.
pub fn two_sided_offsets(sample: &WeightedSample, alpha: f64) -> (f64, f64) {
    let upper = weighted_quantile(sample, 1.0 - alpha / 2.0);
    let mirrored = WeightedSample {
        values: sample.values.iter().map(|v| -v).collect(),
        weights: sample.weights.clone(),
    };
    let lower = -weighted_quantile(&mirrored, 1.0 - alpha / 2.0);
    (lower, upper)
}

/// Minimum pool size for a finite upper quantile at `alpha`.
pub fn min_pool(alpha: f64) -> usize {
    (1.0 / alpha).ceil() as usize
}

/// Test-time inputs shared by all methods.
#[derive(Debug, Clone, Copy)]
pub struct TestTargets<'a> {
    /// `[T' x N]` point forecasts.
    pub forecasts: ArrayView2<'a, f64>,
    pub target_steps: &'a [usize],
    /// Residuals observed at test time, admitted into the pool once known.
    pub stream: Option<&'a ResidualSet>,
}

impl<'a> TestTargets<'a> {
    pub fn new(forecasts: ArrayView2<'a, f64>, target_steps: &'a [usize]) -> Self {
        Self {
            forecasts,
            target_steps,
            stream: None,
        }
    }

    pub fn streaming(mut self, stream: &'a ResidualSet) -> Self {
        self.stream = Some(stream);
        self
    }
}

/// How past residuals are weighted at test step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Uniform,
    /// `rho^(t - s)` for the residual at step `s`.
    Exponential(f64),
    /// Unit weight on the `K` most recent residuals.
    Window(usize),
}

fn check_inputs(cal: &ResidualSet, test: &TestTargets<'_>, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0,1)")));
    }
    if test.forecasts.nrows() != test.target_steps.len() {
        return Err(Error::Shape("forecast rows and target steps differ".into()));
    }
    if test.forecasts.ncols() != cal.num_nodes() {
        return Err(Error::Shape(format!(
            "{} forecast columns for {} calibration nodes",
            test.forecasts.ncols(),
            cal.num_nodes()
        )));
    }
    if cal.len() < min_pool(alpha) {
        return Err(Error::InvalidInput(format!(
            "{} calibration residuals, need at least {} for alpha {alpha}",
            cal.len(),
            min_pool(alpha)
        )));
    }
    if let Some(s) = test.stream {
        if s.num_nodes() != cal.num_nodes() {
            return Err(Error::Shape("stream residuals differ in node count".into()));
        }
    }
    Ok(())
}

/// Pool rows (steps and residuals) known when forecasting target `t`.
fn pool_for<'p>(
    cal: &'p ResidualSet,
    stream: Option<&'p ResidualSet>,
    t: usize,
) -> (Vec<usize>, Vec<(&'p ResidualSet, usize)>) {
    let lag = cal.horizon.max(1);
    let mut steps = Vec::new();
    let mut rows = Vec::new();
    for set in std::iter::once(cal).chain(stream) {
        for (r, &s) in set.target_steps.iter().enumerate() {
            if s + lag <= t || std::ptr::eq(set, cal) {
                steps.push(s);
                rows.push((set, r));
            }
        }
    }
    (steps, rows)
}

fn weights_for(steps: &[usize], t: usize, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0; steps.len()],
        Weighting::Exponential(rho) => {
            // rescaled by rho^-(t - latest) so that long gaps do not underflow
            let latest = steps.iter().copied().max().unwrap_or(t);
            steps
                .iter()
                .map(|&s| rho.powf((latest as f64 - s as f64).max(0.0)))
                .collect()
        }
        Weighting::Window(k) => {
            let mut idx: Vec<usize> = (0..steps.len()).collect();
            idx.sort_by_key(|&i| std::cmp::Reverse(steps[i]));
            let mut w = vec![0.0; steps.len()];
            for &i in idx.iter().take(k) {
                w[i] = 1.0;
            }
            w
        }
    }
}

/// Intervals for every node and test step under a weighting scheme.
pub fn weighted_intervals(
    cal: &ResidualSet,
    test: TestTargets<'_>,
    alpha: f64,
    weighting: Weighting,
) -> Result<IntervalSet> {
    check_inputs(cal, &test, alpha)?;
    match weighting {
        Weighting::Exponential(rho) if !(rho > 0.0 && rho <= 1.0) => {
            return Err(Error::Config(format!("rho {rho} outside (0,1]")));
        }
        Weighting::Window(k) if k < min_pool(alpha) => {
            return Err(Error::Config(format!(
                "window {k} too small for alpha {alpha} (need {})",
                min_pool(alpha)
            )));
        }
        _ => {}
    }
    let (t_len, n) = test.forecasts.dim();
    let mut lower = Array2::zeros((t_len, n));
    let mut upper = Array2::zeros((t_len, n));

    // without streaming the pool and its weights are the same for every step
    let static_pool = test.stream.is_none();
    let mut cached: Option<Vec<(f64, f64)>> = None;
    for (r, &t) in test.target_steps.iter().enumerate() {
        let offsets = match (&cached, static_pool) {
            (Some(c), true) => c.clone(),
            _ => {
                let (steps, rows) = pool_for(cal, test.stream, t);
                let w = weights_for(&steps, t, weighting);
                let per_node: Vec<(f64, f64)> = (0..n)
                    .map(|i| {
                        let values = rows.iter().map(|(set, k)| set.residuals[[*k, i]]).collect();
                        let sample = WeightedSample::new(values, w.clone())?;
                        Ok(two_sided_offsets(&sample, alpha))
                    })
                    .collect::<Result<_>>()?;
                if static_pool {
                    cached = Some(per_node.clone());
                }
                per_node
            }
        };
        for (i, (lo, hi)) in offsets.into_iter().enumerate() {
            let f = test.forecasts[[r, i]];
            lower[[r, i]] = f + lo;
            upper[[r, i]] = f + hi;
        }
    }
    IntervalSet::new(lower, upper, test.target_steps.to_vec(), alpha)
}

/// Split conformal prediction with per-node unit-weight pools.
pub fn scp_intervals(cal: &ResidualSet, test: TestTargets<'_>, alpha: f64) -> Result<IntervalSet> {
    weighted_intervals(cal, test, alpha, Weighting::Uniform)
}

/// Non-exchangeable CP with weights `rho^(t - s)`.
pub fn nexcp_intervals(
    cal: &ResidualSet,
    test: TestTargets<'_>,
    alpha: f64,
    rho: f64,
) -> Result<IntervalSet> {
    weighted_intervals(cal, test, alpha, Weighting::Exponential(rho))
}

/// CP over the `K` most recent residuals.
pub fn seqcp_intervals(
    cal: &ResidualSet,
    test: TestTargets<'_>,
    alpha: f64,
    window: usize,
) -> Result<IntervalSet> {
    weighted_intervals(cal, test, alpha, Weighting::Window(window))
}
