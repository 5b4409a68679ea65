//! Time series containers, chronological splits, scaling, sliding windows and
//! residual extraction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `T x N` collection of scalar series with optional exogenous covariates
/// shaped `T x N x d_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesCollection {
    values: Array2<f64>,
    covariates: Option<Array3<f64>>,
}

impl TimeSeriesCollection {
    pub fn new(values: Array2<f64>, covariates: Option<Array3<f64>>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "series values contain NaN or infinite entries".into(),
            ));
        }
        if let Some(cov) = &covariates {
            let (t, n, _) = cov.dim();
            if (t, n) != values.dim() {
                return Err(Error::Shape(format!(
                    "covariates are {t}x{n} but values are {}x{}",
                    values.nrows(),
                    values.ncols()
                )));
            }
            if cov.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(
                    "covariates contain NaN or infinite entries".into(),
                ));
            }
        }
        Ok(Self { values, covariates })
    }

    pub fn num_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.ncols()
    }

    /// Number of covariate channels (0 when absent).
    pub fn covariate_dim(&self) -> usize {
        self.covariates.as_ref().map_or(0, |c| c.dim().2)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn covariates(&self) -> Option<&Array3<f64>> {
        self.covariates.as_ref()
    }

    /// Values restricted to a step range.
    pub fn slice_steps(&self, range: Range<usize>) -> ArrayView2<'_, f64> {
        self.values.slice(s![range, ..])
    }

    /// Read the wide CSV layout: a header row, then `step,node_0,...,node_{N-1}`.
    /// Each covariate file holds one channel in the same layout.
    pub fn read_csv(path: &Path, covariate_paths: &[&Path]) -> Result<Self> {
        let values = read_wide_csv(path)?;
        let covariates = if covariate_paths.is_empty() {
            None
        } else {
            let (t, n) = values.dim();
            let mut cov = Array3::zeros((t, n, covariate_paths.len()));
            for (c, p) in covariate_paths.iter().enumerate() {
                let channel = read_wide_csv(p)?;
                if channel.dim() != (t, n) {
                    return Err(Error::Shape(format!(
                        "covariate file {} is {}x{}, expected {t}x{n}",
                        p.display(),
                        channel.nrows(),
                        channel.ncols()
                    )));
                }
                cov.slice_mut(s![.., .., c]).assign(&channel);
            }
            Some(cov)
        };
        Self::new(values, covariates)
    }

    /// Write values in the wide CSV layout. Numbers use Rust's shortest
    /// round-trip formatting so identical data gives identical bytes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_wide_csv(path, self.values.view(), None)
    }
}

pub(crate) fn read_wide_csv(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::InvalidInput(format!(
            "{}: expected a step column and at least one node column",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        if record.len() != width {
            return Err(Error::InvalidInput(format!(
                "{}: row {} has {} fields, header has {width}",
                path.display(),
                rows + 1,
                record.len()
            )));
        }
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("{}: cannot parse '{field}'", path.display()))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width - 1), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Write a wide CSV; `steps` overrides the default `0..T` index column.
pub(crate) fn write_wide_csv(
    path: &Path,
    values: ArrayView2<'_, f64>,
    steps: Option<&[usize]>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "step")?;
    for i in 0..values.ncols() {
        write!(out, ",node_{i}")?;
    }
    writeln!(out)?;
    for (t, row) in values.outer_iter().enumerate() {
        write!(out, "{}", steps.map_or(t, |s| s[t]))?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Fractions used to cut the time axis into train / calibration / test blocks.
/// Validation is carved from the front of the calibration block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub cal_frac: f64,
    pub test_frac: f64,
    pub val_frac_of_cal: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.4,
            cal_frac: 0.4,
            test_frac: 0.2,
            val_frac_of_cal: 0.25,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.train_frac) || !in_unit(self.cal_frac) || !in_unit(self.test_frac) {
            return Err(Error::Config(format!(
                "split fractions must lie in (0,1): {self:?}"
            )));
        }
        if (self.train_frac + self.cal_frac + self.test_frac - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.val_frac_of_cal) {
            return Err(Error::Config(format!(
                "val_frac_of_cal must lie in [0,1): {}",
                self.val_frac_of_cal
            )));
        }
        Ok(())
    }
}

/// Contiguous, disjoint step ranges ordered train < val < cal < test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub cal: Range<usize>,
    pub test: Range<usize>,
}

fn floor_frac(frac: f64, t: usize) -> usize {
    // the epsilon keeps 0.8 * 100 from landing on 79.999...
    (frac * t as f64 + 1e-9).floor() as usize
}

pub fn make_splits(num_steps: usize, spec: &SplitSpec) -> Result<SplitIndex> {
    spec.validate()?;
    if num_steps < 10 {
        return Err(Error::InvalidInput(format!(
            "need at least 10 steps to split, got {num_steps}"
        )));
    }
    let train_end = floor_frac(spec.train_frac, num_steps);
    let cal_end = floor_frac(spec.train_frac + spec.cal_frac, num_steps).min(num_steps);
    let block = cal_end.saturating_sub(train_end);
    let val_len = floor_frac(spec.val_frac_of_cal, block);
    let split = SplitIndex {
        train: 0..train_end,
        val: train_end..train_end + val_len,
        cal: train_end + val_len..cal_end,
        test: cal_end..num_steps,
    };
    let val_required = spec.val_frac_of_cal > 0.0;
    if split.train.is_empty()
        || split.cal.is_empty()
        || split.test.is_empty()
        || (val_required && split.val.is_empty())
    {
        return Err(Error::InvalidInput(format!(
            "{num_steps} steps are too few for split {spec:?}: got {split:?}"
        )));
    }
    Ok(split)
}

/// Standard scaler pooled over every node and step of the fitting range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Scaler {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }

    /// Population mean/std of all values; std is floored at [`STD_FLOOR`].
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for &v in values {
            n += 1;
            sum += v;
            sum_sq += v * v;
        }
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit a scaler on no data".into()));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        Ok(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn fit_scaler(collection: &TimeSeriesCollection, range: Range<usize>) -> Result<Scaler> {
    if range.is_empty() || range.end > collection.num_steps() {
        return Err(Error::InvalidInput(format!(
            "scaler range {range:?} is empty or outside 0..{}",
            collection.num_steps()
        )));
    }
    Scaler::fit(collection.slice_steps(range).iter())
}

/// A batch of sliding windows.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `B x W x N x d_in`; channel 0 is the series value, then covariates.
    pub inputs: Array4<f64>,
    /// `B x N`
    pub targets: Array2<f64>,
    /// Target step of each sample, equal to its last input step plus `H`.
    pub target_steps: Vec<usize>,
}

/// Target steps `t` such that inputs `t-H-W+1 ..= t-H` and `t` lie inside `range`.
pub fn admissible_targets(range: &Range<usize>, window: usize, horizon: usize) -> Range<usize> {
    let first = range.start + window - 1 + horizon;
    first..range.end.max(first)
}

/// Iterator over [`WindowBatch`]es in chronological order.
pub struct WindowIter<'a> {
    collection: &'a TimeSeriesCollection,
    window: usize,
    horizon: usize,
    targets: Range<usize>,
    batch_size: usize,
}

impl<'a> Iterator for WindowIter<'a> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.targets.is_empty() {
            return None;
        }
        let start = self.targets.start;
        let end = (start + self.batch_size).min(self.targets.end);
        self.targets.start = end;
        let steps: Vec<usize> = (start..end).collect();
        Some(build_windows(
            self.collection,
            &steps,
            self.window,
            self.horizon,
        ))
    }
}

pub(crate) fn build_windows(
    collection: &TimeSeriesCollection,
    target_steps: &[usize],
    window: usize,
    horizon: usize,
) -> WindowBatch {
    let n = collection.num_nodes();
    let d_in = 1 + collection.covariate_dim();
    let b = target_steps.len();
    let mut inputs = Array4::zeros((b, window, n, d_in));
    let mut targets = Array2::zeros((b, n));
    for (k, &t) in target_steps.iter().enumerate() {
        let first = t - horizon + 1 - window;
        for w in 0..window {
            let step = first + w;
            inputs
                .slice_mut(s![k, w, .., 0])
                .assign(&collection.values.row(step));
            if let Some(cov) = &collection.covariates {
                inputs
                    .slice_mut(s![k, w, .., 1..])
                    .assign(&cov.index_axis(Axis(0), step));
            }
        }
        targets.row_mut(k).assign(&collection.values.row(t));
    }
    WindowBatch {
        inputs,
        targets,
        target_steps: target_steps.to_vec(),
    }
}

/// Sliding windows of length `window` over `range`; sample targets sit
/// `horizon` steps after the last input step. Every admissible target
/// appears once, in order; the last batch may be short.
pub fn window_iter(
    collection: &TimeSeriesCollection,
    window: usize,
    horizon: usize,
    range: Range<usize>,
    batch_size: usize,
) -> Result<WindowIter<'_>> {
    if window == 0 || batch_size == 0 {
        return Err(Error::InvalidInput(
            "window and batch size must be positive".into(),
        ));
    }
    if range.end > collection.num_steps() {
        return Err(Error::InvalidInput(format!(
            "range {range:?} exceeds series length {}",
            collection.num_steps()
        )));
    }
    if range.len() < window + horizon {
        return Err(Error::InvalidInput(format!(
            "range of {} steps is shorter than window {window} + horizon {horizon}",
            range.len()
        )));
    }
    Ok(WindowIter {
        collection,
        window,
        horizon,
        targets: admissible_targets(&range, window, horizon),
        batch_size,
    })
}

/// Point-forecast residuals, `actual - forecast`, in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub residuals: Array2<f64>,
    pub target_steps: Vec<usize>,
    pub horizon: usize,
}

impl ResidualSet {
    pub fn len(&self) -> usize {
        self.target_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_steps.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.residuals.ncols()
    }

    /// Row position of a target step, if stored.
    pub fn position(&self, step: usize) -> Option<usize> {
        let first = *self.target_steps.first()?;
        let pos = step.checked_sub(first)?;
        (self.target_steps.get(pos) == Some(&step)).then_some(pos)
    }

    /// Whether target steps are consecutive integers.
    pub fn is_contiguous(&self) -> bool {
        self.target_steps.windows(2).all(|w| w[1] == w[0] + 1)
    }

    /// Rows whose target step falls inside `range`.
    pub fn restrict(&self, range: Range<usize>) -> ResidualSet {
        let rows: Vec<usize> = self
            .target_steps
            .iter()
            .enumerate()
            .filter(|(_, s)| range.contains(s))
            .map(|(i, _)| i)
            .collect();
        ResidualSet {
            residuals: self.residuals.select(Axis(0), &rows),
            target_steps: rows.iter().map(|&i| self.target_steps[i]).collect(),
            horizon: self.horizon,
        }
    }

    /// Concatenate two residual streams in time order.
    pub fn concat(&self, later: &ResidualSet) -> Result<ResidualSet> {
        if self.num_nodes() != later.num_nodes() || self.horizon != later.horizon {
            return Err(Error::Shape(
                "residual sets differ in node count or horizon".into(),
            ));
        }
        if let (Some(a), Some(b)) = (self.target_steps.last(), later.target_steps.first()) {
            if b <= a {
                return Err(Error::InvalidInput(
                    "residual sets overlap or are out of order".into(),
                ));
            }
        }
        let residuals =
            ndarray::concatenate(Axis(0), &[self.residuals.view(), later.residuals.view()])
                .map_err(|e| Error::Shape(e.to_string()))?;
        let mut target_steps = self.target_steps.clone();
        target_steps.extend_from_slice(&later.target_steps);
        Ok(ResidualSet {
            residuals,
            target_steps,
            horizon: self.horizon,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_wide_csv(path, self.residuals.view(), Some(&self.target_steps))
    }

    pub fn read_csv(path: &Path, horizon: usize) -> Result<ResidualSet> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let mut steps = Vec::new();
        let mut data = Vec::new();
        let mut width = 0;
        for record in reader.records() {
            let record = record?;
            width = record.len() - 1;
            steps.push(record[0].trim().parse::<usize>().map_err(|_| {
                Error::InvalidInput(format!("{}: bad step '{}'", path.display(), &record[0]))
            })?);
            for f in record.iter().skip(1) {
                data.push(f.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!("{}: cannot parse '{f}'", path.display()))
                })?);
            }
        }
        let residuals = Array2::from_shape_vec((steps.len(), width), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ResidualSet {
            residuals,
            target_steps: steps,
            horizon,
        })
    }
}

pub fn compute_residuals(
    actuals: ArrayView2<'_, f64>,
    forecasts: ArrayView2<'_, f64>,
    target_steps: &[usize],
    horizon: usize,
) -> Result<ResidualSet> {
    if actuals.dim() != forecasts.dim() {
        return Err(Error::Shape(format!(
            "actuals {:?} vs forecasts {:?}",
            actuals.dim(),
            forecasts.dim()
        )));
    }
    if target_steps.len() != actuals.nrows() {
        return Err(Error::Shape(format!(
            "{} target steps for {} rows",
            target_steps.len(),
            actuals.nrows()
        )));
    }
    Ok(ResidualSet {
        residuals: &actuals - &forecasts,
        target_steps: target_steps.to_vec(),
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn spec(train: f64, cal: f64, test: f64, val: f64) -> SplitSpec {
        SplitSpec {
            train_frac: train,
            cal_frac: cal,
            test_frac: test,
            val_frac_of_cal: val,
        }
    }

    #[test]
    fn splits_on_round_fractions() {
        let s = make_splits(100, &spec(0.4, 0.4, 0.2, 0.25)).unwrap();
        assert_eq!(s.train, 0..40);
        assert_eq!(s.val, 40..50);
        assert_eq!(s.cal, 50..80);
        assert_eq!(s.test, 80..100);

        let s = make_splits(10, &spec(0.4, 0.4, 0.2, 0.0)).unwrap();
        assert_eq!(s.train, 0..4);
        assert!(s.val.is_empty());
        assert_eq!(s.cal, 4..8);
        assert_eq!(s.test, 8..10);
    }

    #[test]
    fn splits_reject_short_series() {
        assert!(make_splits(5, &spec(0.4, 0.4, 0.2, 0.25)).is_err());
        assert!(make_splits(100, &spec(0.5, 0.4, 0.2, 0.25)).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_time_axis(
            t in 10usize..5000,
            a in 0.05f64..0.8,
            b in 0.05f64..0.8,
            val in 0.0f64..0.9,
        ) {
            prop_assume!(a + b < 0.95);
            let sp = spec(a, b, 1.0 - a - b, val);
            if let Ok(s) = make_splits(t, &sp) {
                prop_assert_eq!(s.train.start, 0);
                prop_assert_eq!(s.train.end, s.val.start);
                prop_assert_eq!(s.val.end, s.cal.start);
                prop_assert_eq!(s.cal.end, s.test.start);
                prop_assert_eq!(s.test.end, t);
            }
        }

        #[test]
        fn scaler_round_trip(
            data in proptest::collection::vec(-1e3f64..1e3, 1..50),
            x in -1e4f64..1e4,
        ) {
            let sc = Scaler::fit(data.iter()).unwrap();
            prop_assert!((sc.inverse(sc.transform(x)) - x).abs() < 1e-9 * (1.0 + x.abs()));
        }

        #[test]
        fn window_count_matches_admissible_set(
            len in 1usize..40, w in 1usize..8, h in 0usize..4, bs in 1usize..7,
        ) {
            let col = TimeSeriesCollection::new(Array2::zeros((len + 3, 2)), None).unwrap();
            let range = 3..len + 3;
            match window_iter(&col, w, h, range.clone(), bs) {
                Ok(it) => {
                    let steps: Vec<usize> = it.flat_map(|b| b.target_steps).collect();
                    prop_assert_eq!(steps.len(), len - w - h + 1);
                    let expected: Vec<usize> = (range.start + w - 1 + h..range.end).collect();
                    prop_assert_eq!(steps, expected);
                }
                Err(_) => prop_assert!(len < w + h),
            }
        }

        #[test]
        fn residuals_are_antisymmetric(
            a in proptest::collection::vec(-10f64..10.0, 6),
            f in proptest::collection::vec(-10f64..10.0, 6),
        ) {
            let a = Array2::from_shape_vec((3, 2), a).unwrap();
            let f = Array2::from_shape_vec((3, 2), f).unwrap();
            let r1 = compute_residuals(a.view(), f.view(), &[0, 1, 2], 1).unwrap();
            let r2 = compute_residuals(f.view(), a.view(), &[0, 1, 2], 1).unwrap();
            prop_assert_eq!(r1.residuals, -r2.residuals);
        }
    }

    #[test]
    fn scaler_examples() {
        let zeros = [0.0; 8];
        let sc = Scaler::fit(zeros.iter()).unwrap();
        assert_eq!(sc.mean, 0.0);
        assert_eq!(sc.std, 1e-8);

        let sc = Scaler::fit([-1.0, 1.0].iter()).unwrap();
        assert_eq!((sc.mean, sc.std), (0.0, 1.0));

        let sc = Scaler::fit([0.0, 1.0, 2.0, 3.0].iter()).unwrap();
        assert_eq!(sc.mean, 1.5);
        assert!((sc.std - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fit_scaler_pools_nodes_and_rejects_empty_range() {
        let col =
            TimeSeriesCollection::new(array![[0.0, 1.0], [2.0, 3.0], [9.0, 9.0]], None).unwrap();
        let sc = fit_scaler(&col, 0..2).unwrap();
        assert_eq!(sc.mean, 1.5);
        assert!(fit_scaler(&col, 1..1).is_err());
    }

    #[test]
    fn window_examples() {
        let col = TimeSeriesCollection::new(Array2::zeros((10, 1)), None).unwrap();
        let steps: Vec<usize> = window_iter(&col, 5, 0, 0..10, 4)
            .unwrap()
            .flat_map(|b| b.target_steps)
            .collect();
        assert_eq!(steps, vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(
            window_iter(&col, 5, 3, 0..10, 4)
                .unwrap()
                .map(|b| b.target_steps.len())
                .sum::<usize>(),
            3
        );
        assert!(window_iter(&col, 5, 3, 0..5, 4).is_err());
    }

    #[test]
    fn window_contents_and_target_offset() {
        let values = Array2::from_shape_fn((8, 2), |(t, i)| (10 * t + i) as f64);
        let cov = Array3::from_shape_fn((8, 2, 1), |(t, i, _)| -((10 * t + i) as f64));
        let col = TimeSeriesCollection::new(values, Some(cov)).unwrap();
        let batch = window_iter(&col, 3, 2, 0..8, 10).unwrap().next().unwrap();
        assert_eq!(batch.target_steps, vec![4, 5, 6, 7]);
        // sample 0: inputs at steps 0,1,2 then target at 2 + H = 4
        assert_eq!(batch.inputs[[0, 0, 1, 0]], 1.0);
        assert_eq!(batch.inputs[[0, 2, 0, 0]], 20.0);
        assert_eq!(batch.inputs[[0, 2, 0, 1]], -20.0);
        assert_eq!(batch.targets[[0, 1]], 41.0);
    }

    #[test]
    fn residual_examples() {
        let r = compute_residuals(array![[3.0]].view(), array![[2.0]].view(), &[0], 1).unwrap();
        assert_eq!(r.residuals[[0, 0]], 1.0);
        let r = compute_residuals(array![[2.0]].view(), array![[2.0]].view(), &[0], 1).unwrap();
        assert_eq!(r.residuals[[0, 0]], 0.0);
        let r = compute_residuals(
            array![[1.0, -1.0]].view(),
            array![[0.5, 0.5]].view(),
            &[7],
            1,
        )
        .unwrap();
        assert_eq!(r.residuals, array![[0.5, -1.5]]);
        assert!(
            compute_residuals(array![[1.0, 2.0]].view(), array![[1.0]].view(), &[0], 1).is_err()
        );
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(TimeSeriesCollection::new(array![[1.0, f64::NAN]], None).is_err());
        assert!(TimeSeriesCollection::new(array![[1.0, f64::INFINITY]], None).is_err());
        let bad_cov = Array3::zeros((2, 2, 1));
        assert!(TimeSeriesCollection::new(array![[1.0, 2.0]], Some(bad_cov)).is_err());
    }

    #[test]
    fn csv_round_trip_with_covariates() {
        let dir = tempfile::tempdir().unwrap();
        let values = array![[1.5, -2.0], [0.1, 3.25], [4.0, 5.0]];
        let col = TimeSeriesCollection::new(values.clone(), None).unwrap();
        let vpath = dir.path().join("v.csv");
        col.write_csv(&vpath).unwrap();
        let cpath = dir.path().join("c.csv");
        TimeSeriesCollection::new(values.mapv(|v| v * 2.0), None)
            .unwrap()
            .write_csv(&cpath)
            .unwrap();
        let back = TimeSeriesCollection::read_csv(&vpath, &[cpath.as_path()]).unwrap();
        assert_eq!(back.values(), &values);
        assert_eq!(back.covariates().unwrap()[[1, 1, 0]], 6.5);
    }
}
