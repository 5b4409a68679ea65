//! Test-time adaptation: fine-tune only the node embeddings on the most
//! recent fold of observed residuals, everything else frozen.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervals::{IntervalSet, MetricReport};
use crate::relqn::{fit, FitSchedule, RelQNModel, ResidualStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub n_folds: usize,
    pub finetune_epochs: usize,
    pub max_batches_per_epoch: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            n_folds: 6,
            finetune_epochs: 25,
            max_batches_per_epoch: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_folds and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "adaptation learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fine-tune the node embeddings of `model` on the residuals at `targets`
/// (each with a fully stored input window in `stream`). The graph is the
/// deterministic test graph and a fresh optimizer is used.
pub fn adapt_embeddings(
    model: &RelQNModel,
    stream: &ResidualStream,
    targets: &[usize],
    config: &AdaptationConfig,
) -> Result<RelQNModel> {
    config.validate()?;
    let emb = model
        .embedding_id()
        .ok_or_else(|| Error::Config("model has no node embeddings to adapt".into()))?;
    let (w, h) = (model.config.window, model.config.horizon);
    if targets.is_empty() {
        return Err(Error::InvalidInput(format!(
            "adaptation window shorter than window {w} + horizon {h}"
        )));
    }
    if let Some(&t) = targets
        .iter()
        .find(|&&t| stream.window_rows(t, w, h).is_none() || stream.row(t).is_none())
    {
        return Err(Error::InvalidInput(format!(
            "target step {t} lacks residuals for adaptation"
        )));
    }
    let mut adapted = model.clone();
    if config.finetune_epochs == 0 {
        return Ok(adapted);
    }
    adapted.params.set_all_trainable(false);
    adapted.params.set_trainable(emb, true);
    let schedule = FitSchedule {
        epochs: config.finetune_epochs,
        batches_per_epoch: config
            .max_batches_per_epoch
            .min(targets.len().div_ceil(config.batch_size)),
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        decay: None,
        phi_lr_multiplier: 1.0,
        sample_graph: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fit(
        &mut adapted,
        stream,
        targets,
        &[],
        &schedule,
        &mut rng,
        |_, _, _| {},
    )?;
    adapted.params.set_all_trainable(true);
    adapted.meta = model.meta.clone();
    Ok(adapted)
}

/// Metrics of one fold, frozen versus adapted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub first_step: usize,
    pub last_step: usize,
    pub frozen: (f64, f64, f64),
    pub adapted: (f64, f64, f64),
}

#[derive(Debug, Clone)]
pub struct AdaptiveEvaluation {
    pub adapted: MetricReport,
    pub frozen: MetricReport,
    pub folds: Vec<FoldMetrics>,
    pub adapted_intervals: IntervalSet,
    pub frozen_intervals: IntervalSet,
}

impl AdaptiveEvaluation {
    /// Per-fold comparison as CSV (ΔCov, width, Winkler for both models).
    pub fn write_fold_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "fold",
            "first_step",
            "last_step",
            "frozen_delta_cov",
            "frozen_pi_width",
            "frozen_winkler",
            "adapted_delta_cov",
            "adapted_pi_width",
            "adapted_winkler",
        ])?;
        for f in &self.folds {
            w.write_record([
                f.fold.to_string(),
                f.first_step.to_string(),
                f.last_step.to_string(),
                f.frozen.0.to_string(),
                f.frozen.1.to_string(),
                f.frozen.2.to_string(),
                f.adapted.0.to_string(),
                f.adapted.1.to_string(),
                f.adapted.2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Contiguous folds over `0..len`; the last absorbs the remainder.
pub fn fold_bounds(len: usize, n_folds: usize) -> Vec<std::ops::Range<usize>> {
    let size = len / n_folds.max(1);
    (0..n_folds)
        .map(|k| {
            let end = if k + 1 == n_folds {
                len
            } else {
                (k + 1) * size
            };
            k * size..end
        })
        .collect()
}

fn concat_intervals(parts: &[IntervalSet], alpha: f64) -> Result<IntervalSet> {
    let lower: Vec<_> = parts.iter().map(|p| p.lower.view()).collect();
    let upper: Vec<_> = parts.iter().map(|p| p.upper.view()).collect();
    let steps = parts
        .iter()
        .flat_map(|p| p.target_steps.iter().copied())
        .collect();
    let cat = |v: &[ArrayView2<'_, f64>]| {
        ndarray::concatenate(Axis(0), v).map_err(|e| Error::Shape(e.to_string()))
    };
    let mut set = IntervalSet::new(cat(&lower)?, cat(&upper)?, steps, alpha)?;
    set.fallback = parts.iter().any(|p| p.fallback);
    Ok(set)
}

/// Evaluate `model` over `target_steps` split into folds: fold 0 uses the
/// trained model, and before fold `k` the embeddings are fine-tuned on the
/// residuals of fold `k - 1`, starting from the previous fold's model.
/// `forecasts` holds the base forecasts for `target_steps`; actual values are
/// recovered as forecast plus stored residual.
#[allow(clippy::too_many_arguments)]
pub fn rolling_adaptive_eval(
    model: &RelQNModel,
    stream: &ResidualStream,
    forecasts: ArrayView2<'_, f64>,
    target_steps: &[usize],
    alpha: f64,
    beta: bool,
    config: &AdaptationConfig,
    labels: (&str, &str, u64),
) -> Result<AdaptiveEvaluation> {
    config.validate()?;
    let (w, h) = (model.config.window, model.config.horizon);
    if forecasts.nrows() != target_steps.len() || forecasts.ncols() != model.num_nodes {
        return Err(Error::Shape(format!(
            "forecasts {:?} for {} steps and {} nodes",
            forecasts.dim(),
            target_steps.len(),
            model.num_nodes
        )));
    }
    if target_steps.len() < config.n_folds * (w + h) {
        return Err(Error::InvalidInput(format!(
            "{} test steps cannot fill {} folds of at least {}",
            target_steps.len(),
            config.n_folds,
            w + h
        )));
    }
    let mut actuals = Array2::zeros(forecasts.dim());
    for (r, &t) in target_steps.iter().enumerate() {
        let row = stream
            .row(t)
            .ok_or_else(|| Error::InvalidInput(format!("no residual stored for step {t}")))?;
        for i in 0..model.num_nodes {
            actuals[[r, i]] = forecasts[[r, i]] + stream.residuals()[[row, i]];
        }
    }

    let (dataset, base, seed) = labels;
    let mut current = model.clone();
    let mut frozen_parts = Vec::new();
    let mut adapted_parts = Vec::new();
    let mut folds = Vec::new();
    let bounds = fold_bounds(target_steps.len(), config.n_folds);
    for (k, rows) in bounds.iter().enumerate() {
        if k > 0 {
            let prev = &target_steps[bounds[k - 1].clone()];
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(k as u64);
            current = adapt_embeddings(&current, stream, prev, &cfg)?;
        }
        let steps = &target_steps[rows.clone()];
        let fc = forecasts.slice(ndarray::s![rows.clone(), ..]);
        let act = actuals.slice(ndarray::s![rows.clone(), ..]);
        let frozen = model
            .predict_quantiles(stream, steps)?
            .intervals(fc, alpha, beta)?;
        let adapted = current
            .predict_quantiles(stream, steps)?
            .intervals(fc, alpha, beta)?;
        let fr = MetricReport::evaluate(&frozen, act, "frozen", dataset, base, seed)?;
        let ad = MetricReport::evaluate(&adapted, act, "adapted", dataset, base, seed)?;
        folds.push(FoldMetrics {
            fold: k,
            first_step: steps[0],
            last_step: steps[steps.len() - 1],
            frozen: (fr.delta_cov, fr.pi_width, fr.winkler),
            adapted: (ad.delta_cov, ad.pi_width, ad.winkler),
        });
        frozen_parts.push(frozen);
        adapted_parts.push(adapted);
    }
    let frozen_intervals = concat_intervals(&frozen_parts, alpha)?;
    let adapted_intervals = concat_intervals(&adapted_parts, alpha)?;
    let method = if model.config.corn_mode {
        "cornn"
    } else {
        "corel"
    };
    Ok(AdaptiveEvaluation {
        frozen: MetricReport::evaluate(
            &frozen_intervals,
            actuals.view(),
            method,
            dataset,
            base,
            seed,
        )?,
        adapted: MetricReport::evaluate(
            &adapted_intervals,
            actuals.view(),
            &format!("{method}-adapted"),
            dataset,
            base,
            seed,
        )?,
        folds,
        adapted_intervals,
        frozen_intervals,
    })
}
