//! Base point predictors: a per-node GRU shared across series and its
//! time-then-space graph variant (GRU, then message passing over a fixed
//! adjacency), trained on mean absolute error.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    admissible_targets, build_windows, fit_scaler, Scaler, SplitIndex, TimeSeriesCollection,
    WindowBatch,
};
use crate::error::{Error, Result};
use crate::gpvar::{simulate_gpvar, tri_community_graph, GpvarParams, Graph, Propagation};
use crate::nn::{
    Adam, GradCheck, Gru, Linear, MessagePassing, ParamId, ParamStore, Real, StoredParams, Tape,
    Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub hidden_size: usize,
    pub window: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub use_graph: bool,
    pub mp_layers: usize,
    pub embedding_size: usize,
    pub patience: usize,
    /// Cap on mini-batches per epoch; `None` sweeps the whole train range.
    pub max_batches_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            window: 5,
            horizon: 1,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            use_graph: false,
            mp_layers: 2,
            embedding_size: 16,
            patience: 10,
            max_batches_per_epoch: None,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.epochs == 0 || self.window == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "hidden size, epochs, window and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Short tag used in reports.
    pub fn model_name(&self) -> &'static str {
        if self.use_graph {
            "stgnn"
        } else {
            "rnn"
        }
    }
}

/// Layer layout; parameter ids depend only on the config and sizes.
#[derive(Debug, Clone)]
pub(crate) struct Net {
    embedding: Option<ParamId>,
    gru: Gru,
    mp: Vec<MessagePassing>,
    hidden: Linear,
    out: Linear,
}

impl Net {
    pub(crate) fn build<T: Real>(
        cfg: &ForecasterConfig,
        num_nodes: usize,
        input_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = cfg.hidden_size;
        let (embedding, emb_dim) = if cfg.use_graph {
            let bound = 1.0 / (cfg.embedding_size as f64).sqrt();
            let e = Array2::from_shape_fn((num_nodes, cfg.embedding_size), |_| {
                T::of(rand::Rng::gen_range(rng, -bound..bound))
            });
            (Some(store.add("embedding", e)), cfg.embedding_size)
        } else {
            (None, 0)
        };
        let gru = Gru::new(store, "gru", input_dim + emb_dim, h, rng);
        let mp = if cfg.use_graph {
            (0..cfg.mp_layers)
                .map(|l| MessagePassing::new(store, &format!("mp{l}"), h, rng))
                .collect()
        } else {
            Vec::new()
        };
        let hidden = Linear::new(store, "readout.hidden", h, h, true, rng);
        let out = Linear::new(store, "readout.out", h, 1, true, rng);
        Self {
            embedding,
            gru,
            mp,
            hidden,
            out,
        }
    }

    /// `steps[w]` is `[N*B x d_in]` node-major; returns `[N*B x 1]`.
    pub(crate) fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        steps: &[Array2<T>],
        batch: usize,
        adjacency: Option<&Array2<T>>,
        mp_layers: usize,
    ) -> Var {
        let emb = self.embedding.map(|e| {
            let e = tape.param(store, e);
            tape.repeat_rows(e, batch)
        });
        let xs: Vec<Var> = steps
            .iter()
            .map(|x| {
                let x = tape.constant(x.clone());
                match emb {
                    Some(e) => tape.concat_cols(&[x, e]),
                    None => x,
                }
            })
            .collect();
        let mut h = self.gru.run(tape, store, &xs);
        if let Some(adj) = adjacency {
            let a = tape.constant(adj.clone());
            for layer in self.mp.iter().take(mp_layers) {
                h = layer.forward(tape, store, h, a);
            }
        }
        let z = self.hidden.forward(tape, store, h);
        let z = tape.relu(z);
        self.out.forward(tape, store, z)
    }
}

/// Row-normalized adjacency for mean aggregation (isolated rows stay zero).
pub fn mean_adjacency<T: Real>(adjacency: &Array2<f64>) -> Array2<T> {
    let deg = adjacency.sum_axis(Axis(1));
    Array2::from_shape_fn(adjacency.dim(), |(i, j)| {
        T::of(adjacency[[i, j]] / deg[i].max(1.0))
    })
}

/// Scaled, node-major step matrices for a window batch.
pub(crate) fn node_major_steps<T: Real>(batch: &WindowBatch, scaler: &Scaler) -> Vec<Array2<T>> {
    let (b, w, n, d) = batch.inputs.dim();
    (0..w)
        .map(|k| {
            Array2::from_shape_fn((n * b, d), |(row, c)| {
                let v = batch.inputs[[row % b, k, row / b, c]];
                T::of(if c == 0 { scaler.transform(v) } else { v })
            })
        })
        .collect()
}

/// `[B x N]` matrix from a node-major `[N*B x 1]` column.
pub(crate) fn from_node_major<T: Real>(col: &Array2<T>, batch: usize) -> Array2<f64> {
    let n = col.nrows() / batch;
    Array2::from_shape_fn((batch, n), |(b, i)| col[[i * batch + b, 0]].f64())
}

pub(crate) fn to_node_major<T: Real>(m: &Array2<f64>, scaler: &Scaler) -> Array2<T> {
    let (b, n) = m.dim();
    Array2::from_shape_fn((n * b, 1), |(row, _)| {
        T::of(scaler.transform(m[[row % b, row / b]]))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation MAE of the restored parameters, in scaled units.
    pub best_val_mae: f64,
    /// Mean mini-batch MAE per epoch, in scaled units.
    pub train_mae: Vec<f64>,
    pub val_mae: Vec<f64>,
}

/// A trained point forecaster.
#[derive(Debug, Clone)]
pub struct PointForecaster {
    pub config: ForecasterConfig,
    pub scaler: Scaler,
    pub num_nodes: usize,
    pub input_dim: usize,
    pub params: ParamStore<f32>,
    pub edges: Option<Vec<(usize, usize)>>,
    pub meta: TrainingMeta,
    net: Net,
    adjacency: Option<Array2<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ForecasterConfig,
    scaler: Scaler,
    num_nodes: usize,
    input_dim: usize,
    edges: Option<Vec<(usize, usize)>>,
    meta: TrainingMeta,
    params: StoredParams,
}

impl PointForecaster {
    /// Fresh, untrained model.
    pub fn init(
        config: ForecasterConfig,
        scaler: Scaler,
        num_nodes: usize,
        input_dim: usize,
        graph: Option<&Graph>,
    ) -> Result<Self> {
        config.validate()?;
        if config.use_graph != graph.is_some() {
            return Err(Error::Config(if config.use_graph {
                "graph variant needs an adjacency".into()
            } else {
                "an adjacency was given to the non-graph variant".into()
            }));
        }
        if let Some(g) = graph {
            if g.num_nodes() != num_nodes {
                return Err(Error::Shape(format!(
                    "graph has {} nodes, data has {num_nodes}",
                    g.num_nodes()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let net = Net::build(&config, num_nodes, input_dim, &mut params, &mut rng);
        Ok(Self {
            meta: TrainingMeta {
                seed: config.seed,
                epochs_run: 0,
                best_epoch: 0,
                best_val_mae: f64::NAN,
                train_mae: Vec::new(),
                val_mae: Vec::new(),
            },
            config,
            scaler,
            num_nodes,
            input_dim,
            params,
            edges: graph.map(Graph::edges),
            adjacency: graph.map(|g| mean_adjacency(g.adjacency())),
            net,
        })
    }

    fn predict_scaled<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &WindowBatch,
        adjacency: Option<&Array2<T>>,
    ) -> Var {
        let steps = node_major_steps::<T>(batch, &self.scaler);
        self.net.forward(
            tape,
            store,
            &steps,
            batch.target_steps.len(),
            adjacency,
            self.config.mp_layers,
        )
    }

    /// Scaled MAE of one batch, on the tape.
    pub(crate) fn batch_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &WindowBatch,
        adjacency: Option<&Array2<T>>,
    ) -> Var {
        let pred = self.predict_scaled(tape, store, batch, adjacency);
        let target = to_node_major::<T>(&batch.targets, &self.scaler);
        tape.mae(pred, target)
    }

    fn mean_mae(&self, collection: &TimeSeriesCollection, targets: Range<usize>) -> f64 {
        let steps: Vec<usize> = targets.collect();
        let mut total = 0.0;
        for chunk in steps.chunks(256) {
            let batch = build_windows(collection, chunk, self.config.window, self.config.horizon);
            let mut tape = Tape::<f32>::new();
            let loss = self.batch_loss(&mut tape, &self.params, &batch, self.adjacency.as_ref());
            total += tape.value(loss)[[0, 0]] as f64 * chunk.len() as f64;
        }
        total / steps.len().max(1) as f64
    }

    /// Point forecasts (data units) for every admissible target in `range`.
    pub fn forecast(
        &self,
        collection: &TimeSeriesCollection,
        range: Range<usize>,
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        let (w, h) = (self.config.window, self.config.horizon);
        if range.end > collection.num_steps() || range.len() < w + h {
            return Err(Error::InvalidInput(format!(
                "range {range:?} admits no window of {w} + horizon {h}"
            )));
        }
        if collection.num_nodes() != self.num_nodes {
            return Err(Error::Shape(format!(
                "model has {} nodes, data has {}",
                self.num_nodes,
                collection.num_nodes()
            )));
        }
        let steps: Vec<usize> = admissible_targets(&range, w, h).collect();
        let mut out = Array2::zeros((steps.len(), self.num_nodes));
        let mut row = 0;
        for chunk in steps.chunks(256) {
            let batch = build_windows(collection, chunk, w, h);
            let mut tape = Tape::<f32>::new();
            let pred =
                self.predict_scaled(&mut tape, &self.params, &batch, self.adjacency.as_ref());
            let pred = from_node_major(tape.value(pred), chunk.len());
            out.slice_mut(s![row..row + chunk.len(), ..])
                .assign(&pred.mapv(|z| self.scaler.inverse(z)));
            row += chunk.len();
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite forecast".into()));
        }
        Ok((out, steps))
    }

    /// SHA-256 over parameter names and little-endian values.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for id in 0..self.params.len() {
            hasher.update(self.params.name(id).as_bytes());
            for v in self.params.value(id).iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            config: self.config.clone(),
            scaler: self.scaler,
            num_nodes: self.num_nodes,
            input_dim: self.input_dim,
            edges: self.edges.clone(),
            meta: self.meta.clone(),
            params: self.params.to_stored(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let graph = ck
            .edges
            .as_ref()
            .map(|e| Graph::from_edges(ck.num_nodes, e))
            .transpose()?;
        let mut model = Self::init(
            ck.config,
            ck.scaler,
            ck.num_nodes,
            ck.input_dim,
            graph.as_ref(),
        )?;
        let params = ParamStore::from_stored(&ck.params)?;
        if params.len() != model.params.len()
            || (0..params.len()).any(|i| {
                params.name(i) != model.params.name(i)
                    || params.value(i).dim() != model.params.value(i).dim()
            })
        {
            return Err(Error::Shape(format!(
                "checkpoint {} does not match its config",
                path.display()
            )));
        }
        model.params = params;
        model.meta = ck.meta;
        Ok(model)
    }
}

/// Train on `split.train` with MAE and Adam, early-stopping on `split.val`.
pub fn train_point_forecaster(
    collection: &TimeSeriesCollection,
    split: &SplitIndex,
    config: &ForecasterConfig,
    graph: Option<&Graph>,
) -> Result<PointForecaster> {
    train_with_progress(collection, split, config, graph, |_, _, _| {})
}

/// As [`train_point_forecaster`], calling `progress(epoch, train_mae, val_mae)`
/// after every epoch.
pub fn train_with_progress(
    collection: &TimeSeriesCollection,
    split: &SplitIndex,
    config: &ForecasterConfig,
    graph: Option<&Graph>,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<PointForecaster> {
    config.validate()?;
    let (w, h) = (config.window, config.horizon);
    if split.train.len() < w + h {
        return Err(Error::InvalidInput(format!(
            "train range of {} steps is shorter than window {w} + horizon {h}",
            split.train.len()
        )));
    }
    let scaler = fit_scaler(collection, split.train.clone())?;
    let mut model = PointForecaster::init(
        config.clone(),
        scaler,
        collection.num_nodes(),
        1 + collection.covariate_dim(),
        graph,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = Adam::new(config.learning_rate as f32, model.params.len());
    let mut train_steps: Vec<usize> = admissible_targets(&split.train, w, h).collect();
    let val_targets = if split.val.len() >= w + h {
        Some(admissible_targets(&split.val, w, h))
    } else {
        None
    };

    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        train_steps.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in train_steps.chunks(config.batch_size) {
            if config.max_batches_per_epoch.is_some_and(|m| batches >= m) {
                break;
            }
            let batch = build_windows(collection, chunk, w, h);
            let mut tape = Tape::<f32>::new();
            let loss = model.batch_loss(&mut tape, &model.params, &batch, model.adjacency.as_ref());
            let value = tape.value(loss)[[0, 0]] as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss);
            opt.step(&mut model.params, &grads);
            total += value;
            batches += 1;
        }
        let train_mae = total / batches.max(1) as f64;
        let val_mae = match &val_targets {
            Some(r) => model.mean_mae(collection, r.clone()),
            None => train_mae,
        };
        model.meta.train_mae.push(train_mae);
        model.meta.val_mae.push(val_mae);
        model.meta.epochs_run = epoch + 1;
        progress(epoch, train_mae, val_mae);
        if val_mae < best.0 {
            best = (val_mae, model.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.params = best.1;
    model.meta.best_val_mae = best.0;
    model.meta.best_epoch = best.2;
    Ok(model)
}

/// Central finite differences in f64 on every parameter scalar of a small
/// forecaster on a short GPVAR sample, against the tape gradient of the MAE
/// loss. Targets are offset so that no prediction crosses the MAE kink.
pub fn gradient_check(use_graph: bool) -> Result<GradCheck> {
    let graph = tri_community_graph(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = simulate_gpvar(
        &GpvarParams::benchmark(),
        &graph,
        Propagation::Binary,
        60,
        50,
        &mut rng,
    )?;
    let cfg = ForecasterConfig {
        hidden_size: 6,
        window: 3,
        embedding_size: 3,
        use_graph,
        ..Default::default()
    };
    let scaler = fit_scaler(&data, 0..60)?;
    let model = PointForecaster::init(
        cfg,
        scaler,
        data.num_nodes(),
        1,
        use_graph.then_some(&graph),
    )?;
    let mut batch = build_windows(&data, &[10, 20, 33], 3, 1);
    batch.targets.mapv_inplace(|v| v + 25.0);
    let store = model.params.cast::<f64>();
    let adj = use_graph.then(|| mean_adjacency::<f64>(graph.adjacency()));
    let loss_at = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = model.batch_loss(&mut tape, s, &batch, adj.as_ref());
        tape.value(l)[[0, 0]]
    };
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, &store, &batch, adj.as_ref());
    let grads = tape.backward(loss);
    let eps = 1e-4;
    let mut check = GradCheck::new();
    for id in 0..store.len() {
        let analytic = grads
            .param(id)
            .ok_or_else(|| Error::Numerical(format!("{} received no gradient", store.name(id))))?;
        for ((r, c), &a) in analytic.indexed_iter() {
            let mut up = store.clone();
            up.value_mut(id)[[r, c]] += eps;
            let mut dn = store.clone();
            dn.value_mut(id)[[r, c]] -= eps;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * eps);
            check.record(store.name(id), r, c, a, fd, 1e-6);
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, SplitSpec};

    fn small_config(use_graph: bool) -> ForecasterConfig {
        ForecasterConfig {
            hidden_size: 6,
            window: 3,
            horizon: 1,
            epochs: 3,
            batch_size: 8,
            use_graph,
            mp_layers: 2,
            embedding_size: 3,
            max_batches_per_epoch: Some(5),
            seed: 4,
            ..Default::default()
        }
    }

    fn gpvar_data(steps: usize, sigma: f64, seed: u64) -> (TimeSeriesCollection, Graph) {
        let g = tri_community_graph(2).unwrap();
        let mut p = GpvarParams::benchmark();
        p.sigma = sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            simulate_gpvar(&p, &g, Propagation::Binary, steps, 50, &mut rng).unwrap(),
            g,
        )
    }

    #[test]
    fn rnn_gradients_match_finite_differences() {
        let c = gradient_check(false).unwrap();
        assert!(c.max_rel_error < 1e-3 && c.entries > 100, "{c:?}");
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let c = gradient_check(true).unwrap();
        assert!(c.max_rel_error < 1e-3 && c.entries > 100, "{c:?}");
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let (data, g) = gpvar_data(30, 0.4, 1);
        let scaler = Scaler::identity();
        let a = PointForecaster::init(small_config(true), scaler, 12, 1, Some(&g)).unwrap();
        let mut cfg = small_config(true);
        cfg.seed = 99;
        let b = PointForecaster::init(cfg, scaler, 12, 1, Some(&g)).unwrap();
        assert_eq!(a.params.num_scalars(), b.params.num_scalars());
        let h = 6;
        let expected = 12 * 3
            + (1 + 3) * 3 * h
            + h * 3 * h
            + 2 * 3 * h
            + 2 * (h * h + h + h * h)
            + (h * h + h)
            + (h + 1);
        assert_eq!(a.params.num_scalars(), expected);
        assert!(PointForecaster::init(small_config(true), scaler, 12, 1, None).is_err());
        assert!(PointForecaster::init(small_config(false), scaler, 12, 1, Some(&g)).is_err());
        let _ = data;
    }

    #[test]
    fn zero_message_passing_reduces_to_sequence_model() {
        let (data, g) = gpvar_data(40, 0.4, 2);
        let scaler = fit_scaler(&data, 0..40).unwrap();
        let mut model = PointForecaster::init(small_config(true), scaler, 12, 1, Some(&g)).unwrap();
        for id in 0..model.params.len() {
            if model.params.name(id).starts_with("mp") {
                model.params.value_mut(id).fill(0.0);
            }
        }
        let batch = build_windows(&data, &[8, 9, 30], 3, 1);
        let store = model.params.cast::<f64>();
        let steps = node_major_steps::<f64>(&batch, &scaler);
        let eye = Array2::<f64>::eye(12);
        let run = |adj: Option<&Array2<f64>>, layers: usize| {
            let mut tape = Tape::new();
            let out = model.net.forward(&mut tape, &store, &steps, 3, adj, layers);
            tape.value(out).clone()
        };
        let with_mp = run(Some(&eye), 2);
        let without = run(None, 0);
        for (a, b) in with_mp.iter().zip(without.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (data, _) = gpvar_data(600, 0.4, 3);
        let split = make_splits(600, &SplitSpec::default()).unwrap();
        let mut cfg = small_config(false);
        cfg.epochs = 6;
        cfg.max_batches_per_epoch = Some(15);
        let a = train_point_forecaster(&data, &split, &cfg, None).unwrap();
        let b = train_point_forecaster(&data, &split, &cfg, None).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let mae = &a.meta.train_mae;
        assert!(mae.last().unwrap() < &mae[0], "{mae:?}");

        let (f, steps) = a.forecast(&data, split.test.clone()).unwrap();
        assert_eq!(f.dim(), (split.test.len() - 3, 12));
        assert_eq!(steps[0], split.test.start + 3);
        let (f2, _) = a.forecast(&data, split.test.clone()).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn constant_series_forecast_is_finite() {
        let data = TimeSeriesCollection::new(Array2::from_elem((100, 3), 2.5), None).unwrap();
        let split = make_splits(100, &SplitSpec::default()).unwrap();
        let mut cfg = small_config(false);
        cfg.epochs = 2;
        let m = train_point_forecaster(&data, &split, &cfg, None).unwrap();
        let (f, _) = m.forecast(&data, split.test.clone()).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(f.ncols(), 3);
        assert!(m.forecast(&data, 90..93).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (data, g) = gpvar_data(200, 0.4, 5);
        let split = make_splits(200, &SplitSpec::default()).unwrap();
        let mut cfg = small_config(true);
        cfg.epochs = 1;
        let m = train_point_forecaster(&data, &split, &cfg, Some(&g)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = PointForecaster::load(&p).unwrap();
        assert_eq!(back.param_hash(), m.param_hash());
        assert_eq!(
            back.forecast(&data, split.test.clone()).unwrap(),
            m.forecast(&data, split.test.clone()).unwrap()
        );
        assert!(matches!(
            PointForecaster::load(&dir.path().join("nope.json")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
