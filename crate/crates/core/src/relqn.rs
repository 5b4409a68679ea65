//! Relational quantile network over point-forecast residuals.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use num_traits::Float;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ResidualSet, Scaler, TimeSeriesCollection};
use crate::error::{Error, Result};
use crate::gpvar::Graph;
use crate::graph_learn::{export_edge_list, gumbel_topk_sample, straight_through_adjacency};
use crate::intervals::{intervals_from_quantiles, winkler_score, IntervalSet};
use crate::nn::{
    Adam, GradCheck, Gru, Linear, MessagePassing, ParamId, ParamStore, Real, StoredParams, Tape,
    Var,
};

/// Pinball (quantile) loss of predicting `q_hat` at level `alpha` for `y`.
pub fn pinball_loss<T: Float>(q_hat: T, y: T, alpha: T) -> T {
    if q_hat >= y {
        (T::one() - alpha) * (q_hat - y)
    } else {
        alpha * (y - q_hat)
    }
}

const LEVEL_TOL: f64 = 1e-9;

/// Ordered quantile levels predicted jointly by the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl Default for QuantileGrid {
    /// `{ i / 40 : i = 1..39 }`.
    fn default() -> Self {
        Self::uniform(40)
    }
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty()
            || levels.iter().any(|&l| !(l > 0.0 && l < 1.0))
            || levels.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(format!(
                "quantile levels must be strictly increasing inside (0,1): {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    /// Levels `i / m` for `i = 1..m-1`.
    pub fn uniform(m: usize) -> Self {
        Self {
            levels: (1..m).map(|i| i as f64 / m as f64).collect(),
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn index_of(&self, level: f64) -> Option<usize> {
        self.levels
            .iter()
            .position(|&l| (l - level).abs() < LEVEL_TOL)
    }

    /// Value at `level`; exact on grid points, linear between neighbours.
    /// Levels outside the grid span are an error.
    pub fn value_at(&self, values: ArrayView1<'_, f64>, level: f64) -> Result<f64> {
        if let Some(k) = self.index_of(level) {
            return Ok(values[k]);
        }
        let upper = self.levels.iter().position(|&l| l > level);
        match upper {
            Some(k) if k > 0 => {
                let (l0, l1) = (self.levels[k - 1], self.levels[k]);
                let w = (level - l0) / (l1 - l0);
                Ok(values[k - 1] * (1.0 - w) + values[k] * w)
            }
            _ => Err(Error::Config(format!(
                "level {level} is outside the quantile grid [{}, {}]",
                self.levels[0],
                self.levels[self.len() - 1]
            ))),
        }
    }
}

/// How neighbour states are combined in message passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Divide by the (detached) in-degree, clamped at one.
    Mean,
    #[default]
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelQNConfig {
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub mp_layers: usize,
    /// Residual input window `W_r`.
    pub window: usize,
    /// Residuals up to `t - horizon` predict the residual at `t`.
    pub horizon: usize,
    pub k_neighbors: usize,
    pub num_dummies: usize,
    pub aggregation: Aggregation,
    /// Share of non-sampled real entries that pass gradient to the scores.
    pub backward_fraction: f64,
    pub phi_init_std: f64,
    pub phi_lr_multiplier: f64,
    pub grid: QuantileGrid,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    /// Trailing share of calibration steps held out for model selection.
    pub val_fraction: f64,
    /// Miscoverage level of the Winkler score used for model selection.
    pub selection_alpha: f64,
    /// Feed the observed target value alongside the residual.
    pub use_values: bool,
    /// CoRNN ablation: no embeddings, no message passing.
    pub corn_mode: bool,
    pub seed: u64,
}

impl Default for RelQNConfig {
    fn default() -> Self {
        Self {
            hidden_size: 16,
            embedding_size: 8,
            mp_layers: 2,
            window: 5,
            horizon: 1,
            k_neighbors: 4,
            num_dummies: 20,
            aggregation: Aggregation::Sum,
            backward_fraction: 1.0,
            phi_init_std: 0.1,
            phi_lr_multiplier: 10.0,
            grid: QuantileGrid::default(),
            epochs: 100,
            batches_per_epoch: 50,
            batch_size: 64,
            learning_rate: 3e-3,
            lr_decay_factor: 0.25,
            lr_decay_period: 20,
            val_fraction: 0.1,
            selection_alpha: 0.1,
            use_values: true,
            corn_mode: false,
            seed: 0,
        }
    }
}

impl RelQNConfig {
    pub fn validate(&self) -> Result<()> {
        QuantileGrid::new(self.grid.levels.clone())?;
        if self.hidden_size == 0 || self.window == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "hidden size, window and batch size must be positive".into(),
            ));
        }
        if !self.corn_mode && self.embedding_size == 0 {
            return Err(Error::Config(
                "embedding size must be positive outside CoRNN mode".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config(
                "learning rate and decay factor must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0,1)",
                self.val_fraction
            )));
        }
        if !(self.selection_alpha > 0.0 && self.selection_alpha < 1.0) {
            return Err(Error::Config("selection_alpha must lie in (0,1)".into()));
        }
        if self.val_fraction > 0.0 {
            let lo = self.selection_alpha / 2.0;
            let levels = self.grid.levels();
            if lo < levels[0] - LEVEL_TOL || 1.0 - lo > levels[levels.len() - 1] + LEVEL_TOL {
                return Err(Error::Config(format!(
                    "grid does not reach the selection levels {lo} and {}",
                    1.0 - lo
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.backward_fraction) {
            return Err(Error::Config("backward_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Where the message-passing adjacency comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    /// No message passing (CoRNN).
    None,
    /// Learned edge scores, sampled with Gumbel top-K.
    Learned,
    /// Fixed undirected edge list.
    Fixed { edges: Vec<(usize, usize)> },
}

/// Residuals of one base model plus aligned encoder covariates, addressed
/// by target step. Gaps between stored steps are allowed.
#[derive(Debug, Clone)]
pub struct ResidualStream {
    first: usize,
    index: Vec<Option<usize>>,
    steps: Vec<usize>,
    residuals: Array2<f64>,
    covariates: Array3<f64>,
}

impl ResidualStream {
    /// Covariate channels: the observed value (when `use_values`) followed by
    /// the collection's exogenous covariates, if any.
    pub fn new(
        residuals: &ResidualSet,
        collection: Option<&TimeSeriesCollection>,
        use_values: bool,
    ) -> Result<Self> {
        if residuals.is_empty() {
            return Err(Error::InvalidInput("empty residual set".into()));
        }
        if residuals.target_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("residual steps must increase".into()));
        }
        let n = residuals.num_nodes();
        let s_len = residuals.len();
        if use_values && collection.is_none() {
            return Err(Error::Config("use_values needs the observed series".into()));
        }
        let mut channels: Vec<Array2<f64>> = Vec::new();
        if let Some(c) = collection {
            if c.num_nodes() != n {
                return Err(Error::Shape(format!(
                    "series has {} nodes, residuals {n}",
                    c.num_nodes()
                )));
            }
            let last = *residuals.target_steps.last().unwrap();
            if last >= c.num_steps() {
                return Err(Error::Shape(format!(
                    "residual step {last} beyond series of {} steps",
                    c.num_steps()
                )));
            }
            if use_values {
                channels.push(Array2::from_shape_fn((s_len, n), |(r, i)| {
                    c.values()[[residuals.target_steps[r], i]]
                }));
            }
            if let Some(cov) = c.covariates() {
                for k in 0..cov.dim().2 {
                    channels.push(Array2::from_shape_fn((s_len, n), |(r, i)| {
                        cov[[residuals.target_steps[r], i, k]]
                    }));
                }
            }
        }
        let covariates =
            Array3::from_shape_fn((s_len, n, channels.len()), |(r, i, k)| channels[k][[r, i]]);
        let first = residuals.target_steps[0];
        let span = residuals.target_steps[s_len - 1] - first + 1;
        let mut index = vec![None; span];
        for (r, &t) in residuals.target_steps.iter().enumerate() {
            index[t - first] = Some(r);
        }
        Ok(Self {
            first,
            index,
            steps: residuals.target_steps.clone(),
            residuals: residuals.residuals.clone(),
            covariates,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.dim().2
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn residuals(&self) -> &Array2<f64> {
        &self.residuals
    }

    pub fn covariates(&self) -> &Array3<f64> {
        &self.covariates
    }

    pub fn row(&self, step: usize) -> Option<usize> {
        step.checked_sub(self.first)
            .and_then(|k| self.index.get(k).copied().flatten())
    }

    /// Rows of the inputs for target `t`: steps `t-H-W+1 ..= t-H`.
    pub fn window_rows(&self, t: usize, window: usize, horizon: usize) -> Option<Vec<usize>> {
        let end = t.checked_sub(horizon)?;
        let start = (end + 1).checked_sub(window)?;
        (start..=end).map(|s| self.row(s)).collect()
    }

    /// Stored steps whose input window is fully stored.
    pub fn complete_targets(&self, window: usize, horizon: usize) -> Vec<usize> {
        self.steps
            .iter()
            .copied()
            .filter(|&t| self.window_rows(t, window, horizon).is_some())
            .collect()
    }
}

/// Predicted residual quantiles, sorted along the grid axis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantilePrediction {
    /// `[T' x N x |grid|]`, data units.
    pub values: Array3<f64>,
    pub target_steps: Vec<usize>,
    pub grid: QuantileGrid,
}

impl QuantilePrediction {
    /// Intervals around `forecasts` (`[T' x N]`, same rows).
    pub fn intervals(
        &self,
        forecasts: ArrayView2<'_, f64>,
        alpha: f64,
        beta: bool,
    ) -> Result<IntervalSet> {
        intervals_from_quantiles(
            forecasts,
            self.values.view(),
            &self.target_steps,
            &self.grid,
            alpha,
            beta,
        )
    }

    /// `[T' x N]` values at `level` (interpolated between grid points).
    pub fn at_level(&self, level: f64) -> Result<Array2<f64>> {
        let (t, n, _) = self.values.dim();
        let mut out = Array2::zeros((t, n));
        for r in 0..t {
            for i in 0..n {
                out[[r, i]] = self.grid.value_at(self.values.slice(s![r, i, ..]), level)?;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: Option<ParamId>,
    phi: Option<ParamId>,
    encoder: Linear,
    gru: Gru,
    mp: Vec<MessagePassing>,
    dec_hidden: Linear,
    dec_out: Linear,
}

/// Adjacency handed to the forward pass.
enum AdjMode<T> {
    /// Model's own graph: deterministic top-K of the scores, or the fixed graph.
    Model,
    /// Gumbel top-K sample with straight-through gradients.
    Sample,
    /// Already normalized dense matrix, used as a constant.
    Dense(Array2<T>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelQNMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_winkler: f64,
    /// Mean pinball loss per epoch (scaled residual units).
    pub train_loss: Vec<f64>,
    /// Validation Winkler score per epoch (data units).
    pub val_winkler: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RelQNModel {
    pub config: RelQNConfig,
    pub num_nodes: usize,
    pub covariate_dim: usize,
    pub residual_scaler: Scaler,
    pub covariate_scalers: Vec<Scaler>,
    pub graph: GraphSource,
    pub params: ParamStore<f32>,
    pub meta: RelQNMeta,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: RelQNConfig,
    num_nodes: usize,
    covariate_dim: usize,
    residual_scaler: Scaler,
    covariate_scalers: Vec<Scaler>,
    graph: GraphSource,
    meta: RelQNMeta,
    params: StoredParams,
}

impl RelQNModel {
    /// Fresh model; parameter layout depends only on the arguments.
    pub fn init(
        config: RelQNConfig,
        num_nodes: usize,
        covariate_dim: usize,
        residual_scaler: Scaler,
        covariate_scalers: Vec<Scaler>,
        graph: GraphSource,
    ) -> Result<Self> {
        config.validate()?;
        if covariate_scalers.len() != covariate_dim {
            return Err(Error::Shape(format!(
                "{} covariate scalers for {covariate_dim} channels",
                covariate_scalers.len()
            )));
        }
        let graph = if config.corn_mode {
            GraphSource::None
        } else {
            graph
        };
        match &graph {
            GraphSource::Learned => {
                let width = num_nodes + config.num_dummies;
                if config.k_neighbors == 0 || config.k_neighbors > width - 1 {
                    return Err(Error::Config(format!(
                        "k_neighbors = {} outside 1..={}",
                        config.k_neighbors,
                        width - 1
                    )));
                }
            }
            GraphSource::Fixed { edges } => {
                Graph::from_edges(num_nodes, edges)?;
            }
            GraphSource::None => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (h, dv) = (config.hidden_size, config.embedding_size);
        let embedding = (!config.corn_mode).then(|| {
            let d = Normal::new(0.0, 0.1).unwrap();
            let v = Array2::from_shape_fn((num_nodes, dv), |_| d.sample(&mut rng) as f32);
            store.add("embedding", v)
        });
        let phi = (graph == GraphSource::Learned).then(|| {
            let d = Normal::new(0.0, config.phi_init_std.max(0.0)).unwrap();
            let p = Array2::from_shape_fn((num_nodes, num_nodes + config.num_dummies), |_| {
                d.sample(&mut rng) as f32
            });
            store.add("edge_scores", p)
        });
        let emb_dim = if config.corn_mode { 0 } else { dv };
        let encoder = Linear::new(
            &mut store,
            "encoder",
            1 + covariate_dim + emb_dim,
            h,
            true,
            &mut rng,
        );
        let gru = Gru::new(&mut store, "gru", h, h, &mut rng);
        let mp = if graph == GraphSource::None {
            Vec::new()
        } else {
            (0..config.mp_layers)
                .map(|l| MessagePassing::new(&mut store, &format!("mp{l}"), h, &mut rng))
                .collect()
        };
        let dec_hidden = Linear::new(&mut store, "decoder.hidden", h + emb_dim, h, true, &mut rng);
        let dec_out = Linear::new(
            &mut store,
            "decoder.out",
            h,
            config.grid.len(),
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            num_nodes,
            covariate_dim,
            residual_scaler,
            covariate_scalers,
            graph,
            params: store,
            meta: RelQNMeta::default(),
            layout: Layout {
                embedding,
                phi,
                encoder,
                gru,
                mp,
                dec_hidden,
                dec_out,
            },
        })
    }

    pub fn embedding_id(&self) -> Option<ParamId> {
        self.layout.embedding
    }

    pub fn edge_score_id(&self) -> Option<ParamId> {
        self.layout.phi
    }

    /// Edge scores `[N x (N+D)]`, when the graph is learned.
    pub fn edge_scores(&self) -> Option<Array2<f64>> {
        self.layout
            .phi
            .map(|id| self.params.value(id).mapv(f64::from))
    }

    /// Binary adjacency used at test time (`a[i, j] = 1` if `i` reads `j`).
    pub fn test_adjacency(&self) -> Result<Option<Array2<f64>>> {
        Ok(match &self.graph {
            GraphSource::None => None,
            GraphSource::Fixed { edges } => Some(
                Graph::from_edges(self.num_nodes, edges)?
                    .adjacency()
                    .clone(),
            ),
            GraphSource::Learned => {
                let phi = self.edge_scores().expect("learned graph has scores");
                let mut rng = rand::rngs::mock::StepRng::new(0, 0);
                Some(gumbel_topk_sample(phi.view(), self.config.k_neighbors, &mut rng, true)?.hard)
            }
        })
    }

    /// Write the deterministic top-K graph as an edge list.
    pub fn export_graph(&self, path: &Path) -> Result<()> {
        match self.edge_scores() {
            Some(phi) => export_edge_list(phi.view(), self.config.k_neighbors, path),
            None => Err(Error::Config("model has no learned graph".into())),
        }
    }

    fn normalize<T: Real>(&self, adj: &Array2<f64>) -> Array2<T> {
        match self.config.aggregation {
            Aggregation::Sum => adj.mapv(T::of),
            Aggregation::Mean => crate::forecaster::mean_adjacency(adj),
        }
    }

    fn adjacency_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mode: AdjMode<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>> {
        if self.graph == GraphSource::None {
            return Ok(None);
        }
        match mode {
            AdjMode::Dense(a) => Ok(Some(tape.constant(a))),
            AdjMode::Sample if self.graph == GraphSource::Learned => {
                let phi = tape.param(store, self.layout.phi.expect("scores"));
                let sampled = gumbel_topk_sample(
                    tape.value(phi).view(),
                    self.config.k_neighbors,
                    rng,
                    false,
                )?;
                let a = straight_through_adjacency(
                    tape,
                    phi,
                    &sampled,
                    self.config.backward_fraction,
                    rng,
                );
                Ok(Some(match self.config.aggregation {
                    Aggregation::Sum => a,
                    Aggregation::Mean => {
                        let inv = Array1::from_iter(
                            sampled
                                .degrees()
                                .into_iter()
                                .map(|d| T::of(1.0 / d.max(1) as f64)),
                        );
                        tape.row_scale(a, inv)
                    }
                }))
            }
            _ => {
                let adj = self.test_adjacency()?.expect("graph present");
                Ok(Some(tape.constant(self.normalize(&adj))))
            }
        }
    }

    /// Scaled node-major inputs, one `[N*B x (1+c)]` matrix per window step.
    fn scaled_inputs<T: Real>(
        &self,
        residuals: ArrayView3<'_, f64>,
        covariates: Option<ArrayView4<'_, f64>>,
    ) -> Vec<Array2<T>> {
        let (b, w, n) = residuals.dim();
        let c = self.covariate_dim;
        (0..w)
            .map(|k| {
                Array2::from_shape_fn((n * b, 1 + c), |(row, ch)| {
                    let (i, bb) = (row / b, row % b);
                    T::of(if ch == 0 {
                        self.residual_scaler.transform(residuals[[bb, k, i]])
                    } else {
                        let cov = covariates.as_ref().expect("covariates checked");
                        self.covariate_scalers[ch - 1].transform(cov[[bb, k, i, ch - 1]])
                    })
                })
            })
            .collect()
    }

    /// Scaled quantile outputs `[N*B x |grid|]`.
    fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[Array2<T>],
        batch: usize,
        adj: Option<Var>,
    ) -> Var {
        let l = &self.layout;
        let emb = l.embedding.map(|e| {
            let e = tape.param(store, e);
            tape.repeat_rows(e, batch)
        });
        let xs: Vec<Var> = inputs
            .iter()
            .map(|x| {
                let x = tape.constant(x.clone());
                let x = match emb {
                    Some(e) => tape.concat_cols(&[x, e]),
                    None => x,
                };
                let z = l.encoder.forward(tape, store, x);
                tape.relu(z)
            })
            .collect();
        let mut h = l.gru.run(tape, store, &xs);
        if let Some(a) = adj {
            for layer in &l.mp {
                h = layer.forward(tape, store, h, a);
            }
        }
        let h = match emb {
            Some(e) => tape.concat_cols(&[h, e]),
            None => h,
        };
        let z = l.dec_hidden.forward(tape, store, h);
        let z = tape.relu(z);
        l.dec_out.forward(tape, store, z)
    }

    fn check_window(
        &self,
        residuals: &ArrayView3<'_, f64>,
        covariates: &Option<ArrayView4<'_, f64>>,
    ) -> Result<()> {
        let (b, w, n) = residuals.dim();
        if n != self.num_nodes || w == 0 || b == 0 {
            return Err(Error::Shape(format!(
                "residual window {:?} for a {}-node model",
                residuals.dim(),
                self.num_nodes
            )));
        }
        match covariates {
            None if self.covariate_dim > 0 => Err(Error::Shape(format!(
                "model expects {} covariate channels",
                self.covariate_dim
            ))),
            Some(c) if c.dim() != (b, w, n, self.covariate_dim) => Err(Error::Shape(format!(
                "covariates {:?} vs expected {:?}",
                c.dim(),
                (b, w, n, self.covariate_dim)
            ))),
            _ => Ok(()),
        }
    }

    /// Raw quantile outputs `[B x N x |grid|]` in data units for a residual
    /// window `[B x W x N]` (unsorted). `adjacency` overrides the model's own
    /// graph with a binary `[N x N]` matrix.
    pub fn forward(
        &self,
        residuals: ArrayView3<'_, f64>,
        covariates: Option<ArrayView4<'_, f64>>,
        adjacency: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array3<f64>> {
        self.check_window(&residuals, &covariates)?;
        let mode = match adjacency {
            Some(a) => {
                if a.dim() != (self.num_nodes, self.num_nodes) {
                    return Err(Error::Shape(format!(
                        "adjacency {:?} for {} nodes",
                        a.dim(),
                        self.num_nodes
                    )));
                }
                if a.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidInput("adjacency must be binary".into()));
                }
                AdjMode::Dense(self.normalize::<f32>(&a.to_owned()))
            }
            None => AdjMode::Model,
        };
        let b = residuals.dim().0;
        let inputs = self.scaled_inputs::<f32>(residuals, covariates);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adj = self.adjacency_var(&mut tape, &self.params, mode, &mut rng)?;
        let out = self.forward_tape(&mut tape, &self.params, &inputs, b, adj);
        Ok(self.unscale(tape.value(out), b))
    }

    fn unscale<T: Real>(&self, out: &Array2<T>, batch: usize) -> Array3<f64> {
        let g = out.ncols();
        let n = out.nrows() / batch;
        Array3::from_shape_fn((batch, n, g), |(b, i, k)| {
            self.residual_scaler.inverse(out[[i * batch + b, k]].f64())
        })
    }

    fn gather(
        &self,
        stream: &ResidualStream,
        targets: &[usize],
    ) -> Result<(Array3<f64>, Option<Array4Owned>)> {
        let (w, h) = (self.config.window, self.config.horizon);
        let n = stream.num_nodes();
        let c = stream.covariate_dim();
        let mut res = Array3::zeros((targets.len(), w, n));
        let mut cov = (c > 0).then(|| ndarray::Array4::zeros((targets.len(), w, n, c)));
        for (b, &t) in targets.iter().enumerate() {
            let rows = stream.window_rows(t, w, h).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "input window for target step {t} is not fully stored"
                ))
            })?;
            for (k, &r) in rows.iter().enumerate() {
                res.slice_mut(s![b, k, ..]).assign(&stream.residuals.row(r));
                if let Some(cv) = cov.as_mut() {
                    cv.slice_mut(s![b, k, .., ..])
                        .assign(&stream.covariates.slice(s![r, .., ..]));
                }
            }
        }
        Ok((res, cov))
    }

    fn check_stream(&self, stream: &ResidualStream) -> Result<()> {
        if stream.num_nodes() != self.num_nodes || stream.covariate_dim() != self.covariate_dim {
            return Err(Error::Shape(format!(
                "stream with {} nodes and {} covariates for a model with {} and {}",
                stream.num_nodes(),
                stream.covariate_dim(),
                self.num_nodes,
                self.covariate_dim
            )));
        }
        Ok(())
    }

    fn predict_with(
        &self,
        stream: &ResidualStream,
        targets: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<QuantilePrediction> {
        self.check_stream(stream)?;
        let g = self.config.grid.len();
        let mut values = Array3::zeros((targets.len(), self.num_nodes, g));
        let mut fallback_rng = ChaCha8Rng::seed_from_u64(0);
        let mut row = 0;
        for chunk in targets.chunks(256) {
            let (res, cov) = self.gather(stream, chunk)?;
            let inputs = self.scaled_inputs::<f32>(res.view(), cov.as_ref().map(|c| c.view()));
            let mut tape = Tape::new();
            let (mode, r) = match rng.as_deref_mut() {
                Some(r) => (AdjMode::Sample, r),
                None => (AdjMode::Model, &mut fallback_rng),
            };
            let adj = self.adjacency_var(&mut tape, &self.params, mode, r)?;
            let out = self.forward_tape(&mut tape, &self.params, &inputs, chunk.len(), adj);
            let mut q = self.unscale(tape.value(out), chunk.len());
            for mut lane in q.lanes_mut(Axis(2)) {
                let mut v = lane.to_vec();
                v.sort_by(f64::total_cmp);
                lane.assign(&Array1::from(v));
            }
            values
                .slice_mut(s![row..row + chunk.len(), .., ..])
                .assign(&q);
            row += chunk.len();
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite quantile prediction".into()));
        }
        Ok(QuantilePrediction {
            values,
            target_steps: targets.to_vec(),
            grid: self.config.grid.clone(),
        })
    }

    /// Sorted quantiles for `targets`, using the deterministic test graph.
    pub fn predict_quantiles(
        &self,
        stream: &ResidualStream,
        targets: &[usize],
    ) -> Result<QuantilePrediction> {
        self.predict_with(stream, targets, None)
    }

    /// As [`Self::predict_quantiles`] with a fresh graph sample per batch.
    pub fn predict_quantiles_sampled(
        &self,
        stream: &ResidualStream,
        targets: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<QuantilePrediction> {
        self.predict_with(stream, targets, Some(rng))
    }

    /// Mean Winkler score of the residual-space interval at `alpha`.
    pub fn residual_winkler(
        &self,
        stream: &ResidualStream,
        targets: &[usize],
        alpha: f64,
    ) -> Result<f64> {
        let q = self.predict_quantiles(stream, targets)?;
        let lo = q.at_level(alpha / 2.0)?;
        let hi = q.at_level(1.0 - alpha / 2.0)?;
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let r = stream.row(t).ok_or_else(|| {
                Error::InvalidInput(format!("no residual stored for target step {t}"))
            })?;
            for i in 0..self.num_nodes {
                total += winkler_score(lo[[b, i]], hi[[b, i]], stream.residuals[[r, i]], alpha);
            }
        }
        Ok(total / (targets.len() * self.num_nodes).max(1) as f64)
    }

    /// Scaled pinball loss of a mini-batch on the tape.
    fn batch_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        stream: &ResidualStream,
        targets: &[usize],
        mode: AdjMode<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (res, cov) = self.gather(stream, targets)?;
        let inputs = self.scaled_inputs::<T>(res.view(), cov.as_ref().map(|c| c.view()));
        let b = targets.len();
        let n = self.num_nodes;
        let mut y = Array2::zeros((n * b, 1));
        for (bb, &t) in targets.iter().enumerate() {
            let r = stream.row(t).ok_or_else(|| {
                Error::InvalidInput(format!("no residual stored for target step {t}"))
            })?;
            for i in 0..n {
                y[[i * b + bb, 0]] =
                    T::of(self.residual_scaler.transform(stream.residuals[[r, i]]));
            }
        }
        let adj = self.adjacency_var(tape, store, mode, rng)?;
        let q = self.forward_tape(tape, store, &inputs, b, adj);
        let levels: Vec<T> = self
            .config
            .grid
            .levels()
            .iter()
            .map(|&l| T::of(l))
            .collect();
        Ok(tape.pinball(q, y, &levels))
    }

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
            num_nodes: self.num_nodes,
            covariate_dim: self.covariate_dim,
            residual_scaler: self.residual_scaler,
            covariate_scalers: self.covariate_scalers.clone(),
            graph: self.graph.clone(),
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
        let mut model = Self::init(
            ck.config,
            ck.num_nodes,
            ck.covariate_dim,
            ck.residual_scaler,
            ck.covariate_scalers,
            ck.graph,
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

type Array4Owned = ndarray::Array4<f64>;

/// Optimization schedule shared by training and adaptation.
#[derive(Debug, Clone)]
pub(crate) struct FitSchedule {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: Option<(f64, usize)>,
    pub phi_lr_multiplier: f64,
    /// Train on Gumbel samples (true) or the deterministic graph (false).
    pub sample_graph: bool,
}

/// Mini-batch Adam on the pinball loss; optionally keeps the parameters of
/// the epoch with the lowest validation Winkler score.
pub(crate) fn fit(
    model: &mut RelQNModel,
    stream: &ResidualStream,
    train_targets: &[usize],
    val_targets: &[usize],
    schedule: &FitSchedule,
    rng: &mut ChaCha8Rng,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<()> {
    if schedule.epochs == 0 {
        return Ok(());
    }
    if train_targets.is_empty() {
        return Err(Error::InvalidInput("no complete training windows".into()));
    }
    let mut opt = Adam::new(schedule.learning_rate as f32, model.params.len());
    if let Some(phi) = model.layout.phi {
        opt.set_multiplier(phi, schedule.phi_lr_multiplier as f32);
    }
    let bs = schedule.batch_size.min(train_targets.len());
    let alpha = model.config.selection_alpha;
    let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
    for epoch in 0..schedule.epochs {
        let mut total = 0.0;
        for _ in 0..schedule.batches_per_epoch {
            let idx = sample(rng, train_targets.len(), bs);
            let batch: Vec<usize> = idx.iter().map(|k| train_targets[k]).collect();
            let mode = if schedule.sample_graph {
                AdjMode::Sample
            } else {
                AdjMode::Model
            };
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, &model.params, stream, &batch, mode, rng)?;
            let value = tape.value(loss)[[0, 0]] as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite pinball loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss);
            opt.step(&mut model.params, &grads);
            total += value;
        }
        if let Some((factor, period)) = schedule.decay {
            if period > 0 && (epoch + 1) % period == 0 {
                opt.lr *= factor as f32;
            }
        }
        let train_loss = total / schedule.batches_per_epoch.max(1) as f64;
        let val = if val_targets.is_empty() {
            f64::NAN
        } else {
            model.residual_winkler(stream, val_targets, alpha)?
        };
        model.meta.train_loss.push(train_loss);
        model.meta.val_winkler.push(val);
        model.meta.epochs_run += 1;
        progress(epoch, train_loss, val);
        if !val_targets.is_empty() && best.as_ref().map_or(true, |b| val < b.0) {
            best = Some((val, model.params.clone(), epoch));
        }
    }
    match best {
        Some((val, params, epoch)) => {
            model.params = params;
            model.meta.best_val_winkler = val;
            model.meta.best_epoch = epoch;
        }
        None => {
            model.meta.best_val_winkler = f64::NAN;
            model.meta.best_epoch = schedule.epochs - 1;
        }
    }
    Ok(())
}

/// Fit a relational quantile network on calibration residuals.
///
/// `true_graph` fixes the adjacency instead of learning it.
pub fn train_relqn(
    residuals: &ResidualSet,
    collection: Option<&TimeSeriesCollection>,
    config: &RelQNConfig,
    true_graph: Option<&Graph>,
) -> Result<RelQNModel> {
    train_relqn_with_progress(residuals, collection, config, true_graph, |_, _, _| {})
}

/// As [`train_relqn`], calling `progress(epoch, train_loss, val_winkler)`.
pub fn train_relqn_with_progress(
    residuals: &ResidualSet,
    collection: Option<&TimeSeriesCollection>,
    config: &RelQNConfig,
    true_graph: Option<&Graph>,
    progress: impl FnMut(usize, f64, f64),
) -> Result<RelQNModel> {
    config.validate()?;
    let stream = ResidualStream::new(residuals, collection, config.use_values)?;
    let (w, h) = (config.window, config.horizon);
    let targets = stream.complete_targets(w, h);
    if targets.is_empty() {
        return Err(Error::InvalidInput(format!(
            "calibration residuals span fewer than window {w} + horizon {h} steps"
        )));
    }
    let steps = stream.steps();
    let n_val = (steps.len() as f64 * config.val_fraction).ceil() as usize;
    let cut = if n_val == 0 {
        usize::MAX
    } else {
        steps[steps.len() - n_val.min(steps.len())]
    };
    let (train, val): (Vec<usize>, Vec<usize>) = targets.iter().partition(|&&t| t < cut);
    if train.is_empty() {
        return Err(Error::InvalidInput(
            "validation slice leaves no training windows".into(),
        ));
    }
    let residual_scaler = Scaler::fit(stream.residuals.iter())?;
    let covariate_scalers = (0..stream.covariate_dim())
        .map(|k| Scaler::fit(stream.covariates.slice(s![.., .., k]).iter()))
        .collect::<Result<Vec<_>>>()?;
    let graph = if config.corn_mode {
        GraphSource::None
    } else {
        match true_graph {
            Some(g) => GraphSource::Fixed { edges: g.edges() },
            None => GraphSource::Learned,
        }
    };
    let mut model = RelQNModel::init(
        config.clone(),
        stream.num_nodes(),
        stream.covariate_dim(),
        residual_scaler,
        covariate_scalers,
        graph,
    )?;
    let schedule = FitSchedule {
        epochs: config.epochs,
        batches_per_epoch: config.batches_per_epoch,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        decay: Some((config.lr_decay_factor, config.lr_decay_period)),
        phi_lr_multiplier: config.phi_lr_multiplier,
        sample_graph: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    fit(
        &mut model, &stream, &train, &val, &schedule, &mut rng, progress,
    )?;
    Ok(model)
}

/// Standard normal residuals (plus `shift`) at steps `10..10 + steps`.
fn toy_residuals(steps: usize, n: usize, seed: u64, shift: f64) -> ResidualSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    ResidualSet {
        residuals: Array2::from_shape_fn((steps, n), |_| d.sample(&mut rng) + shift),
        target_steps: (10..10 + steps).collect(),
        horizon: 1,
    }
}

fn toy_series(steps: usize, n: usize) -> TimeSeriesCollection {
    TimeSeriesCollection::new(
        Array2::from_shape_fn((steps, n), |(t, i)| ((t + 3 * i) as f64 * 0.3).sin()),
        None,
    )
    .unwrap()
}

/// Central finite differences in f64 on every parameter scalar of a small
/// learned-graph network, against the tape gradient of the pinball loss
/// with a sampled graph. The edge scores are compared with the
/// straight-through surrogate `hard + softmax(phi')[:, :N] - softmax(phi)[:, :N]`
/// evaluated at the same hard sample.
pub fn gradient_check() -> Result<GradCheck> {
    let n = 4;
    let cfg = RelQNConfig {
        hidden_size: 5,
        embedding_size: 3,
        window: 3,
        k_neighbors: 2,
        num_dummies: 2,
        grid: QuantileGrid::uniform(20),
        ..Default::default()
    };
    let res = toy_residuals(80, n, 1, 0.0);
    let data = toy_series(100, n);
    let stream = ResidualStream::new(&res, Some(&data), true)?;
    let model = RelQNModel::init(
        cfg,
        n,
        1,
        Scaler::fit(res.residuals.iter())?,
        vec![Scaler::identity()],
        GraphSource::Learned,
    )?;
    let mut store = model.params.cast::<f64>();
    let phi_id = model.edge_score_id().expect("learned graph has scores");
    // spread the scores so the sampled graph is not degenerate
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = rand_distr::Uniform::new(-1.0, 1.0);
    store.value_mut(phi_id).mapv_inplace(|_| u.sample(&mut rng));
    let targets = [20, 35, 50];

    let mut tape = Tape::new();
    let mut srng = ChaCha8Rng::seed_from_u64(9);
    let loss = model.batch_loss(
        &mut tape,
        &store,
        &stream,
        &targets,
        AdjMode::Sample,
        &mut srng,
    )?;
    let grads = tape.backward(loss);
    // replay the same sample to recover the hard graph
    let mut srng = ChaCha8Rng::seed_from_u64(9);
    let hard = gumbel_topk_sample(store.value(phi_id).view(), 2, &mut srng, false)?.hard;
    let probs = crate::graph_learn::row_softmax(store.value(phi_id).view());
    let loss_at = |s2: &ParamStore<f64>| -> Result<f64> {
        let p2 = crate::graph_learn::row_softmax(s2.value(phi_id).view());
        let adj = &hard + &(&p2 - &probs).slice(s![.., ..n]);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = model.batch_loss(
            &mut tape,
            s2,
            &stream,
            &targets,
            AdjMode::Dense(adj),
            &mut rng,
        )?;
        Ok(tape.value(l)[[0, 0]])
    };
    let eps = 1e-5;
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
            let fd = (loss_at(&up)? - loss_at(&dn)?) / (2.0 * eps);
            check.record(store.name(id), r, c, a, fd, 1e-6);
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(0.0, 2.0, 0.5), 1.0);
        assert!((pinball_loss(1.0, 0.0, 0.9) - 0.1).abs() < 1e-12);
        assert!((pinball_loss(0.0, 1.0, 0.9) - 0.9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pinball_is_convex(a in -5.0..5.0f64, b in -5.0..5.0f64, y in -5.0..5.0f64, alpha in 0.01..0.99f64) {
            let mid = pinball_loss((a + b) / 2.0, y, alpha);
            let avg = (pinball_loss(a, y, alpha) + pinball_loss(b, y, alpha)) / 2.0;
            prop_assert!(mid <= avg + 1e-12);
            prop_assert!(pinball_loss(a, y, alpha) >= 0.0);
        }
    }

    #[test]
    fn grid_defaults_and_interpolation() {
        let g = QuantileGrid::default();
        assert_eq!(g.len(), 39);
        assert_eq!(g.index_of(0.05), Some(1));
        assert_eq!(g.index_of(0.95), Some(37));
        for k in 0..39 {
            assert!((g.levels()[k] + g.levels()[38 - k] - 1.0).abs() < 1e-12);
        }
        let v = Array1::from_iter((1..40).map(|i| i as f64));
        assert!((g.value_at(v.view(), 0.0375).unwrap() - 1.5).abs() < 1e-9);
        assert!(g.value_at(v.view(), 0.01).is_err());
        assert!(QuantileGrid::new(vec![0.5, 0.4]).is_err());
    }

    fn small_config() -> RelQNConfig {
        RelQNConfig {
            hidden_size: 5,
            embedding_size: 3,
            window: 3,
            k_neighbors: 2,
            num_dummies: 2,
            grid: QuantileGrid::uniform(20),
            epochs: 2,
            batches_per_epoch: 5,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        }
    }

    fn small_model(cfg: RelQNConfig, n: usize, graph: GraphSource) -> (RelQNModel, ResidualStream) {
        let res = toy_residuals(80, n, 1, 0.0);
        let data = toy_series(100, n);
        let stream = ResidualStream::new(&res, Some(&data), true).unwrap();
        let m = RelQNModel::init(
            cfg,
            n,
            1,
            Scaler::fit(res.residuals.iter()).unwrap(),
            vec![Scaler::identity()],
            graph,
        )
        .unwrap();
        (m, stream)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = gradient_check().unwrap();
        assert!(c.max_rel_error < 1e-3 && c.entries > 100, "{c:?}");
    }

    #[test]
    fn output_shape_and_sorted_predictions() {
        let (model, stream) = small_model(small_config(), 4, GraphSource::Learned);
        let targets = stream.complete_targets(3, 1);
        assert_eq!(targets[0], 13);
        let q = model.predict_quantiles(&stream, &targets).unwrap();
        assert_eq!(q.values.dim(), (targets.len(), 4, 19));
        for lane in q.values.lanes(Axis(2)) {
            assert!(lane.windows(2).into_iter().all(|w| w[0] <= w[1]));
        }
        assert_eq!(q, model.predict_quantiles(&stream, &targets).unwrap());
        let (res, cov) = model.gather(&stream, &targets[..7]).unwrap();
        let raw = model
            .forward(res.view(), cov.as_ref().map(|c| c.view()), None)
            .unwrap();
        assert_eq!(raw.dim(), (7, 4, 19));
        assert!(model.predict_quantiles(&stream, &[11]).is_err());
    }

    #[test]
    fn corn_mode_ignores_adjacency_and_is_equivariant() {
        let mut cfg = small_config();
        cfg.corn_mode = true;
        let (model, stream) = small_model(cfg, 5, GraphSource::Learned);
        assert_eq!(model.graph, GraphSource::None);
        assert!(model.embedding_id().is_none());
        let (res, cov) = model.gather(&stream, &[20, 40]).unwrap();
        let cov = cov.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_adj = || {
            let mut a =
                Array2::from_shape_fn((5, 5), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            a.diag_mut().fill(0.0);
            a
        };
        let a1 = model
            .forward(res.view(), Some(cov.view()), Some(rand_adj().view()))
            .unwrap();
        let a2 = model
            .forward(res.view(), Some(cov.view()), Some(rand_adj().view()))
            .unwrap();
        assert_eq!(a1, a2);

        let perm = [3, 0, 4, 1, 2];
        let pres = Array3::from_shape_fn(res.dim(), |(b, w, i)| res[[b, w, perm[i]]]);
        let pcov =
            ndarray::Array4::from_shape_fn(cov.dim(), |(b, w, i, c)| cov[[b, w, perm[i], c]]);
        let out = model.forward(pres.view(), Some(pcov.view()), None).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                for k in 0..19 {
                    assert!((out[[b, i, k]] - a1[[b, perm[i], k]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_decoder_bias() {
        let mut cfg = small_config();
        cfg.corn_mode = true;
        let (mut model, stream) = small_model(cfg, 3, GraphSource::None);
        let bias_id = model.layout.dec_out.bias.unwrap();
        for id in 0..model.params.len() {
            model.params.value_mut(id).fill(0.0);
        }
        let bias = Array2::from_shape_fn((1, 19), |(_, k)| k as f32 * 0.5 - 1.0);
        model.params.value_mut(bias_id).assign(&bias);
        let (res, cov) = model.gather(&stream, &[30, 31]).unwrap();
        let out = model
            .forward(res.view(), cov.as_ref().map(|c| c.view()), None)
            .unwrap();
        for b in 0..2 {
            for i in 0..3 {
                for k in 0..19 {
                    let want = model.residual_scaler.inverse(bias[[0, k]] as f64);
                    assert!((out[[b, i, k]] - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn message_passing_is_two_hop_local() {
        let n = 6;
        let path: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let (model, stream) = small_model(small_config(), n, GraphSource::Fixed { edges: path });
        let (res, cov) = model.gather(&stream, &[30]).unwrap();
        let base = model
            .forward(res.view(), cov.as_ref().map(|c| c.view()), None)
            .unwrap();
        let mut pert = res.clone();
        pert.slice_mut(s![.., .., 0]).mapv_inplace(|v| v + 3.0);
        let moved = model
            .forward(pert.view(), cov.as_ref().map(|c| c.view()), None)
            .unwrap();
        for i in 0..n {
            let diff: f64 = (0..19)
                .map(|k| (moved[[0, i, k]] - base[[0, i, k]]).abs())
                .sum();
            if i <= 2 {
                assert!(diff > 1e-6, "node {i} should feel node 0");
            } else {
                assert_eq!(diff, 0.0, "node {i} is beyond two hops");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let res = toy_residuals(600, 4, 7, 0.0);
        let data = toy_series(700, 4);
        let mut cfg = small_config();
        cfg.epochs = 6;
        cfg.batches_per_epoch = 10;
        let a = train_relqn(&res, Some(&data), &cfg, None).unwrap();
        let b = train_relqn(&res, Some(&data), &cfg, None).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert!(a.meta.train_loss.last().unwrap() < &a.meta.train_loss[0]);
        assert!(a.meta.best_val_winkler.is_finite());

        let g = Graph::from_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let t = train_relqn(&res, Some(&data), &cfg, Some(&g)).unwrap();
        assert_eq!(t.graph, GraphSource::Fixed { edges: g.edges() });
        assert!(t.edge_score_id().is_none());
        assert_eq!(t.test_adjacency().unwrap().unwrap(), *g.adjacency());

        let short = toy_residuals(3, 4, 7, 0.0);
        assert!(train_relqn(&short, Some(&data), &cfg, None).is_err());
    }

    #[test]
    fn median_head_learns_symmetric_center() {
        let res = toy_residuals(3000, 3, 11, 0.0);
        let data = toy_series(3100, 3);
        let cfg = RelQNConfig {
            grid: QuantileGrid::new(vec![0.5]).unwrap(),
            hidden_size: 8,
            embedding_size: 4,
            window: 4,
            k_neighbors: 1,
            num_dummies: 2,
            epochs: 30,
            batches_per_epoch: 20,
            lr_decay_period: 10,
            val_fraction: 0.0,
            seed: 2,
            ..Default::default()
        };
        let m = train_relqn(&res, Some(&data), &cfg, None).unwrap();
        let stream = ResidualStream::new(&res, Some(&data), true).unwrap();
        let targets = stream.complete_targets(4, 1);
        let q = m.predict_quantiles(&stream, &targets).unwrap();
        let mean = q.values.mean().unwrap();
        assert!(mean.abs() < 0.05, "mean median {mean}");
    }

    #[test]
    fn checkpoint_round_trip_and_export() {
        let res = toy_residuals(200, 4, 3, 0.0);
        let data = toy_series(300, 4);
        let mut cfg = small_config();
        cfg.epochs = 1;
        let m = train_relqn(&res, Some(&data), &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("relqn.json");
        m.save(&p).unwrap();
        let back = RelQNModel::load(&p).unwrap();
        assert_eq!(back.param_hash(), m.param_hash());
        let stream = ResidualStream::new(&res, Some(&data), true).unwrap();
        let t = stream.complete_targets(3, 1);
        assert_eq!(
            back.predict_quantiles(&stream, &t).unwrap(),
            m.predict_quantiles(&stream, &t).unwrap()
        );
        let e = dir.path().join("edges.csv");
        m.export_graph(&e).unwrap();
        let lines = std::fs::read_to_string(&e).unwrap().lines().count();
        assert!((1..=1 + 4 * 2).contains(&lines));
        assert!(matches!(
            RelQNModel::load(&dir.path().join("x.json")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn stream_handles_gaps() {
        let mut a = toy_residuals(10, 2, 1, 0.0);
        let b = ResidualSet {
            residuals: Array2::zeros((5, 2)),
            target_steps: (25..30).collect(),
            horizon: 1,
        };
        a = a.concat(&b).unwrap();
        let s = ResidualStream::new(&a, None, false).unwrap();
        assert_eq!(s.covariate_dim(), 0);
        assert_eq!(s.row(25), Some(10));
        assert_eq!(s.row(21), None);
        let t = s.complete_targets(3, 1);
        assert_eq!(t, vec![13, 14, 15, 16, 17, 18, 19, 28, 29]);
        assert!(ResidualStream::new(&a, None, true).is_err());
    }
}
