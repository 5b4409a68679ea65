//! Synthetic benchmark: community graphs and the graph polynomial VAR process
//!
//! ```text
//! H_t     = sum_{l=1..L} sum_{q=1..Q} theta[q,l] * S^(l-1) X_{t-q}
//! X_{t+1} = a * tanh(H_t) + b * tanh(X_{t-1}) + eta_t,   eta_t ~ N(0, sigma^2 I)
//! ```
//!
//! where `S` is the propagation matrix (the binary adjacency by default).

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesCollection;
use crate::error::{Error, Result};

/// Undirected graph over `N` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Array2<f64>,
    propagation: Option<Array2<f64>>,
}

impl Graph {
    /// Build from a binary symmetric adjacency with zero diagonal.
    pub fn from_adjacency(adjacency: Array2<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::Shape(format!(
                "adjacency must be square, got {:?}",
                adjacency.dim()
            )));
        }
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::InvalidInput(format!("self loop at node {i}")));
            }
            for j in 0..n {
                let v = adjacency[[i, j]];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "adjacency must be binary, found {v} at ({i},{j})"
                    )));
                }
                if v != adjacency[[j, i]] {
                    return Err(Error::InvalidInput(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            adjacency,
            propagation: None,
        })
    }

    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Array2::zeros((num_nodes, num_nodes));
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidInput(format!(
                    "edge ({u},{v}) outside {num_nodes} nodes"
                )));
            }
            if u != v {
                a[[u, v]] = 1.0;
                a[[v, u]] = 1.0;
            }
        }
        Self::from_adjacency(a)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn propagation(&self) -> Option<&Array2<f64>> {
        self.propagation.as_ref()
    }

    /// Undirected edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if self.adjacency[[u, v]] != 0.0 {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn degrees(&self) -> Array1<f64> {
        self.adjacency.sum_axis(ndarray::Axis(1))
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if self.adjacency[[u, v]] != 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// `C` cliques of size `N / C` arranged in a ring, consecutive cliques joined
/// by one bridge edge from the last node of one to the first node of the next.
pub fn community_graph(num_nodes: usize, communities: usize) -> Result<Graph> {
    if communities == 0 || num_nodes % communities != 0 {
        return Err(Error::InvalidInput(format!(
            "{communities} communities do not evenly divide {num_nodes} nodes"
        )));
    }
    let size = num_nodes / communities;
    let mut edges = Vec::new();
    for c in 0..communities {
        let off = c * size;
        for i in 0..size {
            for j in i + 1..size {
                edges.push((off + i, off + j));
            }
        }
    }
    // with two communities the ring degenerates to a double bridge
    let bridges = match communities {
        1 => 0,
        2 => 2,
        c => c,
    };
    for c in 0..bridges {
        let (a, b) = if communities == 2 {
            (c, 1 - c)
        } else {
            (c, (c + 1) % communities)
        };
        let u = a * size + size - 1;
        let v = b * size + if communities == 2 { c % size } else { 0 };
        edges.push((u, v));
    }
    Graph::from_edges(num_nodes, &edges)
}

/// Communities shaped as a 6-node triangular patch, chained in a line.
///
/// ```text
///        5
///       / \
///      3 - 4
///     / \ / \
///    0 - 1 - 2   (node 2 of community c) -- (node 0 of community c+1)
/// ```
pub fn tri_community_graph(communities: usize) -> Result<Graph> {
    if communities == 0 {
        return Err(Error::InvalidInput("need at least one community".into()));
    }
    const PATCH: [(usize, usize); 9] = [
        (0, 1),
        (1, 2),
        (0, 3),
        (1, 3),
        (1, 4),
        (2, 4),
        (3, 4),
        (3, 5),
        (4, 5),
    ];
    let mut edges = Vec::with_capacity(10 * communities);
    for c in 0..communities {
        edges.extend(PATCH.iter().map(|&(u, v)| (6 * c + u, 6 * c + v)));
        if c + 1 < communities {
            edges.push((6 * c + 2, 6 * (c + 1)));
        }
    }
    Graph::from_edges(6 * communities, &edges)
}

/// Attach `D^-1/2 A D^-1/2` (no self loops; isolated nodes give zero rows).
pub fn normalize_propagation(graph: &Graph) -> Graph {
    let deg = graph.degrees();
    let inv_sqrt = deg.mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let n = graph.num_nodes();
    let p = Array2::from_shape_fn((n, n), |(i, j)| {
        inv_sqrt[i] * graph.adjacency[[i, j]] * inv_sqrt[j]
    });
    Graph {
        adjacency: graph.adjacency.clone(),
        propagation: Some(p),
    }
}

/// Which matrix the polynomial filter is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Raw binary adjacency.
    #[default]
    Binary,
    /// Symmetric degree normalization.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpvarParams {
    /// `Q x L`: row `q` weights lag `q+1`, column `l` weights `S^l`.
    pub theta: Vec<Vec<f64>>,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

impl GpvarParams {
    /// Benchmark configuration of the controlled experiment.
    pub fn benchmark() -> Self {
        Self {
            theta: vec![vec![2.5, -2.0, -0.5], vec![1.0, 3.0, 0.0]],
            a: 0.5,
            b: 0.5,
            sigma: 0.4,
        }
    }

    pub fn lags(&self) -> usize {
        self.theta.len()
    }

    pub fn orders(&self) -> usize {
        self.theta.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.orders();
        if self.lags() == 0 || l == 0 || self.theta.iter().any(|r| r.len() != l) {
            return Err(Error::Config(
                "theta must be a non-empty rectangular Q x L matrix".into(),
            ));
        }
        let all = self
            .theta
            .iter()
            .flatten()
            .chain([&self.a, &self.b, &self.sigma]);
        if all.into_iter().any(|v| !v.is_finite()) || self.sigma < 0.0 {
            return Err(Error::Config(format!("invalid GPVAR parameters {self:?}")));
        }
        Ok(())
    }

    /// One `N x N` filter per lag: `M_q = sum_l theta[q][l] S^l`.
    fn lag_filters(&self, propagation: &Array2<f64>) -> Vec<Array2<f64>> {
        let n = propagation.nrows();
        let mut powers = vec![Array2::eye(n)];
        for _ in 1..self.orders() {
            let next = powers.last().unwrap().dot(propagation);
            powers.push(next);
        }
        self.theta
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&powers)
                    .fold(Array2::zeros((n, n)), |acc, (&c, p)| acc + p * c)
            })
            .collect()
    }
}

/// Generator state: the last `Q + 1` observations, oldest first.
pub struct GpvarProcess {
    params: GpvarParams,
    filters: Vec<Array2<f64>>,
    history: Vec<Array1<f64>>,
}

impl GpvarProcess {
    pub fn new(
        params: GpvarParams,
        graph: &Graph,
        propagation: Propagation,
        initial: Vec<Array1<f64>>,
    ) -> Result<Self> {
        params.validate()?;
        let n = graph.num_nodes();
        if initial.len() != params.lags() + 1 || initial.iter().any(|x| x.len() != n) {
            return Err(Error::InvalidInput(format!(
                "need {} initial states of length {n}",
                params.lags() + 1
            )));
        }
        let prop = match propagation {
            Propagation::Binary => graph.adjacency.clone(),
            Propagation::Normalized => normalize_propagation(graph).propagation.unwrap(),
        };
        let filters = params.lag_filters(&prop);
        Ok(Self {
            params,
            filters,
            history: initial,
        })
    }

    /// Advance one step with the given noise vector and return `X_{t+1}`.
    pub fn step_with_noise(&mut self, noise: &Array1<f64>) -> Result<Array1<f64>> {
        let last = self.history.len() - 1;
        // history[last] is X_t; lag q reads X_{t-q}
        let mut h = Array1::zeros(noise.len());
        for (q, filter) in self.filters.iter().enumerate() {
            h += &filter.dot(&self.history[last - (q + 1)]);
        }
        let prev = &self.history[last - 1];
        let next =
            h.mapv(|v| self.params.a * v.tanh()) + prev.mapv(|v| self.params.b * v.tanh()) + noise;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("GPVAR state became non-finite".into()));
        }
        self.history.remove(0);
        self.history.push(next.clone());
        Ok(next)
    }
}

/// Simulate `steps` observations after discarding `burn_in` generated steps.
/// Initial `Q + 1` states are i.i.d. `N(0, sigma^2)` (zeros when `sigma = 0`).
pub fn simulate_gpvar<R: Rng>(
    params: &GpvarParams,
    graph: &Graph,
    propagation: Propagation,
    steps: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<TimeSeriesCollection> {
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    params.validate()?;
    let n = graph.num_nodes();
    let draw = |rng: &mut R| -> Array1<f64> {
        if params.sigma == 0.0 {
            Array1::zeros(n)
        } else {
            let normal = Normal::new(0.0, params.sigma).unwrap();
            Array1::from_shape_fn(n, |_| normal.sample(rng))
        }
    };
    let initial = (0..=params.lags()).map(|_| draw(rng)).collect();
    let mut process = GpvarProcess::new(params.clone(), graph, propagation, initial)?;
    let mut values = Array2::zeros((steps, n));
    for t in 0..burn_in + steps {
        let x = process.step_with_noise(&draw(rng))?;
        if t >= burn_in {
            values.row_mut(t - burn_in).assign(&x);
        }
    }
    TimeSeriesCollection::new(values, None)
}

/// Provenance written next to a simulated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSidecar {
    pub params: GpvarParams,
    pub seed: u64,
    pub num_nodes: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub propagation: Propagation,
    pub edges: Vec<(usize, usize)>,
}

impl SimulationSidecar {
    pub fn graph(&self) -> Result<Graph> {
        Graph::from_edges(self.num_nodes, &self.edges)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
