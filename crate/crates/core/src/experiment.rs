//! Config-driven pipeline: simulate, train a base forecaster and cache its
//! residuals, calibrate and evaluate a CP method, adapt, and merge reports.
//!
//! Every stage reads and writes inside the run directory `out_dir` and
//! records its artifacts in `manifest.json` together with a hash of the
//! configuration subset the stage depends on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{rolling_adaptive_eval, AdaptationConfig};
use crate::conformal::{nexcp_intervals, scp_intervals, seqcp_intervals, TestTargets};
use crate::data::{
    compute_residuals, make_splits, ResidualSet, SplitIndex, SplitSpec, TimeSeriesCollection,
};
use crate::error::{Error, Result};
use crate::forecaster::{train_with_progress, ForecasterConfig, PointForecaster};
use crate::gpvar::{
    simulate_gpvar, tri_community_graph, GpvarParams, Graph, Propagation, SimulationSidecar,
};
use crate::intervals::{IntervalSet, MetricReport};
use crate::relqn::{train_relqn_with_progress, RelQNConfig, RelQNModel, ResidualStream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpvarDataset {
    pub params: GpvarParams,
    /// Number of 6-node patches in the benchmark graph.
    pub communities: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub propagation: Propagation,
    /// Simulation seed; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for GpvarDataset {
    fn default() -> Self {
        Self {
            params: GpvarParams::benchmark(),
            communities: 10,
            steps: 40_000,
            burn_in: 100,
            propagation: Propagation::Binary,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataset {
    pub name: String,
    /// Wide CSV: header, then `step,node_0,...`.
    pub values: PathBuf,
    #[serde(default)]
    pub covariates: Vec<PathBuf>,
    /// Undirected edge list with a `source,target` header.
    #[serde(default)]
    pub edges: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Gpvar(GpvarDataset),
    Csv(CsvDataset),
}

impl DatasetConfig {
    pub fn label(&self) -> &str {
        match self {
            DatasetConfig::Gpvar(_) => "gpvar",
            DatasetConfig::Csv(c) => &c.name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Scp,
    Nexcp,
    Seqcp,
    Cornn,
    Corel,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Scp => "scp",
            Method::Nexcp => "nexcp",
            Method::Seqcp => "seqcp",
            Method::Cornn => "cornn",
            Method::Corel => "corel",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Cornn | Method::Corel)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "scp" => Method::Scp,
            "nexcp" => Method::Nexcp,
            "seqcp" => Method::Seqcp,
            "cornn" => Method::Cornn,
            "corel" => Method::Corel,
            other => {
                return Err(Error::Config(format!(
                    "unknown method '{other}' (expected scp, nexcp, seqcp, cornn or corel)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    /// NexCP decay.
    pub rho: f64,
    /// SeqCP window.
    pub window: usize,
    /// Let observed test residuals join the CP pool.
    pub streaming: bool,
    /// Fix the RelQN graph to the known adjacency instead of learning it.
    pub true_graph: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: Method::Corel,
            rho: 0.99,
            window: 100,
            streaming: false,
            true_graph: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMode {
    #[default]
    Plain,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub forecaster: ForecasterConfig,
    pub method: MethodConfig,
    pub relqn: RelQNConfig,
    pub alphas: Vec<f64>,
    pub interval_mode: IntervalMode,
    pub adaptation: Option<AdaptationConfig>,
    /// Also write intervals in long CSV format (plot-friendly).
    pub write_intervals: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "gpvar-rnn".into(),
            seed: 0,
            dataset: DatasetConfig::Gpvar(GpvarDataset::default()),
            split: SplitSpec::default(),
            forecaster: ForecasterConfig::default(),
            method: MethodConfig::default(),
            relqn: RelQNConfig::default(),
            alphas: vec![0.1],
            interval_mode: IntervalMode::Plain,
            adaptation: None,
            write_intervals: false,
            out_dir: PathBuf::from("runs/gpvar-rnn"),
        }
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Pipeline stages, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    TrainForecaster,
    CalibrateEvaluate,
    AdaptEvaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainForecaster => "train-forecaster",
            Stage::CalibrateEvaluate => "calibrate-evaluate",
            Stage::AdaptEvaluate => "adapt-evaluate",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with the run seed pushed into every seeded component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.forecaster.seed = c.seed;
        c.relqn.seed = c.seed;
        if let Some(a) = c.adaptation.as_mut() {
            a.seed = c.seed;
        }
        if let DatasetConfig::Gpvar(g) = &mut c.dataset {
            g.seed.get_or_insert(c.seed);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.forecaster.validate()?;
        self.relqn.validate()?;
        if let Some(a) = &self.adaptation {
            a.validate()?;
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Config(format!(
                "alphas must lie in (0,1): {:?}",
                self.alphas
            )));
        }
        if !(self.method.rho > 0.0 && self.method.rho <= 1.0) {
            return Err(Error::Config(format!(
                "rho {} outside (0,1]",
                self.method.rho
            )));
        }
        if self.method.window == 0 {
            return Err(Error::Config("SeqCP window must be positive".into()));
        }
        if self.method.true_graph && self.method.name != Method::Corel {
            return Err(Error::Config(
                "the true-graph override applies to corel only".into(),
            ));
        }
        match &self.dataset {
            DatasetConfig::Gpvar(g) => {
                g.params.validate()?;
                if g.communities == 0 || g.steps == 0 {
                    return Err(Error::Config("gpvar needs communities and steps".into()));
                }
            }
            DatasetConfig::Csv(c) => {
                let needs_graph = self.forecaster.use_graph || self.method.true_graph;
                if needs_graph && c.edges.is_none() {
                    return Err(Error::Config(
                        "graph forecaster or true-graph override needs dataset.edges".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hash of the whole resolved configuration.
    pub fn config_hash(&self) -> String {
        hash_json(&self.resolved())
    }

    /// Hash of what `stage` depends on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let c = self.resolved();
        match stage {
            Stage::Simulate => hash_json(&("data", &c.dataset)),
            Stage::TrainForecaster => {
                hash_json(&("forecaster", &c.dataset, &c.split, &c.forecaster))
            }
            Stage::CalibrateEvaluate => hash_json(&(
                "method",
                self.stage_hash(Stage::TrainForecaster),
                &c.method,
                c.method.name.is_learned().then_some(&c.relqn),
                &c.alphas,
                c.interval_mode,
            )),
            Stage::AdaptEvaluate => hash_json(&(
                "adapt",
                self.stage_hash(Stage::CalibrateEvaluate),
                c.adaptation.clone().unwrap_or_default(),
            )),
        }
    }

    /// Report label: method, plus `-true-graph` / `-beta` when set.
    pub fn method_label(&self) -> String {
        let mut s = self.method.name.as_str().to_string();
        if self.method.true_graph {
            s.push_str("-true-graph");
        }
        if self.method.streaming && !self.method.name.is_learned() {
            s.push_str("-stream");
        }
        if self.interval_mode == IntervalMode::Beta {
            s.push_str("-beta");
        }
        s
    }

    pub fn base_label(&self) -> &'static str {
        self.forecaster.model_name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    pub kind: String,
    /// Relative to the run directory.
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub artifacts: Vec<ArtifactEntry>,
    /// Wall-clock seconds per stage (last execution).
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(Self::FILE);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    fn load_or_new(dir: &Path, cfg: &ExperimentConfig) -> Self {
        let mut m = Self::load(dir).unwrap_or(Self {
            config_hash: String::new(),
            version: VERSION.into(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        });
        m.config_hash = cfg.config_hash();
        m.version = VERSION.into();
        m
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn record(&mut self, stage: Stage, kind: &str, path: &Path, hash: &str) {
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(ArtifactEntry {
            stage: stage.as_str().into(),
            kind: kind.into(),
            path: path.to_path_buf(),
            hash: hash.into(),
        });
    }

    /// Whether `path` exists and was produced under `hash`.
    pub fn is_current(&self, dir: &Path, path: &Path, hash: &str) -> bool {
        dir.join(path).exists()
            && self
                .artifacts
                .iter()
                .any(|a| a.path == path && a.hash == hash)
    }

    /// Every artifact exists and its hash matches the stage hash of the
    /// configuration stored in the run directory.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
        if cfg.config_hash() != self.config_hash {
            return Err(Error::InvalidInput(
                "manifest hash differs from config.toml".into(),
            ));
        }
        for a in &self.artifacts {
            if !dir.join(&a.path).exists() {
                return Err(Error::MissingArtifact(dir.join(&a.path)));
            }
            let stage = match a.stage.as_str() {
                "simulate" => Stage::Simulate,
                "train-forecaster" => Stage::TrainForecaster,
                "calibrate-evaluate" => Stage::CalibrateEvaluate,
                _ => Stage::AdaptEvaluate,
            };
            // method-specific artifacts from other method settings stay valid
            // for their own hashes; only stages shared by every run are checked
            if matches!(stage, Stage::Simulate | Stage::TrainForecaster)
                && a.hash != cfg.stage_hash(stage)
            {
                return Err(Error::InvalidInput(format!(
                    "{} was produced by a different configuration",
                    a.path.display()
                )));
            }
        }
        Ok(())
    }
}

/// Run options beyond the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Reuse artifacts whose recorded hash matches the current config.
    pub resume: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// An experiment bound to its run directory.
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    opts: RunOptions,
}

pub mod paths {
    pub const SERIES: &str = "data/series.csv";
    pub const SIDECAR: &str = "data/sidecar.json";
    pub const FORECASTER: &str = "forecaster/checkpoint.json";
    pub const CAL_RESIDUALS: &str = "residuals/calibration.csv";
    pub const TEST_RESIDUALS: &str = "residuals/test.csv";
    pub const REPORTS: &str = "reports";
}

impl Run {
    pub fn new(config: ExperimentConfig, opts: RunOptions) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let dir = config.out_dir.clone();
        for sub in ["data", "forecaster", "residuals", "models", paths::REPORTS] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
        let manifest = RunManifest::load_or_new(&dir, &config);
        manifest.save(&dir)?;
        Ok(Self {
            config,
            dir,
            manifest,
            opts,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.opts.verbose {
            eprintln!("[{}] {}", self.config.name, msg.as_ref());
        }
    }

    fn finish(&mut self, stage: Stage, started: Instant) -> Result<()> {
        self.manifest
            .timings
            .insert(stage.as_str().into(), started.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)
    }

    /// Write the GPVAR series and its sidecar (no-op for CSV datasets).
    pub fn simulate(&mut self) -> Result<PathBuf> {
        let started = Instant::now();
        let hash = self.config.stage_hash(Stage::Simulate);
        let g = match &self.config.dataset {
            DatasetConfig::Gpvar(g) => g.clone(),
            DatasetConfig::Csv(c) => return Ok(c.values.clone()),
        };
        let series = Path::new(paths::SERIES);
        if self.opts.resume && self.manifest.is_current(&self.dir, series, &hash) {
            self.log("simulate: cached");
            return Ok(self.dir.join(series));
        }
        let graph = tri_community_graph(g.communities)?;
        let seed = g.seed.unwrap_or(self.config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = simulate_gpvar(
            &g.params,
            &graph,
            g.propagation,
            g.steps,
            g.burn_in,
            &mut rng,
        )?;
        data.write_csv(&self.dir.join(series))?;
        SimulationSidecar {
            params: g.params.clone(),
            seed,
            num_nodes: graph.num_nodes(),
            steps: g.steps,
            burn_in: g.burn_in,
            propagation: g.propagation,
            edges: graph.edges(),
        }
        .write(&self.dir.join(paths::SIDECAR))?;
        self.manifest
            .record(Stage::Simulate, "series", series, &hash);
        self.manifest
            .record(Stage::Simulate, "sidecar", Path::new(paths::SIDECAR), &hash);
        self.log(format!(
            "simulate: {} steps x {} nodes",
            data.num_steps(),
            data.num_nodes()
        ));
        self.finish(Stage::Simulate, started)?;
        Ok(self.dir.join(series))
    }

    /// Observed series and, when known, the graph.
    pub fn load_dataset(&self) -> Result<(TimeSeriesCollection, Option<Graph>)> {
        match &self.config.dataset {
            DatasetConfig::Gpvar(_) => {
                let data = TimeSeriesCollection::read_csv(&self.dir.join(paths::SERIES), &[])?;
                let sidecar = SimulationSidecar::read(&self.dir.join(paths::SIDECAR))?;
                Ok((data, Some(sidecar.graph()?)))
            }
            DatasetConfig::Csv(c) => {
                let cov: Vec<&Path> = c.covariates.iter().map(PathBuf::as_path).collect();
                let data = TimeSeriesCollection::read_csv(&c.values, &cov)?;
                let graph = match &c.edges {
                    Some(p) => Some(read_edge_list(p, data.num_nodes())?),
                    None => None,
                };
                Ok((data, graph))
            }
        }
    }

    pub fn splits(&self, data: &TimeSeriesCollection) -> Result<SplitIndex> {
        make_splits(data.num_steps(), &self.config.split)
    }

    /// Train (or reload) the base forecaster and cache calibration and test
    /// residuals.
    pub fn train_forecaster(&mut self) -> Result<PointForecaster> {
        let started = Instant::now();
        let hash = self.config.stage_hash(Stage::TrainForecaster);
        let (data, graph) = self.load_dataset()?;
        let split = self.splits(&data)?;
        let ck = Path::new(paths::FORECASTER);
        let model = if self.opts.resume && self.manifest.is_current(&self.dir, ck, &hash) {
            self.log("train-forecaster: checkpoint cached");
            PointForecaster::load(&self.dir.join(ck))?
        } else {
            let cfg = &self.config.forecaster;
            let g = if cfg.use_graph {
                Some(
                    graph
                        .as_ref()
                        .ok_or_else(|| Error::Config("graph forecaster needs a graph".into()))?,
                )
            } else {
                None
            };
            let verbose = self.opts.verbose;
            let name = self.config.name.clone();
            let m = train_with_progress(&data, &split, cfg, g, |e, tr, va| {
                if verbose {
                    eprintln!("[{name}] forecaster epoch {e}: train MAE {tr:.4}, val MAE {va:.4}");
                }
            })?;
            m.save(&self.dir.join(ck))?;
            self.manifest
                .record(Stage::TrainForecaster, "checkpoint", ck, &hash);
            m
        };
        let cal_path = Path::new(paths::CAL_RESIDUALS);
        let test_path = Path::new(paths::TEST_RESIDUALS);
        let cached = self.opts.resume
            && self.manifest.is_current(&self.dir, cal_path, &hash)
            && self.manifest.is_current(&self.dir, test_path, &hash);
        if !cached {
            for (range, p) in [
                (split.cal.clone(), cal_path),
                (split.test.clone(), test_path),
            ] {
                let res = residual_cache(&model, &data, range)?;
                res.write_csv(&self.dir.join(p))?;
                self.manifest
                    .record(Stage::TrainForecaster, "residuals", p, &hash);
            }
        }
        self.log(format!(
            "train-forecaster: best epoch {} val MAE {:.4}",
            model.meta.best_epoch, model.meta.best_val_mae
        ));
        self.finish(Stage::TrainForecaster, started)?;
        Ok(model)
    }

    fn load_residuals(&self) -> Result<(ResidualSet, ResidualSet)> {
        let h = self.config.forecaster.horizon;
        Ok((
            ResidualSet::read_csv(&self.dir.join(paths::CAL_RESIDUALS), h)?,
            ResidualSet::read_csv(&self.dir.join(paths::TEST_RESIDUALS), h)?,
        ))
    }

    fn relqn_path(&self) -> PathBuf {
        let suffix = if self.config.method.true_graph {
            "-true-graph"
        } else {
            ""
        };
        PathBuf::from(format!(
            "models/{}{suffix}.json",
            self.config.method.name.as_str()
        ))
    }

    /// Train (or reload) the RelQN of a learned method.
    fn relqn(
        &mut self,
        data: &TimeSeriesCollection,
        graph: Option<&Graph>,
        cal: &ResidualSet,
    ) -> Result<RelQNModel> {
        let hash = self.config.stage_hash(Stage::CalibrateEvaluate);
        let path = self.relqn_path();
        if self.opts.resume && self.manifest.is_current(&self.dir, &path, &hash) {
            self.log("relqn: checkpoint cached");
            return RelQNModel::load(&self.dir.join(&path));
        }
        let mut cfg = self.config.relqn.clone();
        cfg.corn_mode = self.config.method.name == Method::Cornn;
        let fixed = if self.config.method.true_graph {
            Some(graph.ok_or_else(|| Error::Config("true-graph override needs a graph".into()))?)
        } else {
            None
        };
        let verbose = self.opts.verbose;
        let name = self.config.name.clone();
        let values = cfg.use_values.then_some(data);
        let model = train_relqn_with_progress(cal, values, &cfg, fixed, |e, l, w| {
            if verbose {
                eprintln!("[{name}] relqn epoch {e}: pinball {l:.4}, val Winkler {w:.4}");
            }
        })?;
        model.save(&self.dir.join(&path))?;
        self.manifest
            .record(Stage::CalibrateEvaluate, "relqn", &path, &hash);
        if model.edge_score_id().is_some() {
            let g = PathBuf::from("models/learned_graph.csv");
            model.export_graph(&self.dir.join(&g))?;
            self.manifest
                .record(Stage::CalibrateEvaluate, "learned-graph", &g, &hash);
        }
        Ok(model)
    }

    fn save_report(
        &mut self,
        stage: Stage,
        report: &MetricReport,
        intervals: Option<&IntervalSet>,
    ) -> Result<()> {
        let hash = self.config.stage_hash(stage);
        let stem = format!("{}_a{}", report.method, report.alpha);
        let p = PathBuf::from(paths::REPORTS).join(format!("{stem}.json"));
        report.write_json(&self.dir.join(&p))?;
        self.manifest.record(stage, "report", &p, &hash);
        if let (true, Some(iv)) = (self.config.write_intervals, intervals) {
            let p = PathBuf::from(paths::REPORTS).join(format!("{stem}_intervals.csv"));
            iv.write_csv(&self.dir.join(&p))?;
            self.manifest.record(stage, "intervals", &p, &hash);
        }
        let all = collect_reports(&self.dir)?;
        let csv = PathBuf::from(paths::REPORTS).join("metrics.csv");
        MetricReport::write_csv(&all, &self.dir.join(&csv))?;
        self.manifest.record(stage, "metrics-table", &csv, &hash);
        Ok(())
    }

    /// Run the configured CP method on the cached residuals and evaluate it
    /// on the test range, one report per alpha.
    pub fn calibrate_evaluate(&mut self) -> Result<Vec<MetricReport>> {
        let started = Instant::now();
        let (data, graph) = self.load_dataset()?;
        let (cal, test) = self.load_residuals()?;
        let (forecasts, actuals) = split_actuals(&data, &test)?;
        let steps = test.target_steps.clone();
        let (dataset, base, seed) = (
            self.config.dataset.label().to_string(),
            self.config.base_label(),
            self.config.seed,
        );
        let label = self.config.method_label();
        let beta = self.config.interval_mode == IntervalMode::Beta;
        let m = self.config.method.clone();
        let mut reports = Vec::new();
        if m.name.is_learned() {
            let model = self.relqn(&data, graph.as_ref(), &cal)?;
            let (stream, rows, eval_steps) = test_stream(&model, &data, &cal, &test)?;
            let pred = model.predict_quantiles(&stream, &eval_steps)?;
            let fc = forecasts.select(Axis(0), &rows);
            let act = actuals.select(Axis(0), &rows);
            for alpha in self.config.alphas.clone() {
                let iv = pred.intervals(fc.view(), alpha, beta)?;
                let r = MetricReport::evaluate(&iv, act.view(), &label, &dataset, base, seed)?;
                self.save_report(Stage::CalibrateEvaluate, &r, Some(&iv))?;
                reports.push(r);
            }
        } else {
            if beta {
                return Err(Error::Config(
                    "beta intervals need a quantile model (cornn or corel)".into(),
                ));
            }
            for alpha in self.config.alphas.clone() {
                let mut targets = TestTargets::new(forecasts.view(), &steps);
                if m.streaming {
                    targets = targets.streaming(&test);
                }
                let iv = match m.name {
                    Method::Scp => scp_intervals(&cal, targets, alpha)?,
                    Method::Nexcp => nexcp_intervals(&cal, targets, alpha, m.rho)?,
                    _ => seqcp_intervals(&cal, targets, alpha, m.window)?,
                };
                let r = MetricReport::evaluate(&iv, actuals.view(), &label, &dataset, base, seed)?;
                self.save_report(Stage::CalibrateEvaluate, &r, Some(&iv))?;
                reports.push(r);
            }
        }
        for r in &reports {
            self.log(format!(
                "{} alpha={}: dCov {:.3}, width {:.4}, Winkler {:.4}",
                r.method, r.alpha, r.delta_cov, r.pi_width, r.winkler
            ));
        }
        self.finish(Stage::CalibrateEvaluate, started)?;
        Ok(reports)
    }

    /// Rolling evaluation with embedding adaptation versus the frozen model.
    /// Needs a trained corel model (from `calibrate_evaluate`).
    pub fn adapt_evaluate(&mut self) -> Result<Vec<(MetricReport, MetricReport)>> {
        let started = Instant::now();
        if self.config.method.name != Method::Corel {
            return Err(Error::Config(
                "adaptation needs method = corel (node embeddings)".into(),
            ));
        }
        let path = self.dir.join(self.relqn_path());
        let model = RelQNModel::load(&path)?;
        let (data, _) = self.load_dataset()?;
        let (cal, test) = self.load_residuals()?;
        let (forecasts, _) = split_actuals(&data, &test)?;
        let (stream, rows, eval_steps) = test_stream(&model, &data, &cal, &test)?;
        let fc = forecasts.select(Axis(0), &rows);
        let cfg = self.config.adaptation.clone().unwrap_or_default();
        let beta = self.config.interval_mode == IntervalMode::Beta;
        let hash = self.config.stage_hash(Stage::AdaptEvaluate);
        let mut out = Vec::new();
        for alpha in self.config.alphas.clone() {
            let ev = rolling_adaptive_eval(
                &model,
                &stream,
                fc.view(),
                &eval_steps,
                alpha,
                beta,
                &cfg,
                (
                    self.config.dataset.label(),
                    self.config.base_label(),
                    self.config.seed,
                ),
            )?;
            let folds =
                PathBuf::from(paths::REPORTS).join(format!("adaptation_folds_a{alpha}.csv"));
            ev.write_fold_csv(&self.dir.join(&folds))?;
            self.manifest
                .record(Stage::AdaptEvaluate, "fold-metrics", &folds, &hash);
            self.save_report(
                Stage::AdaptEvaluate,
                &ev.adapted,
                Some(&ev.adapted_intervals),
            )?;
            self.log(format!(
                "adapt alpha={alpha}: Winkler frozen {:.4}, adapted {:.4}",
                ev.frozen.winkler, ev.adapted.winkler
            ));
            out.push((ev.adapted, ev.frozen));
        }
        self.finish(Stage::AdaptEvaluate, started)?;
        Ok(out)
    }
}

/// Residuals of `model` at every admissible target step of `range`.
pub fn residual_cache(
    model: &PointForecaster,
    data: &TimeSeriesCollection,
    range: std::ops::Range<usize>,
) -> Result<ResidualSet> {
    let (fc, steps) = model.forecast(data, range)?;
    let actual = data.values().select(Axis(0), &steps);
    compute_residuals(actual.view(), fc.view(), &steps, model.config.horizon)
}

/// Forecasts (actual minus residual) and actuals at the residual steps.
pub fn split_actuals(
    data: &TimeSeriesCollection,
    res: &ResidualSet,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if res
        .target_steps
        .last()
        .is_some_and(|&t| t >= data.num_steps())
        || res.num_nodes() != data.num_nodes()
    {
        return Err(Error::Shape(
            "residual cache does not match the dataset".into(),
        ));
    }
    let actuals = data.values().select(Axis(0), &res.target_steps);
    Ok((&actuals - &res.residuals, actuals))
}

/// Stream over calibration and test residuals, plus the test rows (and their
/// steps) whose RelQN input window is fully observed.
pub fn test_stream(
    model: &RelQNModel,
    data: &TimeSeriesCollection,
    cal: &ResidualSet,
    test: &ResidualSet,
) -> Result<(ResidualStream, Vec<usize>, Vec<usize>)> {
    let stream = ResidualStream::new(
        &cal.concat(test)?,
        model.config.use_values.then_some(data),
        model.config.use_values,
    )?;
    let mut rows = Vec::new();
    let mut steps = Vec::new();
    for (r, &t) in test.target_steps.iter().enumerate() {
        if stream
            .window_rows(t, model.config.window, model.config.horizon)
            .is_some()
        {
            rows.push(r);
            steps.push(t);
        }
    }
    if steps.is_empty() {
        return Err(Error::InvalidInput(
            "no test step has a complete residual window".into(),
        ));
    }
    Ok((stream, rows, steps))
}

/// Read a `source,target` edge list.
pub fn read_edge_list(path: &Path, num_nodes: usize) -> Result<Graph> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut edges = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |k: usize| {
            rec.get(k)
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| {
                    Error::InvalidInput(format!("{}: bad edge row {rec:?}", path.display()))
                })
        };
        let (a, b) = (parse(0)?, parse(1)?);
        if a != b {
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Graph::from_edges(num_nodes, &edges)
}

/// All metric reports stored in a run directory.
pub fn collect_reports(dir: &Path) -> Result<Vec<MetricReport>> {
    let rdir = dir.join(paths::REPORTS);
    if !rdir.exists() {
        return Err(Error::MissingArtifact(rdir));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&rdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| MetricReport::read_json(p)).collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One merged cell: a (dataset, base model, method, alpha) key across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub dataset: String,
    pub base_model: String,
    pub method: String,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub delta_cov: (f64, f64),
    pub pi_width: (f64, f64),
    pub winkler: (f64, f64),
}

pub fn merge_reports(reports: &[MetricReport]) -> Vec<MergedRow> {
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        let key = (
            r.dataset.clone(),
            r.base_model.clone(),
            r.method.clone(),
            r.alpha.to_bits(),
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, base_model, method, alpha), rs)| {
            let col = |f: fn(&MetricReport) -> f64| {
                mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            MergedRow {
                dataset,
                base_model,
                method,
                alpha: f64::from_bits(alpha),
                seeds: rs.iter().map(|r| r.seed).collect(),
                delta_cov: col(|r| r.delta_cov),
                pi_width: col(|r| r.pi_width),
                winkler: col(|r| r.winkler),
            }
        })
        .collect()
}

/// Merge the reports of several run directories into `out/report.csv` and a
/// markdown table with one column per method.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<MergedRow>> {
    let mut all = Vec::new();
    for d in run_dirs {
        all.extend(collect_reports(d)?);
    }
    if all.is_empty() {
        let first = run_dirs.first().cloned().unwrap_or_default();
        return Err(Error::MissingArtifact(first.join(paths::REPORTS)));
    }
    let rows = merge_reports(&all);
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    w.write_record([
        "dataset",
        "base_model",
        "method",
        "alpha",
        "n_seeds",
        "delta_cov_mean",
        "delta_cov_std",
        "pi_width_mean",
        "pi_width_std",
        "winkler_mean",
        "winkler_std",
    ])?;
    for r in &rows {
        w.write_record([
            r.dataset.clone(),
            r.base_model.clone(),
            r.method.clone(),
            r.alpha.to_string(),
            r.seeds.len().to_string(),
            r.delta_cov.0.to_string(),
            r.delta_cov.1.to_string(),
            r.pi_width.0.to_string(),
            r.pi_width.1.to_string(),
            r.winkler.0.to_string(),
            r.winkler.1.to_string(),
        ])?;
    }
    w.flush()?;
    std::fs::write(out.join("report.md"), markdown_table(&rows))?;
    Ok(rows)
}

/// Rows are (dataset, base model, alpha, metric), columns are methods.
pub fn markdown_table(rows: &[MergedRow]) -> String {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| dataset | base | alpha | metric | {} |",
        methods.join(" | ")
    );
    let _ = writeln!(s, "|---|---|---|---|{}", "---|".repeat(methods.len()));
    let mut keys: Vec<(&str, &str, u64)> = rows
        .iter()
        .map(|r| (r.dataset.as_str(), r.base_model.as_str(), r.alpha.to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    for (d, b, a) in keys {
        for (metric, pick) in [
            (
                "dCov",
                (|r: &MergedRow| r.delta_cov) as fn(&MergedRow) -> (f64, f64),
            ),
            ("PI-Width", |r: &MergedRow| r.pi_width),
            ("Winkler", |r: &MergedRow| r.winkler),
        ] {
            let cells: Vec<String> = methods
                .iter()
                .map(|m| {
                    rows.iter()
                        .find(|r| {
                            r.dataset == d
                                && r.base_model == b
                                && r.alpha.to_bits() == a
                                && r.method == *m
                        })
                        .map(|r| {
                            let (mean, std) = pick(r);
                            format!("{mean:.3}±{std:.3}")
                        })
                        .unwrap_or_else(|| "-".into())
                })
                .collect();
            let _ = writeln!(
                s,
                "| {d} | {b} | {} | {metric} | {} |",
                f64::from_bits(a),
                cells.join(" | ")
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            name: "smoke".into(),
            dataset: DatasetConfig::Gpvar(GpvarDataset {
                communities: 1,
                steps: 600,
                burn_in: 20,
                ..Default::default()
            }),
            forecaster: ForecasterConfig {
                hidden_size: 6,
                epochs: 2,
                max_batches_per_epoch: Some(4),
                ..Default::default()
            },
            relqn: RelQNConfig {
                hidden_size: 4,
                embedding_size: 2,
                k_neighbors: 2,
                num_dummies: 2,
                epochs: 2,
                batches_per_epoch: 3,
                batch_size: 16,
                ..Default::default()
            },
            adaptation: Some(AdaptationConfig {
                n_folds: 2,
                finetune_epochs: 1,
                ..Default::default()
            }),
            out_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml_str(
            "seed = 3\nalphas = [0.1, 0.2]\n[method]\nname = \"nexcp\"\nrho = 0.95\n[dataset]\nsource = \"gpvar\"\nsteps = 10\n",
        )
        .unwrap();
        assert_eq!(partial.method.name, Method::Nexcp);
        assert_eq!(partial.relqn, RelQNConfig::default());
        match partial.dataset {
            DatasetConfig::Gpvar(g) => assert_eq!((g.steps, g.communities), (10, 10)),
            _ => panic!("wrong source"),
        }
        assert!(ExperimentConfig::from_toml_str("alphas = \"x\"").is_err());
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn validation_and_hashes() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let h = cfg.stage_hash(Stage::TrainForecaster);
        cfg.method.name = Method::Scp;
        assert_eq!(cfg.stage_hash(Stage::TrainForecaster), h);
        assert_ne!(
            cfg.stage_hash(Stage::CalibrateEvaluate),
            ExperimentConfig::default().stage_hash(Stage::CalibrateEvaluate)
        );
        cfg.seed = 1;
        assert_ne!(cfg.stage_hash(Stage::TrainForecaster), h);
        cfg.alphas = vec![1.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.alphas = vec![0.1];
        cfg.method.true_graph = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn merge_statistics() {
        let mk = |seed, w, alpha| MetricReport {
            method: "scp".into(),
            dataset: "gpvar".into(),
            base_model: "rnn".into(),
            alpha,
            seed,
            delta_cov: 0.0,
            pi_width: w,
            winkler: w,
            per_node: vec![],
        };
        let rows = merge_reports(&[
            mk(0, 1.0, 0.1),
            mk(1, 2.0, 0.1),
            mk(2, 3.0, 0.1),
            mk(0, 5.0, 0.2),
        ]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].pi_width, (2.0, 1.0));
        assert_eq!(rows[1].pi_width, (5.0, 0.0));
        assert!(markdown_table(&rows).contains("2.000±1.000"));
    }

    #[test]
    fn smoke_pipeline_is_resumable_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        let mut run = Run::new(cfg.clone(), RunOptions::default()).unwrap();
        run.simulate().unwrap();
        let lines = std::fs::read_to_string(dir.path().join(paths::SERIES))
            .unwrap()
            .lines()
            .count();
        assert_eq!(lines, 601);
        run.train_forecaster().unwrap();
        let cal = ResidualSet::read_csv(&dir.path().join(paths::CAL_RESIDUALS), 1).unwrap();
        let split = make_splits(600, &cfg.split).unwrap();
        assert_eq!(
            cal.len(),
            crate::data::admissible_targets(&split.cal, 5, 1).len()
        );
        let first = run.calibrate_evaluate().unwrap();
        run.adapt_evaluate().unwrap();
        run.manifest.verify(dir.path()).unwrap();

        // resume reuses the checkpoint byte for byte
        let ck = dir.path().join(paths::FORECASTER);
        let before = std::fs::metadata(&ck).unwrap().modified().unwrap();
        let mut again = Run::new(
            cfg.clone(),
            RunOptions {
                resume: true,
                verbose: false,
            },
        )
        .unwrap();
        again.simulate().unwrap();
        again.train_forecaster().unwrap();
        assert_eq!(std::fs::metadata(&ck).unwrap().modified().unwrap(), before);
        assert_eq!(again.calibrate_evaluate().unwrap(), first);

        // a fresh directory reproduces the metrics exactly
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg2 = cfg;
        cfg2.out_dir = dir2.path().to_path_buf();
        let mut fresh = Run::new(cfg2, RunOptions::default()).unwrap();
        fresh.simulate().unwrap();
        fresh.train_forecaster().unwrap();
        assert_eq!(fresh.calibrate_evaluate().unwrap(), first);

        let rows = cmd_report(&[dir.path().to_path_buf()], &dir.path().join("merged")).unwrap();
        assert!(rows.iter().any(|r| r.method == "corel"));
        assert!(rows.iter().any(|r| r.method == "corel-adapted"));
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new(smoke_config(dir.path()), RunOptions::default()).unwrap();
        assert!(matches!(
            run.train_forecaster(),
            Err(Error::MissingArtifact(_))
        ));
        run.simulate().unwrap();
        assert!(matches!(
            run.calibrate_evaluate(),
            Err(Error::MissingArtifact(_))
        ));
        assert!(matches!(
            run.adapt_evaluate(),
            Err(Error::MissingArtifact(_))
        ));
    }
}
