//! The whole pipeline on a reduced GPVAR configuration through the
//! experiment API: simulate, train the forecaster, evaluate SCP and CoRel,
//! adapt, then merge the reports.
//!
//! cargo run --release --example experiment_pipeline -- [out_dir]

use std::path::PathBuf;

use corel::adaptation::AdaptationConfig;
use corel::experiment::{
    cmd_report, DatasetConfig, ExperimentConfig, GpvarDataset, Method, Run, RunOptions,
};
use corel::forecaster::ForecasterConfig;
use corel::relqn::RelQNConfig;

fn main() -> corel::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/pipeline-demo".into()),
    );
    let base = ExperimentConfig {
        name: "demo".into(),
        dataset: DatasetConfig::Gpvar(GpvarDataset {
            steps: 6000,
            ..Default::default()
        }),
        forecaster: ForecasterConfig {
            epochs: 5,
            max_batches_per_epoch: Some(100),
            ..Default::default()
        },
        relqn: RelQNConfig {
            epochs: 20,
            lr_decay_period: 8,
            ..Default::default()
        },
        alphas: vec![0.1, 0.2],
        adaptation: Some(AdaptationConfig::default()),
        out_dir: out.clone(),
        ..Default::default()
    };
    println!("configuration:\n{}", base.to_toml()?);

    let opts = RunOptions {
        resume: true,
        verbose: true,
    };
    for method in [Method::Scp, Method::Nexcp, Method::Corel] {
        let mut cfg = base.clone();
        cfg.method.name = method;
        let mut run = Run::new(cfg, opts)?;
        run.simulate()?;
        run.train_forecaster()?;
        run.calibrate_evaluate()?;
        if method == Method::Corel {
            run.adapt_evaluate()?;
        }
    }
    cmd_report(&[out.clone()], &out.join("merged"))?;
    print!("{}", std::fs::read_to_string(out.join("merged/report.md"))?);
    Ok(())
}
