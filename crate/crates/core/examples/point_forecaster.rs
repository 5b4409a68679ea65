//! Train the GRU forecaster (optionally with message passing) on a short
//! GPVAR run and print residual statistics on the calibration range.
//!
//! cargo run --release --example point_forecaster -- [rnn|stgnn]

use corel::data::{compute_residuals, make_splits, SplitSpec};
use corel::forecaster::{train_with_progress, ForecasterConfig};
use corel::gpvar::{simulate_gpvar, tri_community_graph, GpvarParams, Propagation};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> corel::Result<()> {
    let use_graph = std::env::args().nth(1).as_deref() == Some("stgnn");
    let graph = tri_community_graph(10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = simulate_gpvar(
        &GpvarParams::benchmark(),
        &graph,
        Propagation::Binary,
        4000,
        100,
        &mut rng,
    )?;
    let split = make_splits(data.num_steps(), &SplitSpec::default())?;

    let cfg = ForecasterConfig {
        use_graph,
        epochs: 10,
        max_batches_per_epoch: Some(100),
        ..Default::default()
    };
    let model = train_with_progress(
        &data,
        &split,
        &cfg,
        use_graph.then_some(&graph),
        |e, tr, va| println!("epoch {e:>2}: train MAE {tr:.4}  val MAE {va:.4}"),
    )?;

    let (fc, steps) = model.forecast(&data, split.cal.clone())?;
    let actual = data.values().select(Axis(0), &steps);
    let res = compute_residuals(actual.view(), fc.view(), &steps, cfg.horizon)?;
    let r = &res.residuals;
    println!(
        "{} calibration residuals: mean {:.4}, MAE {:.4}",
        r.len(),
        r.mean().unwrap_or(0.0),
        r.mapv(f64::abs).mean().unwrap_or(0.0)
    );
    Ok(())
}
