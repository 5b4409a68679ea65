//! Rolling evaluation with node-embedding fine-tuning: residuals of two
//! nodes drift upward during the test range and only the adapted model
//! follows them.

use corel::adaptation::{rolling_adaptive_eval, AdaptationConfig};
use corel::data::{ResidualSet, TimeSeriesCollection};
use corel::relqn::{train_relqn, QuantileGrid, RelQNConfig, ResidualStream};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> corel::Result<()> {
    let (steps, n, split) = (4000, 4, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Normal::new(0.0, 1.0).unwrap();
    let shift = |t: usize, i: usize| {
        if t >= split && i < 2 {
            1.5 * (t - split) as f64 / (steps - split) as f64
        } else {
            0.0
        }
    };
    let all = Array2::from_shape_fn((steps, n), |(t, i)| {
        z.sample(&mut rng) + i as f64 - 1.5 + shift(t, i)
    });
    let values = TimeSeriesCollection::new(
        Array2::from_shape_fn((steps, n), |(t, i)| ((t + i) as f64 * 0.1).sin()),
        None,
    )?;
    let set = |r: std::ops::Range<usize>| ResidualSet {
        residuals: all.slice(ndarray::s![r.clone(), ..]).to_owned(),
        target_steps: r.collect(),
        horizon: 1,
    };
    let (cal, test) = (set(0..split), set(split..steps));

    let cfg = RelQNConfig {
        window: 3,
        k_neighbors: 1,
        num_dummies: 2,
        grid: QuantileGrid::uniform(20),
        epochs: 20,
        batches_per_epoch: 20,
        ..Default::default()
    };
    let model = train_relqn(&cal, Some(&values), &cfg, None)?;
    let stream = ResidualStream::new(&cal.concat(&test)?, Some(&values), true)?;
    let targets: Vec<usize> = (split..steps).collect();
    let forecasts = Array2::zeros((targets.len(), n));
    let ev = rolling_adaptive_eval(
        &model,
        &stream,
        forecasts.view(),
        &targets,
        0.1,
        false,
        &AdaptationConfig::default(),
        ("drift", "zero", 0),
    )?;
    println!("fold  frozen(cov width winkler)   adapted(cov width winkler)");
    for f in &ev.folds {
        println!(
            "{:>4}  {:>6.2} {:.3} {:.3}          {:>6.2} {:.3} {:.3}",
            f.fold, f.frozen.0, f.frozen.1, f.frozen.2, f.adapted.0, f.adapted.1, f.adapted.2
        );
    }
    println!(
        "overall Winkler: frozen {:.3}, adapted {:.3}",
        ev.frozen.winkler, ev.adapted.winkler
    );
    Ok(())
}
