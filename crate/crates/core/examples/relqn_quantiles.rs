//! Train a relational quantile network on residuals that are correlated
//! along a ring, then compare its intervals with split conformal ones.

use corel::conformal::{scp_intervals, TestTargets};
use corel::data::ResidualSet;
use corel::intervals::MetricReport;
use corel::relqn::{train_relqn_with_progress, RelQNConfig, ResidualStream};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> corel::Result<()> {
    let (steps, n) = (3000, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = Normal::new(0.0, 1.0).unwrap();
    // r_t[i] = 0.7 r_{t-1}[i-1] + noise: predictable from the upstream neighbour
    let mut r = Array2::<f64>::zeros((steps, n));
    for t in 1..steps {
        for i in 0..n {
            r[[t, i]] = 0.7 * r[[t - 1, (i + n - 1) % n]] + 0.5 * z.sample(&mut rng);
        }
    }
    let split = 2000;
    let cal = ResidualSet {
        residuals: r.slice(s![..split, ..]).to_owned(),
        target_steps: (0..split).collect(),
        horizon: 1,
    };
    let test = ResidualSet {
        residuals: r.slice(s![split.., ..]).to_owned(),
        target_steps: (split..steps).collect(),
        horizon: 1,
    };

    let cfg = RelQNConfig {
        k_neighbors: 2,
        num_dummies: 4,
        epochs: 30,
        lr_decay_period: 10,
        use_values: false,
        ..Default::default()
    };
    let model = train_relqn_with_progress(&cal, None, &cfg, None, |e, loss, val| {
        if e % 5 == 4 {
            println!("epoch {e:>2}: pinball {loss:.4}  val Winkler {val:.4}")
        }
    })?;

    let stream = ResidualStream::new(&cal.concat(&test)?, None, false)?;
    let targets: Vec<usize> = (split..steps).collect();
    let pred = model.predict_quantiles(&stream, &targets)?;
    let zero = Array2::zeros((targets.len(), n));
    let alpha = 0.1;
    let corel = pred.intervals(zero.view(), alpha, false)?;
    let scp = scp_intervals(&cal, TestTargets::new(zero.view(), &targets), alpha)?;
    for (name, iv) in [("scp", &scp), ("corel", &corel)] {
        let m = MetricReport::evaluate(iv, test.residuals.view(), name, "ring", "zero", 0)?;
        println!(
            "{name:<6} dCov {:>6.2}  width {:.3}  Winkler {:.3}",
            m.delta_cov, m.pi_width, m.winkler
        );
    }
    let adj = model.test_adjacency()?;
    println!("learned in-neighbours:");
    for i in 0..n {
        let nb: Vec<usize> = (0..n)
            .filter(|&j| adj.as_ref().is_some_and(|a| a[[i, j]] > 0.0))
            .collect();
        println!("  node {i}: {nb:?}");
    }
    Ok(())
}
