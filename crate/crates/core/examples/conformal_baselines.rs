//! SCP, NexCP and SeqCP on residuals whose scale jumps halfway through the
//! test range. Weighted methods react, split conformal does not.

use corel::conformal::{nexcp_intervals, scp_intervals, seqcp_intervals, TestTargets};
use corel::data::ResidualSet;
use corel::intervals::MetricReport;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> corel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = Normal::new(0.0, 1.0).unwrap();
    let (n_cal, n_test, nodes) = (2000, 2000, 3);
    let scale = |t: usize| if t >= n_cal + n_test / 2 { 2.0 } else { 1.0 };
    let all = Array2::from_shape_fn((n_cal + n_test, nodes), |(t, _)| {
        scale(t) * z.sample(&mut rng)
    });

    let cal = ResidualSet {
        residuals: all.slice(ndarray::s![..n_cal, ..]).to_owned(),
        target_steps: (0..n_cal).collect(),
        horizon: 1,
    };
    let test_steps: Vec<usize> = (n_cal..n_cal + n_test).collect();
    let test = ResidualSet {
        residuals: all.slice(ndarray::s![n_cal.., ..]).to_owned(),
        target_steps: test_steps.clone(),
        horizon: 1,
    };
    // zero point forecasts: the actuals are the residuals themselves
    let forecasts = Array2::zeros((n_test, nodes));
    let actuals = test.residuals.clone();

    let alpha = 0.1;
    let runs = [
        (
            "scp",
            scp_intervals(&cal, TestTargets::new(forecasts.view(), &test_steps), alpha)?,
        ),
        (
            "nexcp",
            nexcp_intervals(
                &cal,
                TestTargets::new(forecasts.view(), &test_steps).streaming(&test),
                alpha,
                0.99,
            )?,
        ),
        (
            "seqcp",
            seqcp_intervals(
                &cal,
                TestTargets::new(forecasts.view(), &test_steps).streaming(&test),
                alpha,
                100,
            )?,
        ),
    ];
    println!(
        "{:<6} {:>8} {:>8} {:>8}",
        "method", "dCov", "width", "winkler"
    );
    for (name, iv) in &runs {
        let r = MetricReport::evaluate(iv, actuals.view(), name, "toy", "zero", 0)?;
        println!(
            "{name:<6} {:>8.2} {:>8.3} {:>8.3}",
            r.delta_cov, r.pi_width, r.winkler
        );
    }
    Ok(())
}
