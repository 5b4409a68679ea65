//! Plain and width-minimizing intervals from a skewed quantile vector, and
//! the Winkler score of a few outcomes.

use corel::intervals::{build_interval, build_interval_beta, winkler_score};
use corel::relqn::QuantileGrid;
use ndarray::Array1;

fn main() -> corel::Result<()> {
    let grid = QuantileGrid::default();
    // quantiles of a unit exponential residual: strongly right-skewed
    let q = Array1::from_iter(grid.levels().iter().map(|&p| -(1.0 - p).ln()));
    let alpha = 0.1;
    let (lo, hi) = build_interval(0.0, q.view(), &grid, alpha)?;
    let ((blo, bhi), fallback) = build_interval_beta(0.0, q.view(), &grid, alpha)?;
    println!("plain [{lo:.3}, {hi:.3}] width {:.3}", hi - lo);
    println!(
        "beta  [{blo:.3}, {bhi:.3}] width {:.3} (fallback: {fallback})",
        bhi - blo
    );
    for x in [0.5, 3.5, -0.2] {
        println!(
            "x = {x:>4}: Winkler plain {:.3}, beta {:.3}",
            winkler_score(lo, hi, x, alpha),
            winkler_score(blo, bhi, x, alpha)
        );
    }
    Ok(())
}
