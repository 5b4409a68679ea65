//! Empirical edge-inclusion frequencies of the Gumbel top-K graph sampler
//! next to the softmax of the scores.

use corel::graph_learn::{gumbel_topk_sample, row_softmax};
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> corel::Result<()> {
    // 4 nodes, one dummy column
    let phi = array![
        [0.0, 2.0, 1.0, 0.0, 0.5],
        [1.0, 0.0, 1.0, 1.0, 0.0],
        [3.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 1.0],
    ];
    let (k, draws) = (2, 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut freq = Array2::<f64>::zeros((4, 4));
    for _ in 0..draws {
        let g = gumbel_topk_sample(phi.view(), k, &mut rng, false)?;
        freq += &g.hard;
    }
    freq /= draws as f64;
    println!("softmax(phi):\n{:.3}", row_softmax(phi.view()));
    println!("inclusion frequency, K = {k}:\n{freq:.3}");
    let det = gumbel_topk_sample(phi.view(), k, &mut rng, true)?;
    println!("deterministic top-{k}:\n{}", det.hard);
    Ok(())
}
