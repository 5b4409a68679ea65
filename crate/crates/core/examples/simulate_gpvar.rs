//! Simulate the GPVAR benchmark and write it as a wide CSV with a sidecar.
//!
//! cargo run --release --example simulate_gpvar -- [steps] [out_dir]

use std::path::PathBuf;

use corel::gpvar::{
    simulate_gpvar, tri_community_graph, GpvarParams, Propagation, SimulationSidecar,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> corel::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args
        .next()
        .map_or(2000, |s| s.parse().expect("steps must be an integer"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "gpvar_out".into()));

    let graph = tri_community_graph(10)?;
    let params = GpvarParams::benchmark();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = simulate_gpvar(&params, &graph, Propagation::Binary, steps, 100, &mut rng)?;

    let x = data.values();
    let mean = x.mean().unwrap_or(0.0);
    let std = x.std(0.0);
    println!(
        "{} nodes, {} edges, {} steps: mean {mean:.4}, std {std:.4}",
        graph.num_nodes(),
        graph.num_edges(),
        data.num_steps()
    );

    std::fs::create_dir_all(&out)?;
    data.write_csv(&out.join("series.csv"))?;
    SimulationSidecar {
        params,
        seed: 0,
        num_nodes: graph.num_nodes(),
        steps,
        burn_in: 100,
        propagation: Propagation::Binary,
        edges: graph.edges(),
    }
    .write(&out.join("sidecar.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}
