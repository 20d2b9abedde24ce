//! Show that sparse hop-stack diffusion matches an explicit dense oracle.
//!
//! The engine never materializes a matrix power: it keeps a stack
//! `[H, TH, T^2 H, ...]` built by repeated sparse products and then mixes the
//! stack with per-node hop weights. The oracle does the opposite — it builds
//! each dense power `T^k` outright and sums `diag(theta_k) T^k H`. The two
//! routes share no code beyond the transition weights, so agreement here
//! pins down the sparse kernels.
//!
//!     cargo run --example diffusion_equivalence [seed]

use agdn::graph::Graph;
use agdn::layer::{combine, diffuse, hop_attention};
use agdn::oracle::{self, DenseMatrix};
use agdn::tensor::{Tape, Tensor};
use agdn::transition::build_gcn_transition;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() -> agdn::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let mut rng = StdRng::seed_from_u64(seed);
    let tape = Tape::inactive();
    let mut worst = 0.0f64;

    println!("{:>6} {:>7} {:>5} {:>14}", "nodes", "edges", "hops", "max deviation");
    for trial in 0..20 {
        let n = rng.random_range(4..=50);
        let hops = rng.random_range(0..=4);
        let d = rng.random_range(1..=6);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.2 {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::from_undirected_edges(n, &edges)?;
        let t = build_gcn_transition(&g)?;
        let h_values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = Tensor::new(n, d, h_values.clone())?;

        // Engine route: sparse hop stack plus a per-node attention mix.
        let a_hw = Tensor::new(2 * d, 1, (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let stack = diffuse(&tape, &t, &h, hops)?;
        let att = hop_attention(&tape, &stack, &a_hw, 0.2)?;
        let mixed = combine(&tape, &stack, &att)?;

        // Oracle route: dense powers of the same transition, same weights.
        let t_dense = t.to_dense()?;
        let h_dense = DenseMatrix::from_flat(n, d, h_values)?;
        let theta = DenseMatrix::from_flat(n, hops + 1, att.values())?;
        let reference = oracle::dense_adaptive_diffusion(&t_dense, &theta, &h_dense)?;

        let engine = DenseMatrix::from_flat(n, d, mixed.values())?;
        let dev = engine.max_abs_diff(&reference);
        worst = worst.max(dev);
        if trial < 8 {
            println!("{:>6} {:>7} {:>5} {:>14.3e}", n, g.undirected_edge_count(), hops, dev);
        }
    }

    println!("...");
    println!("worst deviation over 20 random graphs: {worst:.3e}");
    if worst <= 1e-5 {
        println!("PASS  sparse diffusion matches the dense oracle (tolerance 1e-5)");
        Ok(())
    } else {
        println!("FAIL  deviation exceeds 1e-5");
        std::process::exit(1);
    }
}
