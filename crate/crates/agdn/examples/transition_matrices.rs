//! Build the three transition matrices on a small graph and check their
//! defining properties.
//!
//! - degree-normalized (symmetric): `(d_i+1)^-1/2 (A+I) (d_j+1)^-1/2`,
//!   mirrored entries bit-for-bit equal;
//! - attention: softmax over each node's in-neighborhood (self-loop
//!   included), rows summing to one;
//! - rescaled attention: the attention weights wrapped in degree factors
//!   `sqrt(d_i+1) / sqrt(d_j+1)`, which collapses to the symmetric matrix
//!   when all nodes carry identical features.
//!
//!     cargo run --example transition_matrices

use agdn::graph::Graph;
use agdn::tensor::{Tape, Tensor};
use agdn::transition::{build_att_gcn_transition, build_att_transition, build_gcn_transition};
use agdn::verify::row_stochastic_error;

fn main() -> agdn::Result<()> {
    // A small asymmetric graph: a triangle with a pendant path.
    let edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5)];
    let g = Graph::from_undirected_edges(6, &edges)?;
    let tape = Tape::inactive();
    let n = g.num_nodes();
    let d = 2;
    let h = Tensor::new(
        n,
        d,
        vec![0.9, -0.3, 0.1, 0.8, -0.5, 0.4, 0.7, 0.2, -0.2, -0.6, 0.3, 0.5],
    )?;
    let a = Tensor::new(2 * d, 1, vec![0.6, -0.4, 0.2, 0.8])?;

    let t_gcn = build_gcn_transition(&g)?;
    let t_att = build_att_transition(&tape, &g, &h, &a, 0.2)?;
    let t_att_gcn = build_att_gcn_transition(&tape, &g, &h, &a, 0.2)?;

    println!("graph: {n} nodes, {} undirected edges", g.undirected_edge_count());
    println!("\ndegree-normalized transition (row col weight):");
    print!("{}", t_gcn.to_coordinate_text());
    println!("\nattention transition for the features above:");
    print!("{}", t_att.to_coordinate_text());

    // Mirrored entries of the symmetric transition must be bitwise equal:
    // both sides are computed as the same product of the same two factors.
    let dense = t_gcn.to_dense()?;
    let mut bit_equal = true;
    for i in 0..n {
        for j in 0..i {
            bit_equal &= dense.get(i, j).to_bits() == dense.get(j, i).to_bits();
        }
    }
    println!("\nsymmetric transition mirrored entries bitwise equal: {bit_equal}");

    let row_err = row_stochastic_error(&t_att);
    println!("attention transition worst |row sum - 1|: {row_err:.3e}");

    // With identical rows the attention softmax sees equal logits everywhere,
    // so each neighborhood gets uniform weights and the degree rescaling
    // reconstructs the symmetric transition exactly.
    let flat = Tensor::new(n, d, vec![0.7; n * d])?;
    let degraded = build_att_gcn_transition(&tape, &g, &flat, &a, 0.2)?;
    let collapse = degraded.to_dense()?.max_abs_diff(&t_gcn.to_dense()?);
    println!("constant features: rescaled attention vs symmetric transition {collapse:.3e}");

    let informative = t_att_gcn.to_dense()?.max_abs_diff(&t_gcn.to_dense()?);
    println!("informative features: same comparison {informative:.3e} (should differ)");

    let ok = bit_equal && row_err <= 1e-6 && collapse <= 1e-6 && informative > 1e-3;
    if ok {
        println!("\nPASS  all transition invariants hold");
        Ok(())
    } else {
        println!("\nFAIL  at least one transition invariant violated");
        std::process::exit(1);
    }
}
