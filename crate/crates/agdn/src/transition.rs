//! Transition matrices over the self-loop-augmented edge set.
//!
//! Three kinds are supported: a fixed symmetric degree-normalized matrix,
//! a feature-dependent row-stochastic attention matrix, and the attention
//! matrix rescaled by degree normalization. Attention weights stay
//! differentiable with respect to the node states and attention vector.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::{
    concat_cols, gather_rows, leaky_relu, matmul, row_mul, segment_softmax, spmm, SparsePattern,
    Stabilizer,
};
use crate::oracle::DenseMatrix;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Gcn,
    Att,
    AttGcn,
}

/// A sparse `N x N` aggregation matrix: shared structure plus per-entry
/// weights (differentiable for the attention kinds).
#[derive(Clone)]
pub struct TransitionMatrix {
    kind: TransitionKind,
    pattern: Rc<SparsePattern>,
    weights: Tensor,
}

impl TransitionMatrix {
    pub fn kind(&self) -> TransitionKind {
        self.kind
    }

    pub fn pattern(&self) -> &Rc<SparsePattern> {
        &self.pattern
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_nodes(&self) -> usize {
        self.pattern.num_rows()
    }

    /// Same structure with replacement weights (e.g. after dropout on the
    /// attention coefficients).
    pub fn with_weights(&self, weights: Tensor) -> Result<TransitionMatrix> {
        if weights.shape() != (self.pattern.num_entries(), 1) {
            return Err(Error::shape(
                "transition_weights",
                format!(
                    "{:?} weights for {} entries",
                    weights.shape(),
                    self.pattern.num_entries()
                ),
            ));
        }
        Ok(TransitionMatrix {
            kind: self.kind,
            pattern: Rc::clone(&self.pattern),
            weights,
        })
    }

    /// One aggregation step: `out[i] = sum_j T_ij h[j]`.
    pub fn apply(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        spmm(tape, &self.pattern, &self.weights, h)
    }

    /// Dense copy of the current weights for oracle-side comparison.
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        let n = self.num_nodes();
        if n > crate::graph::DENSE_ORACLE_CAP {
            return Err(Error::InvalidInput(format!(
                "dense conversion refused: {n} nodes exceeds cap"
            )));
        }
        let w = self.weights.values();
        let mut dense = DenseMatrix::zeros(n, n);
        for row in 0..n {
            for e in self.pattern.entry_range(row) {
                dense.set(row, self.pattern.col_indices()[e], w[e]);
            }
        }
        Ok(dense)
    }

    /// `i j w` lines, one stored entry per line, for external inspection.
    pub fn to_coordinate_text(&self) -> String {
        let w = self.weights.values();
        let mut out = String::new();
        for row in 0..self.num_nodes() {
            for e in self.pattern.entry_range(row) {
                out.push_str(&format!("{row} {} {:.17e}\n", self.pattern.col_indices()[e], w[e]));
            }
        }
        out
    }
}

/// CSR structure of `A + I`: every node's sources are its neighbors plus
/// itself. Rows index destinations.
pub fn self_loop_pattern(g: &Graph) -> Rc<SparsePattern> {
    let n = g.num_nodes();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(g.num_edges() + n);
    row_offsets.push(0);
    for i in 0..n {
        let mut inserted = false;
        for &j in g.neighbors(i) {
            if !inserted && j > i {
                col_indices.push(i);
                inserted = true;
            }
            col_indices.push(j);
        }
        if !inserted {
            col_indices.push(i);
        }
        row_offsets.push(col_indices.len());
    }
    Rc::new(SparsePattern::new(n, n, row_offsets, col_indices).expect("self-loop pattern is valid"))
}

/// Degree-normalized symmetric transition: entry `(i, j)` carries
/// `1 / sqrt((d_i + 1)(d_j + 1))` over the self-loop-augmented edges.
pub fn build_gcn_transition(g: &Graph) -> Result<TransitionMatrix> {
    let pattern = self_loop_pattern(g);
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    let mut w = vec![0.0; pattern.num_entries()];
    for row in 0..g.num_nodes() {
        for e in pattern.entry_range(row) {
            w[e] = inv_sqrt[row] * inv_sqrt[pattern.col_indices()[e]];
        }
    }
    Ok(TransitionMatrix {
        kind: TransitionKind::Gcn,
        pattern,
        weights: Tensor::new(g.num_edges() + g.num_nodes(), 1, w)?,
    })
}

fn edge_logits(
    tape: &Tape,
    pattern: &Rc<SparsePattern>,
    h: &Tensor,
    a: &Tensor,
    slope: f64,
) -> Result<Tensor> {
    let d = h.cols();
    if a.shape() != (2 * d, 1) {
        return Err(Error::shape(
            "attention_vector",
            format!("expected {}x1 for width {d}, got {:?}", 2 * d, a.shape()),
        ));
    }
    // Destination representation first, source second.
    let h_dst = gather_rows(tape, h, pattern.row_ids())?;
    let h_src = gather_rows(tape, h, pattern.col_indices())?;
    let cat = concat_cols(tape, &[h_dst, h_src])?;
    let logits = matmul(tape, &cat, a)?;
    leaky_relu(tape, &logits, slope)
}

/// Row-stochastic attention transition: per-entry logits
/// `leaky([h_dst || h_src] . a)` softmaxed over each destination row,
/// self-loop included in both numerator and denominator.
pub fn build_att_transition(
    tape: &Tape,
    g: &Graph,
    h: &Tensor,
    a: &Tensor,
    slope: f64,
) -> Result<TransitionMatrix> {
    let n = g.num_nodes();
    if h.rows() != n {
        return Err(Error::shape(
            "attention_transition",
            format!("{} state rows for {n} nodes", h.rows()),
        ));
    }
    let pattern = self_loop_pattern(g);
    let logits = edge_logits(tape, &pattern, h, a, slope)?;
    let weights = segment_softmax(tape, &logits, pattern.row_ids(), n, Stabilizer::SegmentMax)?;
    Ok(TransitionMatrix {
        kind: TransitionKind::Att,
        pattern,
        weights,
    })
}

/// Attention transition with degree rescaling: entry `(i, j)` carries
/// `sqrt(d_i + 1) * T_att[i, j] / sqrt(d_j + 1)`.
pub fn build_att_gcn_transition(
    tape: &Tape,
    g: &Graph,
    h: &Tensor,
    a: &Tensor,
    slope: f64,
) -> Result<TransitionMatrix> {
    let att = build_att_transition(tape, g, h, a, slope)?;
    let deg = g.degrees();
    let pattern = Rc::clone(&att.pattern);
    let mut rescale = vec![0.0; pattern.num_entries()];
    for row in 0..g.num_nodes() {
        let row_factor = ((deg[row] + 1) as f64).sqrt();
        for e in pattern.entry_range(row) {
            let col = pattern.col_indices()[e];
            rescale[e] = row_factor / ((deg[col] + 1) as f64).sqrt();
        }
    }
    let rescale = Tensor::new(pattern.num_entries(), 1, rescale)?;
    let weights = row_mul(tape, &att.weights, &rescale)?;
    Ok(TransitionMatrix {
        kind: TransitionKind::AttGcn,
        pattern,
        weights,
    })
}

/// True when `[h_i || h_j] . a == [h_j || h_i] . a` within `tol` for every
/// listed edge — the condition under which the attention adjacency is
/// symmetric.
pub fn check_symmetry_condition(
    h: &Tensor,
    a: &Tensor,
    edges: &[(usize, usize)],
    tol: f64,
) -> Result<bool> {
    let (n, d) = h.shape();
    if a.shape() != (2 * d, 1) {
        return Err(Error::shape(
            "symmetry_condition",
            format!("attention vector {:?} for width {d}", a.shape()),
        ));
    }
    let hv = h.values();
    let av = a.values();
    let pair_logit = |i: usize, j: usize| -> f64 {
        (0..d)
            .map(|t| hv[i * d + t] * av[t] + hv[j * d + t] * av[d + t])
            .sum()
    };
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::InvalidInput(format!(
                "edge ({i}, {j}) out of range for {n} nodes"
            )));
        }
        if (pair_logit(i, j) - pair_logit(j, i)).abs() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::ops::sum_all;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_graph(rng: &mut StdRng, n: usize, p: f64) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Graph::from_undirected_edges(n, &edges).unwrap()
    }

    fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_loop_pattern_contains_diagonal() {
        let g = Graph::from_undirected_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let p = self_loop_pattern(&g);
        assert_eq!(p.num_entries(), g.num_edges() + 4);
        for i in 0..4 {
            assert!(p.find(i, i).is_some(), "missing self-loop at {i}");
        }
        // Isolated node 3 has exactly its self-loop.
        assert_eq!(p.entry_range(3).len(), 1);
    }

    #[test]
    fn gcn_transition_trivial_graphs() {
        let single = Graph::from_undirected_edges(1, &[]).unwrap();
        let t = build_gcn_transition(&single).unwrap();
        assert_eq!(t.weights().values(), vec![1.0]);

        let k2 = Graph::from_undirected_edges(2, &[(0, 1)]).unwrap();
        let t = build_gcn_transition(&k2).unwrap();
        for w in t.weights().values() {
            assert!((w - 0.5).abs() < 1e-15);
        }

        let k3 = Graph::from_undirected_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let t = build_gcn_transition(&k3).unwrap();
        assert_eq!(t.weights().len(), 9);
        for w in t.weights().values() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_transition_matches_dense_oracle_and_is_exactly_symmetric() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..5 {
            let n = rng.random_range(2..30);
            let g = random_graph(&mut rng, n, 0.3);
            let t = build_gcn_transition(&g).unwrap();
            let dense = t.to_dense().unwrap();
            let reference = oracle::dense_gcn_transition(&g.to_dense().unwrap());
            assert!(dense.max_abs_diff(&reference) < 1e-14);
            // Mirrored entries are bit-equal.
            let p = t.pattern();
            let w = t.weights().values();
            for row in 0..n {
                for e in p.entry_range(row) {
                    let col = p.col_indices()[e];
                    let mirror = p.find(col, row).expect("symmetric structure");
                    assert_eq!(w[e].to_bits(), w[mirror].to_bits());
                }
            }
        }
    }

    #[test]
    fn gcn_transition_weights_are_constants() {
        let g = Graph::from_undirected_edges(2, &[(0, 1)]).unwrap();
        let t = build_gcn_transition(&g).unwrap();
        assert!(!t.weights().requires_grad());
    }

    #[test]
    fn gcn_spectral_radius_bounded_by_one() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..4 {
            let n = rng.random_range(2..=40);
            let g = random_graph(&mut rng, n, 0.25);
            let dense = build_gcn_transition(&g).unwrap().to_dense().unwrap();
            let (vals, _) = oracle::symmetric_eigen(&dense).unwrap();
            for v in vals {
                assert!(v.abs() <= 1.0 + 1e-8);
            }
        }
    }

    #[test]
    fn att_transition_zero_vector_gives_uniform_rows() {
        let g = Graph::from_undirected_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let h = random_tensor(&mut rng, 4, 3);
        let a = Tensor::zeros(6, 1);
        let t = build_att_transition(&Tape::inactive(), &g, &h, &a, 0.2).unwrap();
        let dense = t.to_dense().unwrap();
        // Node 0 has degree 3: uniform weight 1/4 over 3 neighbors + self.
        for j in 0..4 {
            assert!((dense.get(0, j) - 0.25).abs() < 1e-12);
        }
        // Leaf nodes: 1/2 on self and on node 0.
        assert!((dense.get(1, 1) - 0.5).abs() < 1e-12);
        assert!((dense.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn att_transition_single_node_is_identity() {
        let g = Graph::from_undirected_edges(1, &[]).unwrap();
        let h = Tensor::new(1, 2, vec![0.3, -0.7]).unwrap();
        let a = Tensor::new(4, 1, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let t = build_att_transition(&Tape::inactive(), &g, &h, &a, 0.2).unwrap();
        assert_eq!(t.weights().values(), vec![1.0]);
    }

    #[test]
    fn att_transition_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..5 {
            let n = rng.random_range(2..25);
            let g = random_graph(&mut rng, n, 0.3);
            let h = random_tensor(&mut rng, n, 4);
            let a = random_tensor(&mut rng, 8, 1);
            let t = build_att_transition(&Tape::inactive(), &g, &h, &a, 0.2).unwrap();
            let dense = t.to_dense().unwrap();
            let h_dense = oracle::DenseMatrix::from_flat(n, 4, h.values()).unwrap();
            let reference = oracle::dense_attention_transition(
                &g.to_dense().unwrap(),
                &h_dense,
                &a.values(),
                0.2,
            )
            .unwrap();
            assert!(dense.max_abs_diff(&reference) < 1e-12);
        }
    }

    #[test]
    fn symmetry_condition_detects_symmetric_attention_vectors() {
        let mut rng = StdRng::seed_from_u64(5);
        let h = random_tensor(&mut rng, 4, 3);
        let edges = vec![(0usize, 1usize), (1, 2), (2, 3)];
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut sym = b.clone();
        sym.extend_from_slice(&b);
        let a_sym = Tensor::new(6, 1, sym).unwrap();
        assert!(check_symmetry_condition(&h, &a_sym, &edges, 1e-6).unwrap());

        let mut anti = b.clone();
        anti.extend(b.iter().map(|x| -x));
        let a_anti = Tensor::new(6, 1, anti).unwrap();
        assert!(!check_symmetry_condition(&h, &a_anti, &edges, 1e-6).unwrap());

        // Equal features satisfy the condition for any vector.
        let h_const = Tensor::filled(4, 3, 0.8);
        assert!(check_symmetry_condition(&h_const, &a_anti, &edges, 1e-6).unwrap());
    }

    #[test]
    fn symmetric_attention_vector_gives_symmetric_adjacency() {
        // With a = (b, b) the unnormalized attention adjacency is symmetric,
        // so T_att = D^{-1} A_att has symmetric A_att: verify via
        // d_i * T[i,j] == d_j * T[j,i] using the attention row sums.
        let mut rng = StdRng::seed_from_u64(29);
        let g = random_graph(&mut rng, 6, 0.5);
        let h = random_tensor(&mut rng, 6, 2);
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sym = b.clone();
        sym.extend_from_slice(&b);
        let a = Tensor::new(4, 1, sym).unwrap();
        assert!(check_symmetry_condition(&h, &a, &g.undirected_edges(), 1e-9).unwrap());

        // Rebuild the unnormalized adjacency densely and check symmetry.
        let hv = h.values();
        let av = a.values();
        let mut raw = oracle::DenseMatrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                if i == j || g.has_edge(i, j) {
                    let z: f64 = (0..2)
                        .map(|t| hv[i * 2 + t] * av[t] + hv[j * 2 + t] * av[2 + t])
                        .sum();
                    let act = if z > 0.0 { z } else { 0.2 * z };
                    raw.set(i, j, act.exp());
                }
            }
        }
        assert!(raw.is_symmetric(1e-12));
    }

    #[test]
    fn att_gcn_on_regular_graph_equals_att() {
        // A cycle is 2-regular: the degree rescaling cancels entirely.
        let g = Graph::from_undirected_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let h = random_tensor(&mut rng, 5, 3);
        let a = random_tensor(&mut rng, 6, 1);
        let tape = Tape::inactive();
        let att = build_att_transition(&tape, &g, &h, &a, 0.2).unwrap();
        let att_gcn = build_att_gcn_transition(&tape, &g, &h, &a, 0.2).unwrap();
        let diff: f64 = att
            .weights()
            .values()
            .iter()
            .zip(att_gcn.weights().values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            ;
        assert!(diff < 1e-14);
    }

    #[test]
    fn att_gcn_with_constant_features_equals_gcn() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..3 {
            let n = rng.random_range(2..20);
            let g = random_graph(&mut rng, n, 0.4);
            let h = Tensor::filled(n, 3, 0.37);
            let a = random_tensor(&mut rng, 6, 1);
            let att_gcn = build_att_gcn_transition(&Tape::inactive(), &g, &h, &a, 0.2).unwrap();
            let gcn = build_gcn_transition(&g).unwrap();
            let diff = att_gcn
                .to_dense()
                .unwrap()
                .max_abs_diff(&gcn.to_dense().unwrap());
            assert!(diff < 1e-6, "deviation {diff}");
        }
    }

    #[test]
    fn att_gcn_matches_its_dense_definitional_form() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..5 {
            let n = rng.random_range(2..25);
            let g = random_graph(&mut rng, n, 0.3);
            let h = random_tensor(&mut rng, n, 3);
            let a = random_tensor(&mut rng, 6, 1);
            let built = build_att_gcn_transition(&Tape::inactive(), &g, &h, &a, 0.2)
                .unwrap()
                .to_dense()
                .unwrap();
            let h_dense = oracle::DenseMatrix::from_flat(n, 3, h.values()).unwrap();
            let reference = oracle::dense_att_gcn_transition(
                &g.to_dense().unwrap(),
                &h_dense,
                &a.values(),
                0.2,
            )
            .unwrap();
            assert!(built.max_abs_diff(&reference) < 1e-6);
        }
    }

    #[test]
    fn att_gcn_three_algebraic_forms_agree() {
        let mut rng = StdRng::seed_from_u64(47);
        let g = random_graph(&mut rng, 8, 0.4);
        let h = random_tensor(&mut rng, 8, 3);
        let a = random_tensor(&mut rng, 6, 1);
        let hv = h.values();
        let av = a.values();

        // Unnormalized attention adjacency and its row-sum degree matrix.
        let mut a_att = oracle::DenseMatrix::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                if i == j || g.has_edge(i, j) {
                    let z: f64 = (0..3)
                        .map(|t| hv[i * 3 + t] * av[t] + hv[j * 3 + t] * av[3 + t])
                        .sum();
                    let act = if z > 0.0 { z } else { 0.2 * z };
                    a_att.set(i, j, act.exp());
                }
            }
        }
        let row_sums: Vec<f64> = (0..8).map(|i| a_att.row(i).iter().sum()).collect();
        let inv_row_sums: Vec<f64> = row_sums.iter().map(|s| 1.0 / s).collect();
        let deg_sqrt: Vec<f64> = g
            .degrees()
            .iter()
            .map(|&d| ((d + 1) as f64).sqrt())
            .collect();
        let deg_inv_sqrt: Vec<f64> = deg_sqrt.iter().map(|s| 1.0 / s).collect();

        let t_att = a_att.row_scale(&inv_row_sums);
        // Form 1: (I+D)^{1/2} T_att (I+D)^{-1/2}.
        let f1 = t_att.row_scale(&deg_sqrt).col_scale(&deg_inv_sqrt);
        // Form 2: (I+D)^{1/2} (D_att^{-1} A_att) (I+D)^{-1/2}.
        let f2 = a_att
            .row_scale(&inv_row_sums)
            .row_scale(&deg_sqrt)
            .col_scale(&deg_inv_sqrt);
        // Form 3: ((I+D)^{1/2} D_att^{-1}) A_att (I+D)^{-1/2}.
        let combined: Vec<f64> = deg_sqrt
            .iter()
            .zip(&inv_row_sums)
            .map(|(s, r)| s * r)
            .collect();
        let f3 = a_att.row_scale(&combined).col_scale(&deg_inv_sqrt);

        let built = build_att_gcn_transition(&Tape::inactive(), &g, &h, &a, 0.2)
            .unwrap()
            .to_dense()
            .unwrap();
        for (name, form) in [("factored", &f2), ("fused", &f3), ("definition", &f1)] {
            assert!(
                built.max_abs_diff(form) < 1e-6,
                "{name} form deviates by {}",
                built.max_abs_diff(form)
            );
        }
    }

    #[test]
    fn attention_gradients_flow_to_states_and_vector() {
        let mut rng = StdRng::seed_from_u64(53);
        let g = random_graph(&mut rng, 6, 0.5);
        let h = Tensor::param(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = Tensor::param(6, 1, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = random_tensor(&mut rng, 6, 2);
        let coeff = random_tensor(&mut rng, 6, 1);

        for (param, name) in [(&h, "states"), (&a, "vector")] {
            param.zero_grad();
            let forward = |tape: &Tape| {
                let t = build_att_gcn_transition(tape, &g, &h, &a, 0.2).unwrap();
                let out = t.apply(tape, &x).unwrap();
                let c0 = crate::ops::slice_col(tape, &out, 0).unwrap();
                let weighted = row_mul(tape, &c0, &coeff).unwrap();
                sum_all(tape, &weighted).unwrap()
            };
            let tape = Tape::new();
            let loss = forward(&tape);
            tape.backward(&loss).unwrap();
            let analytic = param.grad().unwrap();
            param.zero_grad();
            let numeric = oracle::finite_difference_grad(param, 1e-5, || {
                forward(&Tape::inactive()).scalar_value().unwrap()
            })
            .unwrap();
            let mismatch = oracle::gradient_mismatch(&analytic, &numeric, 1e-6);
            assert!(mismatch < 1e-5, "{name} gradient mismatch {mismatch}");
        }
    }

    proptest! {
        #[test]
        fn att_rows_always_sum_to_one(seed in 0u64..300) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.random_range(1..15);
            let g = random_graph(&mut rng, n, 0.4);
            let h = random_tensor(&mut rng, n, 3);
            let a = random_tensor(&mut rng, 6, 1);
            let t = build_att_transition(&Tape::inactive(), &g, &h, &a, 0.2).unwrap();
            let dense = t.to_dense().unwrap();
            for i in 0..n {
                let s: f64 = dense.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
