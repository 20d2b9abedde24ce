//! Self-verification suite: re-derives the engine's core guarantees with
//! the dense 64-bit oracles and reports one measured-error line per
//! invariant. Backs the `verify` subcommand.

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layer::{combine, diffuse, encode, hop_attention, Variant};
use crate::model::{forward, init_params, ModelConfig};
use crate::ops::softmax_cross_entropy;
use crate::oracle::{
    self, dense_adaptive_diffusion, gcn_layer_reference, polynomial_filter_coefficients,
    poly_filter_reference, DenseMatrix,
};
use crate::tensor::{Tape, Tensor};
use crate::transition::{
    build_att_gcn_transition, build_att_transition, build_gcn_transition, TransitionMatrix,
};

/// How much work the suite performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Fast smoke-level pass sized for interactive runs.
    Small,
    /// Acceptance-sized pass.
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scale> {
        match s {
            "small" => Ok(Scale::Small),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!(
                "unknown scale `{other}` (expected `small` or `full`)"
            ))),
        }
    }
}

/// One verified invariant with its measured error.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Informational checks report a measurement without gating the exit
    /// code.
    pub hard: bool,
    pub detail: String,
}

impl Check {
    fn measured(name: &str, max_err: f64, tolerance: f64, detail: String) -> Check {
        Check {
            name: name.to_string(),
            max_err,
            tolerance,
            passed: max_err.is_finite() && max_err <= tolerance,
            hard: true,
            detail,
        }
    }

    fn informational(name: &str, max_err: f64, detail: String) -> Check {
        Check {
            name: name.to_string(),
            max_err,
            tolerance: f64::NAN,
            passed: true,
            hard: false,
            detail,
        }
    }
}

/// True when every gating check passed.
pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| !c.hard || c.passed)
}

/// Render the checks as an aligned pass/fail table.
pub fn render_report(checks: &[Check]) -> String {
    let name_width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        let status = if !c.hard {
            "info"
        } else if c.passed {
            "PASS"
        } else {
            "FAIL"
        };
        let tol = if c.tolerance.is_nan() {
            "-".to_string()
        } else {
            format!("{:.1e}", c.tolerance)
        };
        let _ = writeln!(
            out,
            "{status}  {:<name_width$}  measured {:>9.3e}  tolerance {:>8}  {}",
            c.name, c.max_err, tol, c.detail
        );
    }
    let _ = writeln!(
        out,
        "{} of {} checks passed",
        checks.iter().filter(|c| c.passed && c.hard).count(),
        checks.iter().filter(|c| c.hard).count()
    );
    out
}

fn random_graph(rng: &mut StdRng, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_undirected_edges(n, &edges).expect("valid random graph")
}

fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn dense_of(t: &Tensor) -> DenseMatrix {
    DenseMatrix::from_flat(t.rows(), t.cols(), t.values()).unwrap()
}

/// Max deviation of each attention row sum from 1. Exposed separately so a
/// deliberately perturbed transition can demonstrate the failure path.
pub fn row_stochastic_error(t: &TransitionMatrix) -> f64 {
    let pattern = t.pattern();
    let w = t.weights().values();
    let mut worst = 0.0f64;
    for r in 0..pattern.num_rows() {
        let sum: f64 = w[pattern.entry_range(r)].iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

fn gradient_fidelity(rng: &mut StdRng, configs: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for c in 0..configs {
        let n = rng.random_range(4..=20);
        let graph = random_graph(rng, n, 0.3);
        let feature_dim = rng.random_range(2..=4);
        let num_classes = rng.random_range(2..=3);
        let cfg = ModelConfig {
            variant: if c % 2 == 0 { Variant::GcnHa } else { Variant::GatHa },
            layers: rng.random_range(1..=2),
            hops: rng.random_range(0..=3),
            heads: rng.random_range(1..=2),
            hidden_dim: rng.random_range(2..=5),
            feature_dim,
            num_classes,
            dropout: 0.0,
            input_drop: 0.0,
            attn_drop: 0.0,
            use_labels: c % 3 == 0,
            ..ModelConfig::default()
        };
        // Eval-mode label exposure is deterministic, which finite
        // differences require.
        let training = !cfg.use_labels;
        let features: Vec<f32> = (0..n * feature_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let labels: Vec<i64> = (0..n).map(|_| rng.random_range(0..num_classes) as i64).collect();
        let split = (n * 6) / 10;
        let ds = Dataset {
            graph,
            features: crate::data::FeatureMatrix::new(n, feature_dim, features)?,
            labels,
            num_classes,
            train_mask: (0..split.max(1)).collect(),
            valid_mask: (split.max(1)..n.max(split + 1)).collect(),
            test_mask: vec![n - 1],
        };
        let classes = ds.labels_as_classes();
        let mask = ds.train_mask.clone();
        let params = init_params(&cfg, rng.random())?;
        let loss_fn = |tape: &Tape| -> Result<Tensor> {
            let mut dead_rng = StdRng::seed_from_u64(0);
            let out = forward(tape, &ds, &params, &cfg, training, &mut dead_rng)?;
            softmax_cross_entropy(tape, &out.logits, &classes, &mask)
        };
        let tape = Tape::new();
        let loss = loss_fn(&tape)?;
        tape.backward(&loss)?;
        for (name, p) in params.named_params() {
            let analytic = p.grad_or_zeros();
            p.zero_grad();
            // A 1e-3 step occasionally jumps across a ReLU/LeakyReLU kink,
            // corrupting the central-difference estimate; 1e-4 stays on one
            // side while remaining far above f64 roundoff for these losses.
            let numeric = oracle::finite_difference_grad(&p, 1e-4, || {
                loss_fn(&Tape::inactive()).unwrap().scalar_value().unwrap()
            })?;
            let mismatch = oracle::gradient_mismatch(&analytic, &numeric, 1e-6);
            if mismatch > worst {
                worst = mismatch;
                detail = format!("worst at config {c} ({name})");
            }
        }
    }
    Ok(Check::measured(
        "gradient-finite-difference-match",
        worst,
        1e-4,
        format!("{configs} random configs, both variants; {detail}"),
    ))
}

fn diffusion_equivalence(rng: &mut StdRng, graphs: usize) -> Result<Check> {
    let tape = Tape::inactive();
    let mut worst = 0.0f64;
    for _ in 0..graphs {
        let n = rng.random_range(2..=50);
        let g = random_graph(rng, n, 0.2);
        let k = rng.random_range(0..=4);
        let d = rng.random_range(1..=6);
        let h = random_tensor(rng, n, d);
        // Random per-node hop weights, normalized across hops.
        let mut theta = vec![0.0; n * (k + 1)];
        for i in 0..n {
            let row = &mut theta[i * (k + 1)..(i + 1) * (k + 1)];
            for v in row.iter_mut() {
                *v = rng.random_range(0.01..1.0);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let att = Tensor::new(n, k + 1, theta.clone())?;
        let t = build_gcn_transition(&g)?;
        let stack = diffuse(&tape, &t, &h, k)?;
        let sparse = combine(&tape, &stack, &att)?;
        let dense = dense_adaptive_diffusion(
            &t.to_dense()?,
            &DenseMatrix::from_flat(n, k + 1, theta)?,
            &dense_of(&h),
        )?;
        worst = worst.max(dense.max_abs_diff(&dense_of(&sparse)));
    }
    Ok(Check::measured(
        "sparse-dense-diffusion-match",
        worst,
        1e-5,
        format!("{graphs} random graphs up to 50 nodes"),
    ))
}

fn spectral_filter_match(rng: &mut StdRng, sizes: &[usize]) -> Result<Check> {
    let tape = Tape::inactive();
    let mut worst = 0.0f64;
    for &n in sizes {
        let g = random_graph(rng, n, 0.25);
        let k = 3;
        let d = 2;
        let h = random_tensor(rng, n, d);
        let mut theta: Vec<f64> = (0..=k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = theta.iter().sum();
        theta.iter_mut().for_each(|v| *v /= s);
        // Same scalar weights replicated on every node.
        let att = Tensor::new(
            n,
            k + 1,
            (0..n).flat_map(|_| theta.clone()).collect(),
        )?;
        let t = build_gcn_transition(&g)?;
        let stack = diffuse(&tape, &t, &h, k)?;
        let layer_out = combine(&tape, &stack, &att)?;
        let filtered = poly_filter_reference(&t.to_dense()?, &theta, &dense_of(&h))?;
        worst = worst.max(filtered.max_abs_diff(&dense_of(&layer_out)));
    }
    Ok(Check::measured(
        "spectral-polynomial-filter-match",
        worst,
        1e-4,
        format!("constant hop weights on symmetric transitions, n = {sizes:?}"),
    ))
}

fn binomial_identity(rng: &mut StdRng, trials: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let k = rng.random_range(0..=6);
        let theta: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xi = polynomial_filter_coefficients(&theta);
        for step in 0..=40 {
            let lambda = 2.0 * step as f64 / 40.0;
            let direct: f64 = theta
                .iter()
                .enumerate()
                .map(|(kk, t)| t * (1.0 - lambda).powi(kk as i32))
                .sum();
            let expanded: f64 = xi
                .iter()
                .enumerate()
                .map(|(j, x)| x * lambda.powi(j as i32))
                .sum();
            worst = worst.max((direct - expanded).abs());
        }
    }
    Ok(Check::measured(
        "hop-to-spectral-coefficient-identity",
        worst,
        1e-8,
        format!("{trials} random coefficient sets on a spectrum grid"),
    ))
}

fn transition_invariants(rng: &mut StdRng, samples: usize) -> Result<Vec<Check>> {
    let tape = Tape::inactive();
    let mut row_err = 0.0f64;
    let mut sym_err = 0.0f64;
    let mut dense_err = 0.0f64;
    let mut degrade_err = 0.0f64;
    for _ in 0..samples {
        let n = rng.random_range(2..=30);
        let g = random_graph(rng, n, 0.3);
        let d = rng.random_range(1..=5);
        let h = random_tensor(rng, n, d);
        let a = random_tensor(rng, 2 * d, 1);

        let att = build_att_transition(&tape, &g, &h, &a, 0.2)?;
        row_err = row_err.max(row_stochastic_error(&att));

        let gcn = build_gcn_transition(&g)?;
        let pattern = gcn.pattern();
        let w = gcn.weights().values();
        for r in 0..n {
            for e in pattern.entry_range(r) {
                let c = pattern.col_indices()[e];
                let mirrored = pattern.find(c, r).expect("symmetric pattern");
                // Exact bit equality across the diagonal.
                if w[e].to_bits() != w[mirrored].to_bits() {
                    sym_err = sym_err.max((w[e] - w[mirrored]).abs().max(f64::MIN_POSITIVE));
                }
            }
        }

        let att_gcn = build_att_gcn_transition(&tape, &g, &h, &a, 0.2)?;
        let dense_def = oracle::dense_att_gcn_transition(&g.to_dense()?, &dense_of(&h), &a.values(), 0.2)?;
        dense_err = dense_err.max(dense_def.max_abs_diff(&att_gcn.to_dense()?));

        let constant = Tensor::filled(n, d, 0.7);
        let degraded = build_att_gcn_transition(&tape, &g, &constant, &a, 0.2)?;
        degrade_err = degrade_err.max(gcn.to_dense()?.max_abs_diff(&degraded.to_dense()?));
    }
    Ok(vec![
        Check::measured(
            "attention-rows-sum-to-one",
            row_err,
            1e-6,
            format!("{samples} random feature/attention draws"),
        ),
        Check::measured(
            "symmetric-transition-bit-equality",
            sym_err,
            0.0,
            "mirrored degree-normalized weights compared bitwise".to_string(),
        ),
        Check::measured(
            "rescaled-attention-dense-form",
            dense_err,
            1e-6,
            "sparse weights vs dense definitional product".to_string(),
        ),
        Check::measured(
            "constant-feature-degradation",
            degrade_err,
            1e-6,
            "uniform features collapse attention to degree weights".to_string(),
        ),
    ])
}

fn gcn_reduction(rng: &mut StdRng, graphs: usize) -> Result<Check> {
    let tape = Tape::inactive();
    let mut worst = 0.0f64;
    for _ in 0..graphs {
        let n = rng.random_range(2..=50);
        let g = random_graph(rng, n, 0.25);
        let d_in = rng.random_range(1..=4);
        let d_out = rng.random_range(1..=3);
        let h = random_tensor(rng, n, d_in);
        let w = random_tensor(rng, d_in, d_out);
        // One head, residual off, all hop weight on the first power.
        let t = build_gcn_transition(&g)?;
        let h0 = encode(&tape, &h, &w)?;
        let stack = diffuse(&tape, &t, &h0, 1)?;
        let mut one_hot = vec![0.0; n * 2];
        for i in 0..n {
            one_hot[i * 2 + 1] = 1.0;
        }
        let att = Tensor::new(n, 2, one_hot)?;
        let out = combine(&tape, &stack, &att)?;
        let expected = gcn_layer_reference(&g.to_dense()?, &dense_of(&h), &dense_of(&w))?;
        worst = worst.max(expected.max_abs_diff(&dense_of(&out)));
    }
    Ok(Check::measured(
        "first-power-reduces-to-gcn",
        worst,
        1e-6,
        format!("{graphs} random graphs up to 50 nodes"),
    ))
}

fn hop_normalization(rng: &mut StdRng, samples: usize) -> Result<Check> {
    let tape = Tape::inactive();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let n = rng.random_range(2..=30);
        let g = random_graph(rng, n, 0.3);
        let k = rng.random_range(0..=4);
        let d = rng.random_range(1..=4);
        let h = random_tensor(rng, n, d);
        let a_hw = random_tensor(rng, 2 * d, 1);
        let t = build_gcn_transition(&g)?;
        let stack = diffuse(&tape, &t, &h, k)?;
        let att = hop_attention(&tape, &stack, &a_hw, 0.2)?;
        let values = att.values();
        for i in 0..n {
            let sum: f64 = values[i * (k + 1)..(i + 1) * (k + 1)].iter().sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    Ok(Check::measured(
        "hop-attention-rows-sum-to-one",
        worst,
        1e-6,
        format!("{samples} random graphs and attention vectors"),
    ))
}

/// Least-squares residual when approximating a per-node-weighted diffusion
/// with a single scalar coefficient sequence. Reported, not gated: a
/// strictly non-constant weighting should not be expressible as one
/// polynomial filter.
fn scalar_filter_gap(rng: &mut StdRng) -> Result<Check> {
    let n = 24;
    let k = 3;
    let g = random_graph(rng, n, 0.3);
    let h = random_tensor(rng, n, 3);
    let mut theta = vec![0.0; n * (k + 1)];
    for i in 0..n {
        let row = &mut theta[i * (k + 1)..(i + 1) * (k + 1)];
        for v in row.iter_mut() {
            *v = rng.random_range(0.01..1.0);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let t = build_gcn_transition(&g)?;
    let target = dense_adaptive_diffusion(
        &t.to_dense()?,
        &DenseMatrix::from_flat(n, k + 1, theta)?,
        &dense_of(&h),
    )?;
    // Basis: vectorized TᵏH for k = 0..K. Solve the (K+1)-dim normal
    // equations by Gaussian elimination.
    let t_dense = t.to_dense()?;
    let mut basis = Vec::with_capacity(k + 1);
    let mut power = dense_of(&h);
    basis.push(power.clone());
    for _ in 0..k {
        power = t_dense.matmul(&power);
        basis.push(power.clone());
    }
    let dim = k + 1;
    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    let dot = |a: &DenseMatrix, b: &DenseMatrix| -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    };
    for i in 0..dim {
        for j in 0..dim {
            gram[i * dim + j] = dot(&basis[i], &basis[j]);
        }
        rhs[i] = dot(&basis[i], &target);
    }
    for col in 0..dim {
        let pivot = (col..dim)
            .max_by(|&a, &b| {
                gram[a * dim + col]
                    .abs()
                    .total_cmp(&gram[b * dim + col].abs())
            })
            .unwrap();
        if pivot != col {
            for c in 0..dim {
                gram.swap(col * dim + c, pivot * dim + c);
            }
            rhs.swap(col, pivot);
        }
        let p = gram[col * dim + col];
        if p.abs() < 1e-12 {
            continue;
        }
        for r in 0..dim {
            if r == col {
                continue;
            }
            let f = gram[r * dim + col] / p;
            for c in 0..dim {
                gram[r * dim + c] -= f * gram[col * dim + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let coefs: Vec<f64> = (0..dim)
        .map(|i| {
            let p = gram[i * dim + i];
            if p.abs() < 1e-12 {
                0.0
            } else {
                rhs[i] / p
            }
        })
        .collect();
    let mut best_fit = DenseMatrix::zeros(n, 3);
    for (c, b) in coefs.iter().zip(&basis) {
        best_fit = best_fit.add(&b.scale(*c));
    }
    let residual = best_fit.max_abs_diff(&target);
    Ok(Check::informational(
        "per-node-weights-exceed-scalar-filters",
        residual,
        "best scalar-coefficient fit still misses the adaptive output".to_string(),
    ))
}

/// Run every invariant check at the given scale.
pub fn run_all(scale: Scale, seed: u64) -> Result<Vec<Check>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (grad_cfgs, graphs, samples, spectral_sizes): (usize, usize, usize, &[usize]) =
        match scale {
            Scale::Small => (4, 10, 20, &[8, 16]),
            Scale::Full => (20, 50, 100, &[8, 16, 32, 48, 64]),
        };
    let mut checks = vec![
        gradient_fidelity(&mut rng, grad_cfgs)?,
        diffusion_equivalence(&mut rng, graphs)?,
        spectral_filter_match(&mut rng, spectral_sizes)?,
        binomial_identity(&mut rng, 20)?,
    ];
    checks.extend(transition_invariants(&mut rng, samples)?);
    checks.push(gcn_reduction(&mut rng, graphs.min(20))?);
    checks.push(hop_normalization(&mut rng, samples.min(50))?);
    checks.push(scalar_filter_gap(&mut rng)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_scale_suite_passes_clean() {
        let checks = run_all(Scale::Small, 0).unwrap();
        assert!(
            all_passed(&checks),
            "failing checks:\n{}",
            render_report(&checks)
        );
        assert!(checks.len() >= 9);
    }

    #[test]
    fn perturbed_transition_fails_row_sum_check() {
        let tape = Tape::inactive();
        let mut rng = StdRng::seed_from_u64(3);
        let g = random_graph(&mut rng, 12, 0.4);
        let h = random_tensor(&mut rng, 12, 3);
        let a = random_tensor(&mut rng, 6, 1);
        let t = build_att_transition(&tape, &g, &h, &a, 0.2).unwrap();
        assert!(row_stochastic_error(&t) <= 1e-6);
        let v = t.weights().value_at(0, 0);
        t.weights().set_value_at(0, 0, v + 0.25);
        assert!(row_stochastic_error(&t) > 0.2);
    }

    #[test]
    fn report_lists_every_check_with_status() {
        let checks = run_all(Scale::Small, 1).unwrap();
        let report = render_report(&checks);
        for c in &checks {
            assert!(report.contains(&c.name));
        }
        assert!(report.contains("PASS") || report.contains("FAIL"));
        assert!(report.contains("checks passed"));
    }

    #[test]
    fn scale_parses_from_strings() {
        assert_eq!("small".parse::<Scale>().unwrap(), Scale::Small);
        assert_eq!("full".parse::<Scale>().unwrap(), Scale::Full);
        assert!("medium".parse::<Scale>().is_err());
    }
}
