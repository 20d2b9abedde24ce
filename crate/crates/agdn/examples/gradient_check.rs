//! Check every analytic gradient of a small network against central finite
//! differences.
//!
//! Builds a random graph and a two-layer model (one run per variant), runs a
//! forward/backward pass through the tape, then perturbs each parameter entry
//! by ±eps and compares the numeric slope with what the tape produced. The
//! relative mismatch uses an absolute floor so near-zero entries compare
//! absolutely instead of blowing up.
//!
//!     cargo run --example gradient_check [seed]

use agdn::data::{Dataset, FeatureMatrix};
use agdn::graph::Graph;
use agdn::layer::Variant;
use agdn::model::{forward, init_params, ModelConfig};
use agdn::ops::softmax_cross_entropy;
use agdn::oracle;
use agdn::tensor::{Tape, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const EPS: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;

fn random_dataset(rng: &mut StdRng, n: usize, feature_dim: usize, num_classes: usize) -> Dataset {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    let features: Vec<f32> = (0..n * feature_dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let labels: Vec<i64> = (0..n).map(|_| rng.random_range(0..num_classes) as i64).collect();
    let split = (n * 6) / 10;
    Dataset {
        graph: Graph::from_undirected_edges(n, &edges).unwrap(),
        features: FeatureMatrix::new(n, feature_dim, features).unwrap(),
        labels,
        num_classes,
        train_mask: (0..split).collect(),
        valid_mask: (split..n - 1).collect(),
        test_mask: vec![n - 1],
    }
}

fn main() -> agdn::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst_overall = 0.0f64;

    for variant in [Variant::GcnHa, Variant::GatHa] {
        let ds = random_dataset(&mut rng, 12, 3, 2);
        let cfg = ModelConfig {
            variant,
            layers: 2,
            hops: 3,
            heads: 2,
            hidden_dim: 4,
            feature_dim: ds.feature_dim(),
            num_classes: ds.num_classes,
            dropout: 0.0,
            input_drop: 0.0,
            attn_drop: 0.0,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, rng.random())?;
        let classes = ds.labels_as_classes();
        let mask = ds.train_mask.clone();
        // Dropout rates are zero, so the rng passed to `forward` is never
        // consulted and both differentiation routes see the same function.
        let loss_fn = |tape: &Tape| -> agdn::Result<Tensor> {
            let mut dead_rng = StdRng::seed_from_u64(0);
            let out = forward(tape, &ds, &params, &cfg, true, &mut dead_rng)?;
            softmax_cross_entropy(tape, &out.logits, &classes, &mask)
        };

        let tape = Tape::new();
        let loss = loss_fn(&tape)?;
        tape.backward(&loss)?;

        println!("variant {variant:?}, loss {:.6}", loss.scalar_value()?);
        println!("  {:<22} {:>8} {:>12}", "parameter", "entries", "mismatch");
        for (name, p) in params.named_params() {
            let analytic = p.grad_or_zeros();
            p.zero_grad();
            let numeric = oracle::finite_difference_grad(&p, EPS, || {
                loss_fn(&Tape::inactive()).unwrap().scalar_value().unwrap()
            })?;
            let mismatch = oracle::gradient_mismatch(&analytic, &numeric, FLOOR);
            worst_overall = worst_overall.max(mismatch);
            println!("  {:<22} {:>8} {:>12.3e}", name, p.len(), mismatch);
        }
    }

    println!();
    if worst_overall <= TOLERANCE {
        println!("PASS  worst relative mismatch {worst_overall:.3e} <= {TOLERANCE:.0e}");
        Ok(())
    } else {
        println!("FAIL  worst relative mismatch {worst_overall:.3e} > {TOLERANCE:.0e}");
        std::process::exit(1);
    }
}
