//! Feed training labels back in as input features — without leaking them.
//!
//! With label reuse enabled the input grows by one one-hot column per class.
//! During training each epoch exposes a random half of the *training* nodes
//! and computes the loss only on the hidden half, so a node never sees its
//! own target; at evaluation every training label is exposed. This example
//! trains the same model with and without the trick, compares the scores,
//! and then audits one training-mode pass: exposure must stay inside the
//! train mask, and every unexposed row must carry all-zero label columns.
//!
//!     cargo run --example label_augmentation [seed]

use agdn::data::{synth_sbm, SbmConfig};
use agdn::layer::Variant;
use agdn::model::{augment_with_labels, forward, init_params, ModelConfig};
use agdn::tensor::{Tape, Tensor};
use agdn::train::{train, TrainConfig};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() -> agdn::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let ds = synth_sbm(&SbmConfig {
        num_nodes: 300,
        num_classes: 3,
        p_in: 0.1,
        p_out: 0.01,
        feature_dim: 8,
        feature_noise: 1.0,
        seed,
    })?;
    let base = ModelConfig {
        variant: Variant::GcnHa,
        layers: 2,
        hops: 3,
        heads: 1,
        hidden_dim: 16,
        feature_dim: ds.feature_dim(),
        num_classes: ds.num_classes,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig { learning_rate: 0.3, epochs: 200, seed };

    let (_, plain) = train(&ds, &base, &tcfg, |_| {})?;
    let labeled_cfg = ModelConfig { use_labels: true, ..base.clone() };
    let (_, labeled) = train(&ds, &labeled_cfg, &tcfg, |_| {})?;

    println!("{:<26} {:>8} {:>8} {:>8}", "", "train", "valid", "test");
    println!(
        "{:<26} {:>8.3} {:>8.3} {:>8.3}",
        "features only", plain.train_acc, plain.valid_acc, plain.test_acc
    );
    println!(
        "{:<26} {:>8.3} {:>8.3} {:>8.3}",
        "with label reuse", labeled.train_acc, labeled.valid_acc, labeled.test_acc
    );
    println!(
        "test delta: {:+.2} points\n",
        (labeled.test_acc - plain.test_acc) * 100.0
    );

    // Leak audit on a fresh training-mode pass.
    let params = init_params(&labeled_cfg, seed)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let out = forward(&Tape::inactive(), &ds, &params, &labeled_cfg, true, &mut rng)?;
    let exposed = out.exposed.expect("label reuse reports its exposure");

    let in_train =
        (0..ds.num_nodes()).filter(|&i| exposed[i]).all(|i| ds.train_mask.contains(&i));
    let shown = exposed.iter().filter(|&&e| e).count();
    println!(
        "training-mode exposure: {shown} of {} train nodes shown, all inside train mask: {in_train}",
        ds.train_mask.len()
    );

    // Rebuild the augmented input and scan the label columns directly.
    let features = Tensor::new(ds.num_nodes(), ds.feature_dim(), ds.features.to_f64())?;
    let x = augment_with_labels(&features, &ds.labels, &exposed, ds.num_classes)?;
    let xv = x.values();
    let width = ds.feature_dim() + ds.num_classes;
    let mut leaked = 0usize;
    for i in 0..ds.num_nodes() {
        if exposed[i] {
            continue;
        }
        for c in 0..ds.num_classes {
            if xv[i * width + ds.feature_dim() + c] != 0.0 {
                leaked += 1;
            }
        }
    }
    println!("nonzero label entries on unexposed rows: {leaked}");

    if in_train && leaked == 0 {
        println!("\nPASS  labels reach the model only through sanctioned exposure");
        Ok(())
    } else {
        println!("\nFAIL  label information leaked");
        std::process::exit(1);
    }
}
