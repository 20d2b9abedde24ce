//! Train a two-layer diffusion network on a synthetic stochastic-block-model
//! graph and compare it against a features-only logistic regression trained
//! under the same budget.
//!
//!     cargo run --example train_on_synthetic [seed]

use agdn::data::{synth_sbm, SbmConfig};
use agdn::layer::Variant;
use agdn::model::ModelConfig;
use agdn::train::{linear_baseline, train, TrainConfig};

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
    println!(
        "graph: {} nodes, {} undirected edges, {} features, {} classes",
        ds.num_nodes(),
        ds.graph.undirected_edge_count(),
        ds.feature_dim(),
        ds.num_classes
    );

    let mcfg = ModelConfig {
        variant: Variant::GcnHa,
        layers: 2,
        hops: 3,
        heads: 1,
        hidden_dim: 16,
        feature_dim: ds.feature_dim(),
        num_classes: ds.num_classes,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        learning_rate: 0.3,
        epochs: 200,
        seed,
    };
    let (_params, report) = train(&ds, &mcfg, &tcfg, |r| {
        if r.epoch % 20 == 0 {
            println!(
                "epoch {:>3}  loss {:.4}  train {:.3}  valid {:.3}  test {:.3}",
                r.epoch, r.train_loss, r.train_acc, r.valid_acc, r.test_acc
            );
        }
    })?;
    println!(
        "best epoch {}: train {:.3}, valid {:.3}, test {:.3}",
        report.best_epoch, report.train_acc, report.valid_acc, report.test_acc
    );

    let baseline = linear_baseline(&ds, tcfg.epochs, tcfg.learning_rate, seed)?;
    println!("features-only logistic regression test accuracy: {baseline:.3}");
    println!(
        "graph model beats the baseline by {:.1} points",
        (report.test_acc - baseline) * 100.0
    );
    Ok(())
}
