//! Dev probe: time a short full-scale training slice and report MSEs.

use polarlab::so3::{train, OptimizerKind, TrainConfig};

fn main() {
    let kind = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "muon".into())
        .parse::<OptimizerKind>()
        .unwrap();
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let mut cfg = TrainConfig::new(16, kind, kind.default_base_lr(), 1);
    cfg.epochs = epochs;
    let record = train(&cfg).unwrap();
    println!(
        "{kind}: {} epochs in {:.1}s ({:.2}s/epoch), final {:.5}",
        record.history.len(),
        record.wall_seconds,
        record.wall_seconds / record.history.len().max(1) as f64,
        record.final_test_mse
    );
    for r in &record.history {
        println!(
            "  epoch {:>3}  train {:.5}  test {:.5}  lr {:.2e}",
            r.epoch, r.train_mse, r.test_mse, r.lr
        );
    }
}
