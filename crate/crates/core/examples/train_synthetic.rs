//! Trains on a freshly generated synthetic corpus and prints per-epoch
//! validation metrics.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [seed] [kl_weight] [epochs]
//! ```

use std::time::Instant;

use visground::data::{generate_synthetic, SyntheticConfig};
use visground::evaluation::{evaluate, EvalOptions};
use visground::model::{Model, ModelConfig};
use visground::training::{train, TrainConfig};

fn main() -> visground::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let seed: u64 = arg(0, "0").parse().expect("seed");
    let kl_weight: f64 = arg(1, "1").parse().expect("kl_weight");
    let max_epochs: usize = arg(2, "20").parse().expect("epochs");

    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let (train_ds, val_ds) = corpus.train_val()?;
    let model_cfg = ModelConfig {
        vocab_size: train_ds.vocab.len(),
        ..ModelConfig::default()
    };
    let mut model = Model::new(model_cfg, seed)?;
    let cfg = TrainConfig {
        kl_weight,
        max_epochs,
        seed,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let report = train(&mut model, &train_ds, &val_ds, &cfg, None)?;
    for e in &report.epochs {
        println!(
            "epoch {:2}  lr {:.6}  L_G {:.4}  L_KL {:.4}  val mrr {:.3}  top1 {:.3}",
            e.epoch,
            e.lr,
            e.l_g.unwrap_or(f64::NAN),
            e.l_kl,
            e.val.mrr,
            e.val.grounding_top1.unwrap_or(f64::NAN),
        );
    }
    let opts = EvalOptions {
        with_posterior: true,
        ..EvalOptions::default()
    };
    let final_report = evaluate(&model, &val_ds, &opts)?.report;
    println!(
        "best epoch {}  {:.1}s\n{}",
        report.best_epoch,
        start.elapsed().as_secs_f64(),
        serde_json::to_string_pretty(&final_report)?
    );
    Ok(())
}
