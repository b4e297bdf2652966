//! Trains on the synthetic corpus, reloads the best checkpoint from disk and
//! compares the decoder fed with the learned prior against uniform, shuffled
//! and annotated distributions.
//!
//! ```text
//! cargo run --release --example ablate -- [epochs] [out_dir]
//! ```

use std::path::PathBuf;

use visground::data::{generate_synthetic, SyntheticConfig};
use visground::evaluation::{ablate_distribution, DistributionMode};
use visground::model::{Model, ModelConfig};
use visground::training::{load_checkpoint, train, TrainConfig, CHECKPOINT_FILE};

fn main() -> visground::Result<()> {
    let mut args = std::env::args().skip(1);
    let max_epochs: usize = args.next().map_or(20, |s| s.parse().expect("epochs"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablate".into()));

    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let (train_ds, val_ds) = corpus.train_val()?;
    let cfg = TrainConfig {
        max_epochs,
        ..TrainConfig::default()
    };
    let mut model = Model::new(
        ModelConfig {
            vocab_size: train_ds.vocab.len(),
            ..ModelConfig::default()
        },
        cfg.seed,
    )?;
    let report = train(&mut model, &train_ds, &val_ds, &cfg, Some(&out))?;
    println!("best epoch {} (val mrr {:.4})", report.best_epoch, report.best_val_mrr);

    let (model, _) = load_checkpoint(&out.join(CHECKPOINT_FILE))?;
    println!("\n{:<8} {:>6} {:>6} {:>6} {:>9} {:>6}", "g", "MRR", "R@1", "R@5", "mean rank", "NDCG");
    for mode in [
        DistributionMode::Oracle,
        DistributionMode::Learned,
        DistributionMode::Mean,
        DistributionMode::Random,
    ] {
        let r = ablate_distribution(&model, &val_ds, cfg.loss_mode, mode, cfg.seed)?;
        println!(
            "{:<8} {:>6.3} {:>6.3} {:>6.3} {:>9.3} {:>6.3}",
            format!("{mode:?}").to_lowercase(),
            r.mrr,
            r.r_at_1,
            r.r_at_5,
            r.mean_rank,
            r.ndcg.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
