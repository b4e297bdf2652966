//! Briefly trains a model, evaluates it with the posterior branch enabled
//! for diagnostics, writes the per-round grounding export as JSON lines and
//! prints grounding accuracy with and without the answer.
//!
//! ```text
//! cargo run --release --example export_attention -- [epochs] [out.jsonl]
//! ```

use std::path::PathBuf;

use visground::data::{generate_synthetic, SyntheticConfig};
use visground::evaluation::{evaluate, grounding_accuracy, read_jsonl, write_jsonl, AttentionRecord, EvalOptions};
use visground::model::{Model, ModelConfig};
use visground::training::{train, TrainConfig};

fn main() -> visground::Result<()> {
    let mut args = std::env::args().skip(1);
    let max_epochs: usize = args.next().map_or(3, |s| s.parse().expect("epochs"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "attention.jsonl".into()));

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
    train(&mut model, &train_ds, &val_ds, &cfg, None)?;

    let opts = EvalOptions {
        with_posterior: true,
        ..EvalOptions::default()
    };
    let eval = evaluate(&model, &val_ds, &opts)?;
    write_jsonl(&out, &eval.attention)?;
    let records: Vec<AttentionRecord> = read_jsonl(&out)?;
    println!("wrote {} records to {}", records.len(), out.display());

    let first = &records[0];
    println!("\n{} round {}", first.image_id, first.round);
    println!("  prior     {:?}", first.prior.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    if let Some(post) = &first.posterior {
        println!("  posterior {:?}", post.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    }
    println!("  top-3 prior {:?}, annotated {:?}", first.top3_prior, first.gt_grounding);

    println!("\ngrounding top-1 (prior)     {:.3}", grounding_accuracy(&records, 1)?);
    println!("grounding top-3 (prior)     {:.3}", grounding_accuracy(&records, 3)?);
    if let Some(acc) = eval.report.grounding_top1_posterior {
        println!("grounding top-1 (posterior) {acc:.3}");
    }
    Ok(())
}
