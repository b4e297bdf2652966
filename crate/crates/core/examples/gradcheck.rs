//! Finite-difference check of the full training loss (encoders, grounding,
//! decoders, bridge) for every loss mode and bridge variant on a tiny model.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use visground::autodiff::{grad_check_params, DEFAULT_STEP};
use visground::data::{generate_synthetic, SyntheticConfig};
use visground::model::{BridgeVariant, Model, ModelConfig};
use visground::training::{unit_loss, LossMode, TrainConfig};

fn main() -> visground::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig {
        num_images: 2,
        val_images: 1,
        ..SyntheticConfig::default()
    })?;
    let (train_ds, _) = corpus.train_val()?;
    let example = &train_ds.examples[0];
    let model = Model::new(
        ModelConfig {
            vocab_size: train_ds.vocab.len(),
            embed_dim: 6,
            model_dim: 8,
            heads: 2,
            rnn_hidden: 3,
            pool_hidden: 5,
            ..ModelConfig::default()
        },
        3,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut worst_overall = 0.0f64;
    for loss_mode in LossMode::ALL {
        for bridge_variant in BridgeVariant::ALL {
            let cfg = TrainConfig {
                loss_mode,
                bridge_variant,
                detach_posterior: false,
                ..TrainConfig::default()
            };
            let checks = grad_check_params(
                &model.params,
                |tape| Ok(unit_loss(tape, &model, example, 1, &cfg)?.total),
                4,
                DEFAULT_STEP,
                &mut rng,
            )?;
            let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("params");
            println!(
                "{:<15} {:<18} max rel error {:.2e}  ({})",
                format!("{loss_mode:?}"),
                format!("{bridge_variant:?}"),
                worst.max_rel_error,
                worst.name
            );
            worst_overall = worst_overall.max(worst.max_rel_error);
        }
    }
    println!("worst over all configurations: {worst_overall:.2e}");
    Ok(())
}
