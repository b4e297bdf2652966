//! One dialog round through the grounding module of a freshly initialized
//! model: the prior `g` (question and history only), the posterior `G`
//! (answer added), and every bridge loss between them.
//!
//! ```text
//! cargo run --example grounding
//! ```

use visground::autodiff::Tensor;
use visground::data::{generate_synthetic, SyntheticConfig};
use visground::evaluation::distribution_entropy;
use visground::model::{
    bridge_loss, encode_answer, encode_context, mask_union, posterior_ground, prior_ground, BridgeVariant, Model,
    ModelConfig,
};

fn fmt(p: &[f64]) -> String {
    p.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn main() -> visground::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let (train_ds, _) = corpus.train_val()?;
    let model = Model::new(
        ModelConfig {
            vocab_size: train_ds.vocab.len(),
            ..ModelConfig::default()
        },
        0,
    )?;
    let example = &train_ds.examples[0];
    let round = &example.rounds[0];
    println!("Q: {}", train_ds.vocab.decode(&round.question_tokens));
    println!("A: {}   target region {:?}\n", train_ds.vocab.decode(&round.answer_tokens), round.gt_grounding);

    let mut tape = model.tape();
    let ctx = encode_context(&mut tape, &model, example, 0)?;
    let prior = prior_ground(&mut tape, &model, ctx.regions, ctx.x, &ctx.mask_x)?;
    let (y, mask_y) = encode_answer(&mut tape, &model, &round.answer_tokens)?;
    let mask_xy = mask_union(&ctx.mask_x, &mask_y);
    let posterior = posterior_ground(&mut tape, &model, ctx.regions, ctx.x, y, &mask_xy, &prior)?;

    let g = tape.value(prior.g).data().to_vec();
    let big_g = tape.value(posterior.g).data().to_vec();
    println!("prior g     [{}]  entropy {:.4}", fmt(&g), distribution_entropy(&g)?);
    println!("posterior G [{}]  entropy {:.4}\n", fmt(&big_g), distribution_entropy(&big_g)?);

    for variant in BridgeVariant::ALL {
        let loss = bridge_loss(&mut tape, &prior, &posterior, variant, true)?;
        println!("{:<18} {:.6}", format!("{variant:?}"), tape.value(loss).item());
    }

    // An all-zero answer encoding leaves the prior untouched.
    let zero = tape.constant(Tensor::zeros(tape.shape(ctx.x).to_vec()));
    let same = posterior_ground(&mut tape, &model, ctx.regions, ctx.x, zero, &ctx.mask_x, &prior)?;
    println!("\nposterior with y = 0 equals the prior: {}", tape.value(same.g) == tape.value(prior.g));
    Ok(())
}
