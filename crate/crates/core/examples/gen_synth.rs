//! Generates the default synthetic grounding corpus, writes it to a
//! directory and prints one dialog.
//!
//! ```text
//! cargo run --release --example gen_synth -- [out_dir]
//! ```

use std::path::PathBuf;

use visground::data::{generate_synthetic, load_dataset, Asked, Split, SyntheticConfig, COLORS, SHAPES};

fn main() -> visground::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    let cfg = SyntheticConfig::default();
    let corpus = generate_synthetic(&cfg)?;
    let path = corpus.save(&out)?;

    let train = load_dataset(&path, Split::Train)?;
    let val = load_dataset(&path, Split::Val)?;
    println!(
        "{}: {} train / {} val dialogs, {} units, vocabulary of {}",
        path.display(),
        train.examples.len(),
        val.examples.len(),
        train.num_units() + val.num_units(),
        train.vocab.len()
    );

    let dialog = &corpus.file.dialogs[0];
    println!("\n{} ({})", dialog.image_id, dialog.caption);
    for (i, o) in corpus.objects[0].iter().enumerate() {
        println!(
            "  region {i}: {} {}, {}, {}",
            COLORS[o.color],
            SHAPES[o.shape],
            o.attribute(Asked::Material),
            o.attribute(Asked::Size)
        );
    }
    for r in &dialog.rounds {
        println!("  Q: {}", r.question);
        println!("  A: {}   (region {:?})", r.answer, r.gt_grounding.as_deref().unwrap_or(&[]));
        println!("     candidates: {}", r.answer_options.join(" | "));
    }
    Ok(())
}
