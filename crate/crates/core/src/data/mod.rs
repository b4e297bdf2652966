//! Dialog data: schema, tokenizer, region features, synthetic task, batching.

mod batch;
mod dataset;
mod features;
mod synthetic;
mod vocab;

pub use batch::{batch_iterator, epoch_seed, units, Unit};
pub use dataset::{
    features_path, load_dataset, load_dataset_with_vocab, read_dataset_file, DatasetFile,
    DialogDataset, DialogExample, DialogRecord, Round, RoundRecord, Split,
};
pub use features::{load_features, read_features, save_features, write_features, FeatureMap};
pub use synthetic::{
    generate_synthetic, Asked, DATASET_FILE, Object, SyntheticConfig, SyntheticCorpus, COLORS, MATERIALS,
    SAME_CATEGORY_RELEVANCE, SHAPES, SIZES,
};
pub use vocab::{pad_ids, tokenize, tokenize_and_pad, Vocabulary, BOS, EOS, PAD, UNK};
