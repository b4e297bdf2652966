//! Ranking metrics, grounding accuracy and the inference-time evaluation
//! pass, including distribution ablations.

mod metrics;
mod records;
mod runner;

pub use metrics::{
    distribution_entropy, mean_rank, mrr, ndcg, rank_of_gt, ranking_order, recall_at_k, top_k,
};
pub use records::{read_jsonl, write_jsonl, AttentionRecord, Prediction};
pub use runner::{
    ablate_distribution, evaluate, grounding_accuracy, DistributionMode, EvalOptions, EvalReport,
    Evaluation,
};
