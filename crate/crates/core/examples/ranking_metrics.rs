//! Retrieval metrics on hand-made candidate scores, including the
//! lower-index-wins tie rule.
//!
//! ```text
//! cargo run --example ranking_metrics
//! ```

use visground::evaluation::{mean_rank, mrr, ndcg, rank_of_gt, ranking_order, recall_at_k};

fn main() -> visground::Result<()> {
    let rounds: [(&[f64], usize, &[f64]); 3] = [
        (&[0.1, 0.9, 0.5, 0.3], 1, &[0.0, 1.0, 0.5, 0.0]),
        (&[0.1, 0.9, 0.5, 0.3], 2, &[0.0, 0.5, 1.0, 0.5]),
        (&[0.4, 0.4, 0.4, 0.4], 3, &[0.5, 0.0, 0.0, 1.0]),
    ];

    let mut ranks = Vec::new();
    for (scores, gt, relevance) in rounds {
        let rank = rank_of_gt(scores, gt)?;
        println!(
            "scores {scores:?}  order {:?}  gt {gt} -> rank {rank}, ndcg {:.4}",
            ranking_order(scores),
            ndcg(scores, relevance)?
        );
        ranks.push(rank);
    }
    println!("\nranks {ranks:?}");
    println!("MRR       {:.4}", mrr(&ranks));
    for k in [1, 5, 10] {
        println!("R@{k:<2}      {:.4}", recall_at_k(&ranks, k));
    }
    println!("mean rank {:.4}", mean_rank(&ranks)?);
    Ok(())
}
