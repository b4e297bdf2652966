use crate::autodiff::SIMPLEX_TOL;
use crate::error::{Error, Result};

/// Candidate indices by descending score; equal scores keep index order.
pub fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of `gt_index` under descending score. A tied candidate only
/// ranks ahead of the ground truth if its index is lower.
pub fn rank_of_gt(scores: &[f64], gt_index: usize) -> Result<usize> {
    let s = *scores.get(gt_index).ok_or(Error::Index {
        what: "gt_index",
        index: gt_index,
        len: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|(i, v)| **v > s || (**v == s && *i < gt_index))
        .count();
    Ok(ahead + 1)
}

pub fn mrr(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / ranks.len() as f64
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("mean rank of no ranks".into()));
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains.enumerate().map(|(i, g)| g / (i as f64 + 2.0).log2()).sum()
}

/// NDCG over all candidates, gain = relevance, discount `1/log2(pos + 1)`.
pub fn ndcg(scores: &[f64], relevance: &[f64]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::dim("ndcg", &[scores.len()], &[relevance.len()]));
    }
    if relevance.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Contract("relevance must lie in [0, 1]".into()));
    }
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(ideal.into_iter());
    if best <= 0.0 {
        return Err(Error::Contract("ndcg needs at least one relevant candidate".into()));
    }
    let got = dcg(ranking_order(scores).into_iter().map(|i| relevance[i]));
    Ok(got / best)
}

/// The `k` largest entries of `p`, ties to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut order = ranking_order(p);
    order.truncate(k);
    order
}

/// Shannon entropy in nats, `0·ln 0 = 0`.
pub fn distribution_entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidDistribution(format!("entropy of non-distribution (sum {sum})")));
    }
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}
