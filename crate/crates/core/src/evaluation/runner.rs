use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{distribution_entropy, mean_rank, mrr, ndcg, rank_of_gt, recall_at_k, top_k};
use super::records::{AttentionRecord, Prediction};
use crate::autodiff::{Tape, Tensor};
use crate::data::{units, DialogDataset};
use crate::error::{Error, Result};
use crate::model::{
    discriminative_loss_and_rank, encode_answer, encode_context, fuse_for_decoder, generative_rank,
    mask_union, posterior_ground, prior_ground, with_distribution, Context, Grounding, Model,
};
use crate::training::LossMode;

/// Summary metrics of one evaluation pass. Fractions lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_top3: Option<f64>,
    /// Top-1 grounding of the posterior (answer known).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_top1_posterior: Option<f64>,
    pub entropy_prior: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_posterior: Option<f64>,
    pub n_units: usize,
}

impl EvalReport {
    /// Aggregates prediction and attention records. `attention` may be
    /// empty, in which case grounding and entropy fields stay unset or zero.
    pub fn from_records(predictions: &[Prediction], attention: &[AttentionRecord]) -> Result<Self> {
        let ranks = predictions
            .iter()
            .map(|p| rank_of_gt(&p.scores, p.gt_index))
            .collect::<Result<Vec<_>>>()?;
        let ndcg = if !predictions.is_empty() && predictions.iter().all(|p| p.relevance.is_some()) {
            let vals = predictions
                .iter()
                .map(|p| ndcg(&p.scores, p.relevance.as_deref().expect("checked")))
                .collect::<Result<Vec<_>>>()?;
            Some(mean(&vals))
        } else {
            None
        };
        let annotated = !attention.is_empty() && attention.iter().all(|a| a.gt_grounding.is_some());
        let (g1, g3, g1_post) = if annotated {
            let post = if attention.iter().all(|a| a.posterior.is_some()) {
                Some(hit_rate(attention, 1, |a| a.posterior.as_deref().expect("checked"))?)
            } else {
                None
            };
            (
                Some(grounding_accuracy(attention, 1)?),
                Some(grounding_accuracy(attention, 3)?),
                post,
            )
        } else {
            (None, None, None)
        };
        let entropy_prior = mean(
            &attention
                .iter()
                .map(|a| distribution_entropy(&a.prior))
                .collect::<Result<Vec<_>>>()?,
        );
        let entropy_posterior = if !attention.is_empty() && attention.iter().all(|a| a.posterior.is_some()) {
            let e = attention
                .iter()
                .map(|a| distribution_entropy(a.posterior.as_deref().expect("checked")))
                .collect::<Result<Vec<_>>>()?;
            Some(mean(&e))
        } else {
            None
        };
        Ok(EvalReport {
            mrr: mrr(&ranks),
            r_at_1: recall_at_k(&ranks, 1),
            r_at_5: recall_at_k(&ranks, 5),
            r_at_10: recall_at_k(&ranks, 10),
            mean_rank: mean_rank(&ranks)?,
            ndcg,
            grounding_top1: g1,
            grounding_top3: g3,
            grounding_top1_posterior: g1_post,
            entropy_prior,
            entropy_posterior,
            n_units: predictions.len(),
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn hit_rate<'a>(records: &'a [AttentionRecord], k: usize, dist: impl Fn(&'a AttentionRecord) -> &'a [f64]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("grounding accuracy of no records".into()));
    }
    let mut hits = 0usize;
    for r in records {
        let gt = r.gt_grounding.as_ref().ok_or_else(|| {
            Error::Contract(format!("record {} round {} has no gt_grounding", r.image_id, r.round))
        })?;
        if top_k(dist(r), k).iter().any(|i| gt.contains(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of records whose `top_k` prior regions include a ground-truth
/// region.
pub fn grounding_accuracy(records: &[AttentionRecord], top_k: usize) -> Result<f64> {
    hit_rate(records, top_k, |r| &r.prior)
}

/// Distribution fed to the decoder at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    /// The model's own prior.
    Learned,
    /// Uniform over regions.
    Mean,
    /// The prior of another unit in the same batch.
    Random,
    /// Uniform over the annotated regions.
    Oracle,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Selects the scorer: generative likelihood for `Generative`,
    /// discriminative scores otherwise.
    pub loss_mode: LossMode,
    pub distribution: DistributionMode,
    /// Also run the posterior branch (diagnostics only; never affects
    /// scores).
    pub with_posterior: bool,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            loss_mode: LossMode::Generative,
            distribution: DistributionMode::Learned,
            with_posterior: false,
            seed: 0,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    pub attention: Vec<AttentionRecord>,
}

struct Pending {
    tape: Tape,
    ctx: Context,
    prior: Grounding,
    g: Vec<f64>,
}

/// Runs inference over every unit of `ds` with the prior-side visual
/// vector (or its replacement under `opts.distribution`).
pub fn evaluate(model: &Model, ds: &DialogDataset, opts: &EvalOptions) -> Result<Evaluation> {
    if opts.distribution == DistributionMode::Oracle && !ds.has_grounding() {
        return Err(Error::Contract("oracle distribution needs gt_grounding annotations".into()));
    }
    let all = units(ds);
    let mut predictions = Vec::with_capacity(all.len());
    let mut attention = Vec::with_capacity(all.len());
    for (b, batch) in all.chunks(opts.batch_size.max(1)).enumerate() {
        let mut pending = Vec::with_capacity(batch.len());
        for u in batch {
            let ex = &ds.examples[u.example];
            let mut tape = model.tape();
            let ctx = encode_context(&mut tape, model, ex, u.round)?;
            let prior = prior_ground(&mut tape, model, ctx.regions, ctx.x, &ctx.mask_x)?;
            let g = tape.value(prior.g).data().to_vec();
            pending.push(Pending { tape, ctx, prior, g });
        }
        let replaced = replacement_distributions(ds, batch, &pending, opts.distribution, opts.seed ^ b as u64)?;
        for ((u, mut p), g_used) in batch.iter().zip(pending).zip(replaced) {
            let ex = &ds.examples[u.example];
            let round = &ex.rounds[u.round];
            let tape = &mut p.tape;
            let grounding = match &g_used {
                Some(g) => with_distribution(tape, model, &p.prior, p.ctx.regions, Tensor::vector(g.clone())?)?,
                None => p.prior,
            };
            let fused = fuse_for_decoder(tape, model, p.ctx.x, &p.ctx.mask_x, grounding.v)?;
            let scores = if opts.loss_mode == LossMode::Generative {
                generative_rank(tape, model, fused, &round.candidates)?
            } else {
                let (_, s) = discriminative_loss_and_rank(tape, model, fused, &round.candidates, round.gt_index)?;
                tape.value(s).data().to_vec()
            };
            let posterior = if opts.with_posterior {
                let (y, mask_y) = encode_answer(tape, model, &round.answer_tokens)?;
                let mask_xy = mask_union(&p.ctx.mask_x, &mask_y);
                let post = posterior_ground(tape, model, p.ctx.regions, p.ctx.x, y, &mask_xy, &p.prior)?;
                Some(tape.value(post.g).data().to_vec())
            } else {
                None
            };
            let prior = g_used.unwrap_or(p.g);
            predictions.push(Prediction {
                image_id: ex.image_id.clone(),
                round: u.round,
                scores,
                gt_index: round.gt_index,
                relevance: round.relevance.clone(),
            });
            attention.push(AttentionRecord {
                image_id: ex.image_id.clone(),
                round: u.round,
                top3_prior: top_k(&prior, 3),
                prior,
                posterior,
                gt_grounding: round.gt_grounding.clone(),
            });
        }
    }
    let report = EvalReport::from_records(&predictions, &attention)?;
    Ok(Evaluation {
        report,
        predictions,
        attention,
    })
}

fn replacement_distributions(
    ds: &DialogDataset,
    batch: &[crate::data::Unit],
    pending: &[Pending],
    mode: DistributionMode,
    seed: u64,
) -> Result<Vec<Option<Vec<f64>>>> {
    let n = batch.len();
    match mode {
        DistributionMode::Learned => Ok(vec![None; n]),
        DistributionMode::Mean => Ok(pending
            .iter()
            .map(|p| Some(vec![1.0 / p.g.len() as f64; p.g.len()]))
            .collect()),
        DistributionMode::Oracle => batch
            .iter()
            .zip(pending)
            .map(|(u, p)| {
                let gt = ds.examples[u.example].rounds[u.round]
                    .gt_grounding
                    .as_ref()
                    .ok_or_else(|| Error::Contract("oracle distribution needs gt_grounding".into()))?;
                let mut g = vec![0.0; p.g.len()];
                for &i in gt {
                    g[i] = 1.0 / gt.len() as f64;
                }
                Ok(Some(g))
            })
            .collect(),
        DistributionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut out = vec![None; n];
            for (j, &target) in order.iter().enumerate() {
                let source = order[(j + 1) % n];
                let mut g = pending[source].g.clone();
                if source == target || g.len() != pending[target].g.len() {
                    g = pending[target].g.clone();
                    g.shuffle(&mut rng);
                }
                out[target] = Some(g);
            }
            Ok(out)
        }
    }
}

/// Evaluation with the prior replaced according to `mode`.
pub fn ablate_distribution(
    model: &Model,
    ds: &DialogDataset,
    loss_mode: LossMode,
    mode: DistributionMode,
    seed: u64,
) -> Result<EvalReport> {
    let opts = EvalOptions {
        loss_mode,
        distribution: mode,
        seed,
        ..EvalOptions::default()
    };
    Ok(evaluate(model, ds, &opts)?.report)
}
