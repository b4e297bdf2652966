use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoders::{embed, Linear};
use super::lstm::{BiLstm, Lstm};
use super::{Model, ModelConfig};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};

/// How per-token log-likelihoods combine into a generative candidate score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    Mean,
    Sum,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub fusion: Linear,
    pub generator: Lstm,
    pub output: Linear,
    pub candidate: BiLstm,
    pub candidate_proj: Linear,
    pub bilinear: ParamId,
}

impl DecoderParams {
    pub(crate) fn new<R: Rng>(cfg: &ModelConfig, s: &mut ParamStore, rng: &mut R) -> Self {
        let (de, dq, h) = (cfg.embed_dim, cfg.model_dim, cfg.rnn_hidden);
        DecoderParams {
            fusion: Linear::new(s, "dec.fusion", 2 * dq, dq, rng),
            generator: Lstm::new(s, "dec.generator", de, dq, rng),
            output: Linear::new(s, "dec.output", dq, cfg.vocab_size, rng),
            candidate: BiLstm::new(s, "dec.candidate", de, h, rng),
            candidate_proj: Linear::new(s, "dec.candidate_proj", 2 * h, dq, rng),
            bilinear: s.add_init("dec.bilinear", &[dq, dq], rng),
        }
    }
}

/// `tanh(W·[mean(x); LN(v_star)] + b)`, shape `[1, d_q]`. The mean runs
/// over unmasked rows only; `LN` is a parameter-free layer norm, so the
/// decoder sees the direction of the pooled visual vector, not its length.
pub fn fuse_for_decoder(tape: &mut Tape, model: &Model, x: Var, mask_x: &[bool], v_star: Var) -> Result<Var> {
    let lambda = tape.value(x).rows();
    if mask_x.len() != lambda || tape.shape(v_star) != [1, model.cfg.model_dim] {
        return Err(Error::dim("fuse_for_decoder", tape.shape(x), tape.shape(v_star)));
    }
    let n = mask_x.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::DegenerateSlice("fuse_for_decoder: every token is masked"));
    }
    let w: Vec<f64> = mask_x.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
    let w = tape.constant(Tensor::matrix(1, lambda, w)?);
    let pooled = tape.matmul(w, x)?;
    let v_star = tape.layer_norm(v_star)?;
    let cat = tape.concat_cols(&[pooled, v_star])?;
    let out = model.dec.fusion.apply(tape, cat)?;
    Ok(tape.tanh(out))
}

/// Teacher-forced logits `[n+1, V]` for `answer` followed by EOS.
fn teacher_forced(tape: &mut Tape, model: &Model, fused: Var, answer: &[usize]) -> Result<(Var, Vec<usize>)> {
    if answer.is_empty() {
        return Err(Error::Contract("cannot decode an empty answer".into()));
    }
    let words = &answer[..answer.len().min(model.cfg.seq_len.saturating_sub(1).max(1))];
    let inputs: Vec<usize> = std::iter::once(BOS).chain(words.iter().copied()).collect();
    let targets: Vec<usize> = words.iter().copied().chain(std::iter::once(EOS)).collect();
    let emb = embed(tape, model, &inputs)?;
    let states = model.dec.generator.run(tape, emb, Some(fused), false)?;
    let hs = tape.concat_rows(&states)?;
    let logits = model.dec.output.apply(tape, hs)?;
    Ok((logits, targets))
}

/// Mean negative log-likelihood of the answer tokens and the closing EOS.
pub fn generative_loss(tape: &mut Tape, model: &Model, fused: Var, answer: &[usize]) -> Result<Var> {
    let (logits, targets) = teacher_forced(tape, model, fused, answer)?;
    tape.cross_entropy_rows(logits, &targets)
}

/// Candidate log-likelihood scores as a `[N]` variable (higher is better).
pub fn generative_scores(tape: &mut Tape, model: &Model, fused: Var, candidates: &[Vec<usize>]) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidates to score".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (logits, targets) = teacher_forced(tape, model, fused, c)?;
        let nll = tape.cross_entropy_rows(logits, &targets)?;
        let factor = match model.cfg.score_norm {
            ScoreNorm::Mean => -1.0,
            ScoreNorm::Sum => -(targets.len() as f64),
        };
        let s = tape.scale(nll, factor);
        scores.push(tape.reshape(s, &[1, 1])?);
    }
    let row = tape.concat_cols(&scores)?;
    tape.reshape(row, &[candidates.len()])
}

/// Plain score values of [`generative_scores`].
pub fn generative_rank(tape: &mut Tape, model: &Model, fused: Var, candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
    let s = generative_scores(tape, model, fused, candidates)?;
    Ok(tape.value(s).data().to_vec())
}

fn encode_candidates(tape: &mut Tape, model: &Model, candidates: &[Vec<usize>]) -> Result<Var> {
    let max_len = model.cfg.seq_len;
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.is_empty() {
            rows.push(tape.constant(Tensor::zeros([1, model.cfg.model_dim])));
            continue;
        }
        let emb = embed(tape, model, &c[..c.len().min(max_len)])?;
        let fin = model.dec.candidate.final_states(tape, emb)?;
        rows.push(model.dec.candidate_proj.apply(tape, fin)?);
    }
    tape.concat_rows(&rows)
}

/// Bilinear scores `fusedᵀ·B·c_i` (`[N]`) and their cross-entropy against
/// `gt_index`.
pub fn discriminative_loss_and_rank(
    tape: &mut Tape,
    model: &Model,
    fused: Var,
    candidates: &[Vec<usize>],
    gt_index: usize,
) -> Result<(Var, Var)> {
    let n = candidates.len();
    if gt_index >= n {
        return Err(Error::Index {
            what: "gt_index",
            index: gt_index,
            len: n,
        });
    }
    let cands = encode_candidates(tape, model, candidates)?;
    let b = tape.param(model.dec.bilinear);
    let fb = tape.matmul(fused, b)?;
    let ct = tape.transpose(cands)?;
    let logits = tape.matmul(fb, ct)?;
    let loss = tape.cross_entropy_rows(logits, &[gt_index])?;
    let scores = tape.reshape(logits, &[n])?;
    Ok((loss, scores))
}
