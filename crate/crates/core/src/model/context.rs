use super::encoders::{encode_history, encode_tokens, fuse_context, project_regions, Which};
use super::{pad_tokens, Model};
use crate::autodiff::{Tape, Var};
use crate::data::DialogExample;
use crate::error::{Error, Result};

/// Everything the grounding module needs for one dialog round.
#[derive(Clone, Debug)]
pub struct Context {
    /// Projected regions `I`, `[μ, d_q]`.
    pub regions: Var,
    /// Context representation `[λ, d_q]`.
    pub x: Var,
    pub mask_x: Vec<bool>,
    /// Per-head question-to-history attention.
    pub history_attention: Vec<Var>,
}

/// Encodes question, history and regions of round `round` of `example`.
pub fn encode_context(tape: &mut Tape, model: &Model, example: &DialogExample, round: usize) -> Result<Context> {
    let r = example.rounds.get(round).ok_or(Error::Index {
        what: "round",
        index: round,
        len: example.rounds.len(),
    })?;
    let (ids, mask_x) = pad_tokens(&r.question_tokens, model.cfg.seq_len);
    let q = encode_tokens(tape, model, &ids, &mask_x, Which::Question)?;
    let h = encode_history(tape, model, &example.history(round))?;
    let fusion = fuse_context(tape, model, q, h, &mask_x)?;
    let raw = tape.constant(example.region_features.clone());
    let regions = project_regions(tape, model, raw)?;
    Ok(Context {
        regions,
        x: fusion.x,
        mask_x,
        history_attention: fusion.attention,
    })
}

/// Padded answer encoding `y` and its mask. Real rows are layer-normalized
/// so `y` lives on the same scale as the fused context `x`; PAD rows stay zero.
pub fn encode_answer(tape: &mut Tape, model: &Model, answer: &[usize]) -> Result<(Var, Vec<bool>)> {
    let (ids, mask) = pad_tokens(answer, model.cfg.seq_len);
    let y = encode_tokens(tape, model, &ids, &mask, Which::Answer)?;
    let y = tape.layer_norm(y)?;
    Ok((y, mask))
}
