use super::{LossMode, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::data::DialogExample;
use crate::error::{Error, Result};
use crate::model::{
    bridge_loss, discriminative_loss_and_rank, encode_answer, encode_context, fuse_for_decoder,
    generative_loss, mask_union, posterior_ground, prior_ground, Grounding, Model,
};

/// `L_G + kl·L_KL`, `L_D + kl·L_KL` or `L_G + L_D + kl·L_KL` by mode.
pub fn compose_loss(
    tape: &mut Tape,
    l_g: Option<Var>,
    l_d: Option<Var>,
    l_kl: Var,
    cfg: &TrainConfig,
) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::Contract(format!("{:?} loss needs {what}", cfg.loss_mode)))
    };
    let task = match cfg.loss_mode {
        LossMode::Generative => need(l_g, "L_G")?,
        LossMode::Discriminative => need(l_d, "L_D")?,
        LossMode::Multitask => {
            let (g, d) = (need(l_g, "L_G")?, need(l_d, "L_D")?);
            tape.add(g, d)?
        }
    };
    if cfg.kl_weight == 0.0 {
        return Ok(task);
    }
    let kl = tape.scale(l_kl, cfg.kl_weight);
    tape.add(task, kl)
}

/// Loss terms for one dialog round under training conditions.
#[derive(Clone, Debug)]
pub struct UnitLoss {
    pub total: Var,
    pub l_g: Option<Var>,
    pub l_d: Option<Var>,
    pub l_kl: Var,
    pub prior: Grounding,
    pub posterior: Grounding,
}

/// Full training forward pass for round `round` of `example`: context,
/// both grounding branches, the decoders and the composed objective.
pub fn unit_loss(
    tape: &mut Tape,
    model: &Model,
    example: &DialogExample,
    round: usize,
    cfg: &TrainConfig,
) -> Result<UnitLoss> {
    let ctx = encode_context(tape, model, example, round)?;
    let r = &example.rounds[round];
    let prior = prior_ground(tape, model, ctx.regions, ctx.x, &ctx.mask_x)?;
    let (y, mask_y) = encode_answer(tape, model, &r.answer_tokens)?;
    let mask_xy = mask_union(&ctx.mask_x, &mask_y);
    let posterior = posterior_ground(tape, model, ctx.regions, ctx.x, y, &mask_xy, &prior)?;
    let l_kl = bridge_loss(tape, &prior, &posterior, cfg.bridge_variant, cfg.detach_posterior)?;

    let v_star = if cfg.decoder_reads_posterior() { posterior.v } else { prior.v };
    let fused = fuse_for_decoder(tape, model, ctx.x, &ctx.mask_x, v_star)?;
    let l_g = if cfg.loss_mode.uses_generative() {
        Some(generative_loss(tape, model, fused, &r.answer_tokens)?)
    } else {
        None
    };
    let l_d = if cfg.loss_mode.uses_discriminative() {
        Some(discriminative_loss_and_rank(tape, model, fused, &r.candidates, r.gt_index)?.0)
    } else {
        None
    };
    let total = compose_loss(tape, l_g, l_d, l_kl, cfg)?;
    Ok(UnitLoss {
        total,
        l_g,
        l_d,
        l_kl,
        prior,
        posterior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalars(t: &mut Tape, vals: &[f64]) -> Vec<Var> {
        vals.iter().map(|v| t.constant(Tensor::scalar(*v))).collect()
    }

    fn cfg(loss_mode: LossMode, kl_weight: f64) -> TrainConfig {
        TrainConfig {
            loss_mode,
            kl_weight,
            ..Default::default()
        }
    }

    #[test]
    fn additive_composition() {
        let mut t = Tape::new();
        let v = scalars(&mut t, &[2.0, 0.5, 1.0, 2.0, 0.25]);
        let gen = compose_loss(&mut t, Some(v[0]), None, v[1], &cfg(LossMode::Generative, 1.0)).unwrap();
        assert_eq!(t.value(gen).item(), 2.5);
        let base = compose_loss(&mut t, Some(v[0]), None, v[1], &cfg(LossMode::Generative, 0.0)).unwrap();
        assert_eq!(t.value(base).item(), 2.0);
        let disc = compose_loss(&mut t, None, Some(v[3]), v[1], &cfg(LossMode::Discriminative, 1.0)).unwrap();
        assert_eq!(t.value(disc).item(), 2.5);
        let multi = compose_loss(&mut t, Some(v[2]), Some(v[3]), v[4], &cfg(LossMode::Multitask, 1.0)).unwrap();
        assert_eq!(t.value(multi).item(), 3.25);
    }

    #[test]
    fn missing_component_is_a_contract_error() {
        let mut t = Tape::new();
        let v = scalars(&mut t, &[1.0, 1.0]);
        for (g, d, mode) in [
            (None, Some(v[0]), LossMode::Generative),
            (Some(v[0]), None, LossMode::Discriminative),
            (Some(v[0]), None, LossMode::Multitask),
        ] {
            assert!(matches!(
                compose_loss(&mut t, g, d, v[1], &cfg(mode, 1.0)),
                Err(Error::Contract(_))
            ));
        }
    }
}
