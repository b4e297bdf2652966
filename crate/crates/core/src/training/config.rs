use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BridgeVariant;

/// Which decoder losses make up the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[serde(alias = "gen")]
    Generative,
    #[serde(alias = "disc")]
    Discriminative,
    Multitask,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Generative, LossMode::Discriminative, LossMode::Multitask];

    pub fn uses_generative(self) -> bool {
        matches!(self, LossMode::Generative | LossMode::Multitask)
    }

    pub fn uses_discriminative(self) -> bool {
        matches!(self, LossMode::Discriminative | LossMode::Multitask)
    }
}

/// Visual vector handed to the decoders while training. Inference always
/// uses the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeaturePolicy {
    /// Posterior during training, prior at inference. Without a bridge
    /// (`kl_weight == 0`) nothing would ever train the prior, so the
    /// decoder reads the prior as under `AlwaysPrior`.
    PostTrain,
    AlwaysPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub kl_weight: f64,
    pub bridge_variant: BridgeVariant,
    pub detach_posterior: bool,
    pub decoder_features: FeaturePolicy,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: LossMode::Generative,
            kl_weight: 1.0,
            bridge_variant: BridgeVariant::AttnKl,
            detach_posterior: true,
            decoder_features: FeaturePolicy::PostTrain,
            base_lr: 1e-3,
            warmup_epochs: 1,
            decay_every: 2,
            decay_factor: 0.75,
            max_epochs: 20,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Whether the decoder is trained on the posterior's visual vector.
    pub fn decoder_reads_posterior(&self) -> bool {
        self.decoder_features == FeaturePolicy::PostTrain && self.kl_weight > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(m.to_string()));
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be a finite value >= 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return bad("max_epochs, batch_size and decay_every must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam needs 0 <= beta < 1 and eps > 0");
        }
        Ok(())
    }
}
