//! Encoders, the prior/posterior grounding module, and answer decoders.
//!
//! All forward functions record onto a caller-owned [`Tape`] bound to the
//! model's [`ParamStore`] (see [`Model::tape`]).

mod context;
mod decoders;
mod encoders;
mod grounding;
mod lstm;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use context::{encode_answer, encode_context, Context};
pub use decoders::{
    discriminative_loss_and_rank, fuse_for_decoder, generative_loss, generative_rank,
    generative_scores, DecoderParams, ScoreNorm,
};
pub use encoders::{
    encode_history, encode_tokens, fuse_context, project_regions, EncoderParams, Fusion, Which,
};
pub use grounding::{
    bridge_loss, cross_attend, pool_regions, posterior_ground, prior_ground, with_distribution, AxisMode,
    BridgeVariant, Grounding, GroundingParams, PooledValue,
};
pub use lstm::{BiLstm, Lstm};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Raw region feature width d_v.
    pub feature_dim: usize,
    /// Token embedding width d_e.
    pub embed_dim: usize,
    /// Shared model width d_q.
    pub model_dim: usize,
    pub heads: usize,
    /// Padded question/answer length.
    pub seq_len: usize,
    /// Hidden width of each direction of the bi-directional encoders.
    pub rnn_hidden: usize,
    /// Hidden width d_h of the region-scoring perceptron.
    pub pool_hidden: usize,
    /// Residual connection plus layer norm around the context fusion attention.
    pub fusion_residual: bool,
    pub axis_mode: AxisMode,
    /// Re-run cross-attention on `x + y` for the posterior instead of
    /// reusing the prior's attended regions.
    pub recompute_posterior_attention: bool,
    pub pooled_value: PooledValue,
    pub score_norm: ScoreNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            feature_dim: 40,
            embed_dim: 64,
            model_dim: 64,
            heads: 4,
            seq_len: 20,
            rnn_hidden: 32,
            pool_hidden: 64,
            fusion_residual: true,
            axis_mode: AxisMode::Columns,
            recompute_posterior_attention: true,
            pooled_value: PooledValue::Regions,
            score_norm: ScoreNorm::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("rnn_hidden", self.rnn_hidden),
            ("pool_hidden", self.pool_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("model `{name}` must be >= 1")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Parameters plus the handles every forward function needs.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub enc: EncoderParams,
    pub ground: GroundingParams,
    pub dec: DecoderParams,
    posterior_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            enc: self.enc.clone(),
            ground: self.ground.clone(),
            dec: self.dec.clone(),
            posterior_calls: AtomicUsize::new(self.posterior_calls()),
        }
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = EncoderParams::new(&cfg, &mut params, &mut rng);
        let ground = GroundingParams::new(&cfg, &mut params, &mut rng);
        let dec = DecoderParams::new(&cfg, &mut params, &mut rng);
        Ok(Model {
            cfg,
            params,
            enc,
            ground,
            dec,
            posterior_calls: AtomicUsize::new(0),
        })
    }

    /// A fresh tape with every parameter bound as a leaf.
    pub fn tape(&self) -> Tape {
        Tape::with_params(&self.params)
    }

    /// Number of posterior-branch evaluations since construction.
    pub fn posterior_calls(&self) -> usize {
        self.posterior_calls.load(Ordering::Relaxed)
    }

    pub(crate) fn note_posterior_call(&self) {
        self.posterior_calls.fetch_add(1, Ordering::Relaxed);
    }
}

/// Tokens padded to `seq_len`, with their prefix mask.
pub fn pad_tokens(tokens: &[usize], seq_len: usize) -> (Vec<usize>, Vec<bool>) {
    crate::data::pad_ids(tokens, seq_len)
}

pub(crate) fn prefix_len(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|m| **m).count();
    if mask[n..].iter().any(|m| *m) {
        return Err(Error::Contract("token masks must be prefixes".into()));
    }
    Ok(n)
}

/// Elementwise OR of two token masks.
pub fn mask_union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            feature_dim: 6,
            embed_dim: 5,
            model_dim: 8,
            heads: 2,
            seq_len: 5,
            rnn_hidden: 3,
            pool_hidden: 4,
            ..ModelConfig::default()
        }
    }

    pub fn tiny_model(seed: u64) -> Model {
        Model::new(tiny_config(12), seed).unwrap()
    }
}
