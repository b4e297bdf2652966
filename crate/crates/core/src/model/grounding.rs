use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoders::Linear;
use super::{prefix_len, Model, ModelConfig};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Scoring perceptron that turns attended regions into a distribution.
#[derive(Clone, Debug)]
pub struct GroundingParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GroundingParams {
    pub(crate) fn new<R: Rng>(cfg: &ModelConfig, s: &mut ParamStore, rng: &mut R) -> Self {
        GroundingParams {
            fc1: Linear::new(s, "ground.fc1", cfg.model_dim, cfg.pool_hidden, rng),
            fc2: Linear::new(s, "ground.fc2", cfg.pool_hidden, 1, rng),
        }
    }
}

/// Normalization axis of the region/token affinity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisMode {
    /// Each token column is a distribution over regions.
    Columns,
    /// Each region row is a distribution over tokens.
    Rows,
}

/// What the grounding weights pool into the visual vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PooledValue {
    /// The attended regions `I_x`.
    Attended,
    /// The projected region features `I`.
    Regions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeVariant {
    AttnKl,
    AttnMse,
    ImageKl,
    ImageMse,
    AttnKlImageMse,
}

impl BridgeVariant {
    pub const ALL: [BridgeVariant; 5] = [
        BridgeVariant::AttnKl,
        BridgeVariant::AttnMse,
        BridgeVariant::ImageKl,
        BridgeVariant::ImageMse,
        BridgeVariant::AttnKlImageMse,
    ];
}

/// One branch (prior or posterior) of the grounding module.
#[derive(Clone, Copy, Debug)]
pub struct Grounding {
    /// Distribution over the μ regions, shape `[μ]`.
    pub g: Var,
    /// Pooled visual vector, shape `[1, d_q]`.
    pub v: Var,
    /// Attended regions `[μ, d_q]`.
    pub attended: Var,
    /// Region/token affinity after normalization, `[μ, λ_real]`.
    pub attention: Var,
}

/// `P = softmax(I·xᵀ)` over the axis chosen by `mode`, and `I_x = P·x`.
/// Only the unmasked prefix of `x` takes part, so `P` has one column per
/// real token.
pub fn cross_attend(tape: &mut Tape, regions: Var, x: Var, mask_x: &[bool], mode: AxisMode) -> Result<(Var, Var)> {
    let (rs, xs) = (tape.shape(regions).to_vec(), tape.shape(x).to_vec());
    if rs.len() != 2 || xs.len() != 2 || rs[1] != xs[1] || mask_x.len() != xs[0] {
        return Err(Error::dim("cross_attend", &rs, &xs));
    }
    let n = prefix_len(mask_x)?;
    if n == 0 {
        return Err(Error::DegenerateSlice("cross_attend: every token is masked"));
    }
    let xr = if n == xs[0] { x } else { tape.slice_rows(x, 0, n)? };
    let xt = tape.transpose(xr)?;
    let logits = tape.matmul(regions, xt)?;
    let axis = match mode {
        AxisMode::Columns => 0,
        AxisMode::Rows => 1,
    };
    let p = tape.softmax(logits, axis)?;
    let attended = tape.matmul(p, xr)?;
    Ok((p, attended))
}

fn region_weights(tape: &mut Tape, params: &GroundingParams, scored: Var) -> Result<Var> {
    let h = params.fc1.apply(tape, scored)?;
    let h = tape.relu(h);
    let s = params.fc2.apply(tape, h)?;
    let mu = tape.value(s).rows();
    let s = tape.reshape(s, &[mu])?;
    tape.softmax(s, 0)
}

fn pool(tape: &mut Tape, weights: Var, values: Var) -> Result<Var> {
    let mu = tape.value(weights).numel();
    let row = tape.reshape(weights, &[1, mu])?;
    tape.matmul(row, values)
}

/// Self-attention pooling: weights `[μ]` from the scoring perceptron and
/// the weighted sum `[1, d_q]` of the rows of `attended`.
pub fn pool_regions(tape: &mut Tape, params: &GroundingParams, attended: Var) -> Result<(Var, Var)> {
    let w = region_weights(tape, params, attended)?;
    let pooled = pool(tape, w, attended)?;
    Ok((w, pooled))
}

fn ground(tape: &mut Tape, model: &Model, regions: Var, attended: Var, attention: Var) -> Result<Grounding> {
    let g = region_weights(tape, &model.ground, attended)?;
    let values = match model.cfg.pooled_value {
        PooledValue::Attended => attended,
        PooledValue::Regions => regions,
    };
    let v = pool(tape, g, values)?;
    Ok(Grounding {
        g,
        v,
        attended,
        attention,
    })
}

/// Prior branch: depends only on the context `x` and the regions.
pub fn prior_ground(tape: &mut Tape, model: &Model, regions: Var, x: Var, mask_x: &[bool]) -> Result<Grounding> {
    let (p, attended) = cross_attend(tape, regions, x, mask_x, model.cfg.axis_mode)?;
    ground(tape, model, regions, attended, p)
}

/// Posterior branch on `x + y` with the prior's parameters. Unless the
/// model is configured to recompute, the prior's attended regions are
/// reused and only the pooling sees the answer.
pub fn posterior_ground(
    tape: &mut Tape,
    model: &Model,
    regions: Var,
    x: Var,
    y: Var,
    mask_xy: &[bool],
    prior: &Grounding,
) -> Result<Grounding> {
    model.note_posterior_call();
    let xy = tape.add(x, y)?;
    if model.cfg.recompute_posterior_attention {
        let (p, attended) = cross_attend(tape, regions, xy, mask_xy, model.cfg.axis_mode)?;
        ground(tape, model, regions, attended, p)
    } else {
        ground(tape, model, regions, prior.attended, prior.attention)
    }
}

/// `base` with its distribution replaced by the constant `g` and the visual
/// vector re-pooled accordingly.
pub fn with_distribution(tape: &mut Tape, model: &Model, base: &Grounding, regions: Var, g: Tensor) -> Result<Grounding> {
    let mu = tape.value(base.g).numel();
    if g.shape() != [mu] {
        return Err(Error::dim("with_distribution", g.shape(), &[mu]));
    }
    let g = tape.constant(g);
    let values = match model.cfg.pooled_value {
        PooledValue::Attended => base.attended,
        PooledValue::Regions => regions,
    };
    let v = pool(tape, g, values)?;
    Ok(Grounding { g, v, ..*base })
}

/// Loss pulling the prior towards the posterior. With `detach_posterior`
/// the posterior is a constant target.
pub fn bridge_loss(
    tape: &mut Tape,
    prior: &Grounding,
    posterior: &Grounding,
    variant: BridgeVariant,
    detach_posterior: bool,
) -> Result<Var> {
    let (big_g, v_post) = if detach_posterior {
        (tape.detach(posterior.g), tape.detach(posterior.v))
    } else {
        (posterior.g, posterior.v)
    };
    let (g, v_prior) = (prior.g, prior.v);
    match variant {
        BridgeVariant::AttnKl => tape.kl_divergence(big_g, g),
        BridgeVariant::AttnMse => tape.mse(big_g, g),
        BridgeVariant::ImageMse => tape.mse(v_post, v_prior),
        BridgeVariant::ImageKl => {
            let p = tape.softmax(v_post, 1)?;
            let q = tape.softmax(v_prior, 1)?;
            tape.kl_divergence(p, q)
        }
        BridgeVariant::AttnKlImageMse => {
            let a = tape.kl_divergence(big_g, g)?;
            let b = tape.mse(v_post, v_prior)?;
            tape.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{tiny_config, tiny_model};

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    fn mat(t: &mut Tape, r: usize, c: usize, f: impl Fn(usize) -> f64) -> Var {
        t.constant(Tensor::matrix(r, c, (0..r * c).map(f).collect()).unwrap())
    }

    #[test]
    fn single_token_rows_mode_copies_token() {
        let mut t = Tape::new();
        let i = mat(&mut t, 3, 2, |k| k as f64 * 0.3);
        let x = mat(&mut t, 1, 2, |k| [0.7, -1.1][k]);
        let (p, ix) = cross_attend(&mut t, i, x, &[true], AxisMode::Rows).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 1.0, 1.0]);
        for r in 0..3 {
            assert_eq!(t.value(ix).row(r), &[0.7, -1.1]);
        }
    }

    #[test]
    fn zero_regions_give_uniform_attention_on_real_tokens() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::zeros([4, 2]));
        let x = mat(&mut t, 3, 2, |k| k as f64);
        let (p, _) = cross_attend(&mut t, i, x, &[true, true, false], AxisMode::Columns).unwrap();
        assert_eq!(t.shape(p), &[4, 2]);
        assert!(t.value(p).data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
        let (p, _) = cross_attend(&mut t, i, x, &[true, true, false], AxisMode::Rows).unwrap();
        assert!(t.value(p).data().iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn cross_attention_hand_toy() {
        // I = [[1,0],[0,2]], x = [[1,1],[0,1]]; logits = [[1,0],[2,2]].
        let mut t = Tape::new();
        let i = mat(&mut t, 2, 2, |k| [1.0, 0.0, 0.0, 2.0][k]);
        let x = mat(&mut t, 2, 2, |k| [1.0, 1.0, 0.0, 1.0][k]);
        let (p, ix) = cross_attend(&mut t, i, x, &[true, true], AxisMode::Columns).unwrap();
        let e = std::f64::consts::E;
        let (c0a, c0b) = (e / (e + e * e), e * e / (e + e * e));
        let (c1a, c1b) = (1.0 / (1.0 + e * e), e * e / (1.0 + e * e));
        close(t.value(p).data(), &[c0a, c1a, c0b, c1b], 1e-12);
        close(t.value(ix).data(), &[c0a, c0a + c1a, c0b, c0b + c1b], 1e-12);

        let (p, _) = cross_attend(&mut t, i, x, &[true, true], AxisMode::Rows).unwrap();
        let r0 = e / (e + 1.0);
        close(t.value(p).data(), &[r0, 1.0 - r0, 0.5, 0.5], 1e-12);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::zeros([2, 2]));
        let x = t.constant(Tensor::zeros([2, 2]));
        assert!(matches!(
            cross_attend(&mut t, i, x, &[false, false], AxisMode::Columns),
            Err(Error::DegenerateSlice(_))
        ));
    }

    fn toy_params() -> (ParamStore, GroundingParams) {
        let mut s = ParamStore::new();
        let p = GroundingParams {
            fc1: Linear {
                w: s.add("w1", Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap()),
                b: s.add("b1", Tensor::vector(vec![0.0, -1.0]).unwrap()),
            },
            fc2: Linear {
                w: s.add("w2", Tensor::matrix(2, 1, vec![1.0, 0.5]).unwrap()),
                b: s.add("b2", Tensor::vector(vec![0.3]).unwrap()),
            },
        };
        (s, p)
    }

    #[test]
    fn pooling_hand_toy() {
        let (s, p) = toy_params();
        let mut t = Tape::with_params(&s);
        let rows = [[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]];
        let ix = mat(&mut t, 3, 2, |k| rows[k / 2][k % 2]);
        let (w, pooled) = pool_regions(&mut t, &p, ix).unwrap();
        // hidden = relu(r·W1 + b1); score = hidden·W2 + b2
        let score = |r: [f64; 2]| {
            let h0 = (r[0] * 1.0 + r[1] * 0.5).max(0.0);
            let h1 = (r[0] * -1.0 + r[1] * 2.0 - 1.0).max(0.0);
            h0 + 0.5 * h1 + 0.3
        };
        let s: Vec<f64> = rows.iter().map(|r| score(*r).exp()).collect();
        let z: f64 = s.iter().sum();
        let want: Vec<f64> = s.iter().map(|v| v / z).collect();
        close(t.value(w).data(), &want, 1e-12);
        let pooled_want = [
            want[0] + 2.0 * want[2],
            want[1] - want[2],
        ];
        close(t.value(pooled).data(), &pooled_want, 1e-12);
    }

    #[test]
    fn identical_rows_pool_uniformly() {
        let (s, p) = toy_params();
        let mut t = Tape::with_params(&s);
        let ix = mat(&mut t, 4, 2, |k| [0.3, -0.8][k % 2]);
        let (w, pooled) = pool_regions(&mut t, &p, ix).unwrap();
        close(t.value(w).data(), &[0.25; 4], 1e-15);
        close(t.value(pooled).data(), &[0.3, -0.8], 1e-15);
    }

    #[test]
    fn dominant_logit_gives_one_hot() {
        let (mut s, p) = toy_params();
        s.get_mut(p.fc1.w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        s.get_mut(p.fc1.b).data_mut().copy_from_slice(&[0.0, 0.0]);
        s.get_mut(p.fc2.w).data_mut().copy_from_slice(&[1.0, 0.0]);
        let mut t = Tape::with_params(&s);
        let ix = mat(&mut t, 3, 2, |k| [0.0, 1.0, 30.0, 2.0, 0.0, 3.0][k]);
        let (w, pooled) = pool_regions(&mut t, &p, ix).unwrap();
        assert!(t.value(w).data()[1] > 1.0 - 1e-12);
        close(t.value(pooled).data(), &[30.0, 2.0], 1e-10);
    }

    fn setup(model: &Model, t: &mut Tape, seed: f64) -> (Var, Var, Vec<bool>) {
        let cfg = &model.cfg;
        let regions = mat(t, 4, cfg.model_dim, |k| ((k as f64) * 0.37 + seed).sin());
        let x = mat(t, cfg.seq_len, cfg.model_dim, |k| {
            if k < 3 * cfg.model_dim {
                ((k as f64) * 0.53 - seed).cos()
            } else {
                0.0
            }
        });
        let mask = (0..cfg.seq_len).map(|i| i < 3).collect();
        (regions, x, mask)
    }

    #[test]
    fn prior_is_a_distribution_and_permutation_equivariant() {
        for pooled_value in [PooledValue::Regions, PooledValue::Attended] {
            for axis_mode in [AxisMode::Columns, AxisMode::Rows] {
                let cfg = ModelConfig {
                    pooled_value,
                    axis_mode,
                    ..tiny_config(12)
                };
                let m = Model::new(cfg, 3).unwrap();
                let mut t = m.tape();
                let (regions, x, mask) = setup(&m, &mut t, 0.1);
                let a = prior_ground(&mut t, &m, regions, x, &mask).unwrap();
                let g = t.value(a.g).data().to_vec();
                assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(g.iter().all(|v| *v >= 0.0));

                let perm = [2, 0, 3, 1];
                let shuffled = t.gather_rows(regions, &perm).unwrap();
                let b = prior_ground(&mut t, &m, shuffled, x, &mask).unwrap();
                let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
                close(t.value(b.g).data(), &gp, 1e-12);
                close(t.value(b.v).data(), t.value(a.v).data(), 1e-12);
            }
        }
    }

    #[test]
    fn zero_answer_reproduces_prior_exactly() {
        for recompute in [true, false] {
            let cfg = ModelConfig {
                recompute_posterior_attention: recompute,
                ..tiny_config(12)
            };
            let m = Model::new(cfg, 4).unwrap();
            let mut t = m.tape();
            let (regions, x, mask) = setup(&m, &mut t, 0.2);
            let prior = prior_ground(&mut t, &m, regions, x, &mask).unwrap();
            let y = t.constant(Tensor::zeros([m.cfg.seq_len, m.cfg.model_dim]));
            let post = posterior_ground(&mut t, &m, regions, x, y, &mask, &prior).unwrap();
            assert_eq!(t.value(prior.g).data(), t.value(post.g).data());
            assert_eq!(t.value(prior.v).data(), t.value(post.v).data());
            for variant in BridgeVariant::ALL {
                let l = bridge_loss(&mut t, &prior, &post, variant, true).unwrap();
                assert_eq!(t.value(l).item(), 0.0, "{variant:?}");
            }
        }
        assert_eq!(tiny_model(0).posterior_calls(), 0);
    }

    #[test]
    fn nonzero_answer_moves_the_posterior() {
        let m = tiny_model(5);
        let mut t = m.tape();
        let (regions, x, mask) = setup(&m, &mut t, 0.3);
        let prior = prior_ground(&mut t, &m, regions, x, &mask).unwrap();
        let y = mat(&mut t, m.cfg.seq_len, m.cfg.model_dim, |k| if k < 8 { 1.5 } else { 0.0 });
        let post = posterior_ground(&mut t, &m, regions, x, y, &mask, &prior).unwrap();
        assert_eq!(m.posterior_calls(), 1);
        let big_g = t.value(post.g).data().to_vec();
        assert!((big_g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_ne!(big_g, t.value(prior.g).data());
        for variant in BridgeVariant::ALL {
            let l = bridge_loss(&mut t, &prior, &post, variant, true).unwrap();
            assert!(t.value(l).item() > 0.0);
        }
    }

    #[test]
    fn attn_kl_matches_hand_value() {
        let mut t = Tape::new();
        let g = t.leaf(Tensor::vector(vec![0.5, 0.5]).unwrap());
        let big_g = t.leaf(Tensor::vector(vec![0.25, 0.75]).unwrap());
        let v = t.constant(Tensor::zeros([1, 2]));
        let mk = |g| Grounding {
            g,
            v,
            attended: v,
            attention: v,
        };
        let l = bridge_loss(&mut t, &mk(g), &mk(big_g), BridgeVariant::AttnKl, true).unwrap();
        // posterior as p: 0.25·ln(0.25/0.5) + 0.75·ln(0.75/0.5)
        let want = 0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln();
        assert!((t.value(l).item() - want).abs() < 1e-12);
        assert!((want - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn detached_posterior_gets_no_gradient() {
        let m = tiny_model(6);
        let mut t = m.tape();
        let (regions, x, mask) = setup(&m, &mut t, 0.4);
        let prior = prior_ground(&mut t, &m, regions, x, &mask).unwrap();
        let y = t.leaf(Tensor::filled([m.cfg.seq_len, m.cfg.model_dim], 0.4));
        let post = posterior_ground(&mut t, &m, regions, x, y, &mask, &prior).unwrap();
        for variant in BridgeVariant::ALL {
            let l = bridge_loss(&mut t, &prior, &post, variant, true).unwrap();
            t.backward(l).unwrap();
            let gy = t.grad(y).map(|g| g.iter().all(|v| *v == 0.0)).unwrap_or(true);
            assert!(gy, "{variant:?} leaked gradient into the answer");
        }
        let l = bridge_loss(&mut t, &prior, &post, BridgeVariant::AttnKl, false).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(y).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn grounding_pipeline_gradients_match_finite_differences() {
        use crate::autodiff::grad_check_params;
        use rand::SeedableRng;
        let m = tiny_model(7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for variant in BridgeVariant::ALL {
            let checks = grad_check_params(
                &m.params,
                |t| {
                    let (regions, x, mask) = setup(&m, t, 0.5);
                    let prior = prior_ground(t, &m, regions, x, &mask)?;
                    let y = mat(t, m.cfg.seq_len, m.cfg.model_dim, |k| if k < 8 { 0.7 } else { 0.0 });
                    let post = posterior_ground(t, &m, regions, x, y, &mask, &prior)?;
                    bridge_loss(t, &prior, &post, variant, false)
                },
                4,
                1e-5,
                &mut rng,
            )
            .unwrap();
            for c in checks {
                assert!(c.max_rel_error < 1e-5, "{variant:?} {}: {}", c.name, c.max_rel_error);
            }
        }
    }
}
