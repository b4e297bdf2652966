use rand::Rng;

use super::lstm::BiLstm;
use super::{prefix_len, Model, ModelConfig};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Question,
    Answer,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add_init(format!("{name}.w"), &[d_in, d_out], rng),
            b: store.add_filled(format!("{name}.b"), &[d_out], 0.0),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Token-level encoders for question and answer, the sentence-level
/// history encoder, context fusion attention and region projection.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub question: BiLstm,
    pub question_proj: Linear,
    pub answer: BiLstm,
    pub answer_proj: Linear,
    pub history: BiLstm,
    pub history_proj: Linear,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Linear,
    pub region_in: Linear,
    pub region_out: Linear,
}

impl EncoderParams {
    pub(crate) fn new<R: Rng>(cfg: &ModelConfig, s: &mut ParamStore, rng: &mut R) -> Self {
        let (de, dq, h) = (cfg.embed_dim, cfg.model_dim, cfg.rnn_hidden);
        EncoderParams {
            embedding: s.add_init("embedding", &[cfg.vocab_size, de], &mut *rng),
            question: BiLstm::new(s, "enc.question", de, h, rng),
            question_proj: Linear::new(s, "enc.question_proj", 2 * h, dq, rng),
            answer: BiLstm::new(s, "enc.answer", de, h, rng),
            answer_proj: Linear::new(s, "enc.answer_proj", 2 * h, dq, rng),
            history: BiLstm::new(s, "enc.history", de, h, rng),
            history_proj: Linear::new(s, "enc.history_proj", 2 * h, dq, rng),
            w_q: s.add_init("fuse.w_q", &[dq, dq], rng),
            w_k: s.add_init("fuse.w_k", &[dq, dq], rng),
            w_v: s.add_init("fuse.w_v", &[dq, dq], rng),
            w_o: Linear::new(s, "fuse.w_o", dq, dq, rng),
            region_in: Linear::new(s, "visual.fc1", cfg.feature_dim, dq, rng),
            region_out: Linear::new(s, "visual.fc2", dq, dq, rng),
        }
    }
}

pub(crate) fn embed(tape: &mut Tape, model: &Model, ids: &[usize]) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= model.cfg.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            len: model.cfg.vocab_size,
        });
    }
    let table = tape.param(model.enc.embedding);
    tape.gather_rows(table, ids)
}

/// `[λ, d_q]` token encoding; rows at PAD positions are exactly zero.
pub fn encode_tokens(tape: &mut Tape, model: &Model, tokens: &[usize], mask: &[bool], which: Which) -> Result<Var> {
    let lambda = tokens.len();
    if lambda == 0 || mask.len() != lambda {
        return Err(Error::dim("encode_tokens", &[lambda], &[mask.len()]));
    }
    let dq = model.cfg.model_dim;
    let n = prefix_len(mask)?;
    if n == 0 {
        return Ok(tape.constant(Tensor::zeros([lambda, dq])));
    }
    let (rnn, proj) = match which {
        Which::Question => (&model.enc.question, &model.enc.question_proj),
        Which::Answer => (&model.enc.answer, &model.enc.answer_proj),
    };
    let emb = embed(tape, model, &tokens[..n])?;
    let states = rnn.states(tape, emb)?;
    let out = proj.apply(tape, states)?;
    if n == lambda {
        return Ok(out);
    }
    let pad = tape.constant(Tensor::zeros([lambda - n, dq]));
    tape.concat_rows(&[out, pad])
}

/// One `d_q` row per history element (caption, then Q-A pairs). Each
/// element is encoded independently; empty elements give a zero row.
pub fn encode_history(tape: &mut Tape, model: &Model, elements: &[Vec<usize>]) -> Result<Var> {
    if elements.is_empty() {
        return Err(Error::Contract("history needs at least the caption".into()));
    }
    let dq = model.cfg.model_dim;
    let max_len = 2 * model.cfg.seq_len;
    let mut rows = Vec::with_capacity(elements.len());
    for el in elements {
        if el.is_empty() {
            rows.push(tape.constant(Tensor::zeros([1, dq])));
            continue;
        }
        let emb = embed(tape, model, &el[..el.len().min(max_len)])?;
        let fin = model.enc.history.final_states(tape, emb)?;
        rows.push(model.enc.history_proj.apply(tape, fin)?);
    }
    tape.concat_rows(&rows)
}

/// Context representation plus the per-head attention maps (`[λ, T]`).
pub struct Fusion {
    pub x: Var,
    pub attention: Vec<Var>,
}

/// Multi-head attention with queries from the question and keys/values
/// from the history; optional residual + layer norm; PAD rows zeroed.
pub fn fuse_context(tape: &mut Tape, model: &Model, q: Var, h: Var, mask_q: &[bool]) -> Result<Fusion> {
    let cfg = &model.cfg;
    let dq = cfg.model_dim;
    let (lambda, qd) = (tape.value(q).rows(), tape.value(q).cols());
    if qd != dq || tape.value(h).cols() != dq || tape.value(q).rank() != 2 {
        return Err(Error::dim("fuse_context", tape.shape(q), tape.shape(h)));
    }
    if mask_q.len() != lambda {
        return Err(Error::dim("fuse_context mask", &[lambda], &[mask_q.len()]));
    }
    let dk = dq / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (wq, wk, wv) = (
        tape.param(model.enc.w_q),
        tape.param(model.enc.w_k),
        tape.param(model.enc.w_v),
    );
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(h, wk)?;
    let vp = tape.matmul(h, wv)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qh = tape.slice_cols(qp, i * dk, (i + 1) * dk)?;
        let kh = tape.slice_cols(kp, i * dk, (i + 1) * dk)?;
        let vh = tape.slice_cols(vp, i * dk, (i + 1) * dk)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, 1)?;
        heads.push(tape.matmul(a, vh)?);
        attention.push(a);
    }
    let cat = tape.concat_cols(&heads)?;
    let mut x = model.enc.w_o.apply(tape, cat)?;
    if cfg.fusion_residual {
        x = tape.add(q, x)?;
        x = tape.layer_norm(x)?;
    }
    let keep: Vec<f64> = mask_q
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, dq))
        .collect();
    let keep = tape.constant(Tensor::matrix(lambda, dq, keep)?);
    let x = tape.mul(x, keep)?;
    Ok(Fusion { x, attention })
}

/// Two-layer perceptron applied row-wise: `[μ, d_v] -> [μ, d_q]`.
pub fn project_regions(tape: &mut Tape, model: &Model, raw: Var) -> Result<Var> {
    if tape.value(raw).rank() != 2 || tape.value(raw).cols() != model.cfg.feature_dim {
        return Err(Error::dim("project_regions", tape.shape(raw), &[0, model.cfg.feature_dim]));
    }
    let hidden = model.enc.region_in.apply(tape, raw)?;
    let hidden = tape.relu(hidden);
    model.enc.region_out.apply(tape, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{tiny_config, tiny_model};
    use crate::model::{pad_tokens, Model};

    fn rows(t: &Tape, v: Var) -> Vec<Vec<f64>> {
        let x = t.value(v);
        (0..x.rows()).map(|r| x.row(r).to_vec()).collect()
    }

    #[test]
    fn all_pad_gives_zero_matrix() {
        let m = tiny_model(1);
        let mut t = m.tape();
        let (ids, mask) = pad_tokens(&[], 5);
        let out = encode_tokens(&mut t, &m, &ids, &mask, Which::Question).unwrap();
        assert_eq!(t.shape(out), &[5, 8]);
        assert!(t.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn token_encoding_shape_and_zero_pad_rows() {
        let m = tiny_model(2);
        let mut t = m.tape();
        let (ids, mask) = pad_tokens(&[4, 5, 6], 5);
        for which in [Which::Question, Which::Answer] {
            let out = encode_tokens(&mut t, &m, &ids, &mask, which).unwrap();
            assert_eq!(t.shape(out), &[5, 8]);
            let r = rows(&t, out);
            assert!(r[3].iter().chain(&r[4]).all(|v| *v == 0.0));
            assert!(r[0].iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn token_out_of_vocab_is_index_error() {
        let m = tiny_model(2);
        let mut t = m.tape();
        let (ids, mask) = pad_tokens(&[4, 99], 5);
        assert!(matches!(
            encode_tokens(&mut t, &m, &ids, &mask, Which::Question),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_positions() {
        let m = tiny_model(3);
        let mut swapped = m.clone();
        let q = m.enc.question;
        for (a, b) in [(q.fwd.w_ih, q.bwd.w_ih), (q.fwd.w_hh, q.bwd.w_hh), (q.fwd.bias, q.bwd.bias)] {
            let (ta, tb) = (m.params.get(a).clone(), m.params.get(b).clone());
            *swapped.params.get_mut(a) = tb;
            *swapped.params.get_mut(b) = ta;
        }
        // swap the two halves of the projection's input rows
        let w = m.params.get(m.enc.question_proj.w);
        let h = m.cfg.rnn_hidden;
        let (r, c) = (w.rows(), w.cols());
        let mut data = w.data().to_vec();
        for i in 0..h {
            for j in 0..c {
                data[i * c + j] = w.at(h + i, j);
                data[(h + i) * c + j] = w.at(i, j);
            }
        }
        *swapped.params.get_mut(m.enc.question_proj.w) = Tensor::matrix(r, c, data).unwrap();

        let (ids, mask) = pad_tokens(&[4, 7, 9], 5);
        let (rev, _) = pad_tokens(&[9, 7, 4], 5);
        let mut t1 = m.tape();
        let a = encode_tokens(&mut t1, &m, &ids, &mask, Which::Question).unwrap();
        let mut t2 = swapped.tape();
        let b = encode_tokens(&mut t2, &swapped, &rev, &mask, Which::Question).unwrap();
        let (ra, rb) = (rows(&t1, a), rows(&t2, b));
        for p in 0..3 {
            for (x, y) in ra[p].iter().zip(&rb[2 - p]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn history_rows_are_local() {
        let m = tiny_model(4);
        let hist = vec![vec![4, 5], vec![6, 7, 8], vec![9]];
        let perm = vec![vec![4, 5], vec![9], vec![6, 7, 8]];
        let mut t = m.tape();
        let a = encode_history(&mut t, &m, &hist).unwrap();
        let b = encode_history(&mut t, &m, &perm).unwrap();
        assert_eq!(t.shape(a), &[3, 8]);
        let (ra, rb) = (rows(&t, a), rows(&t, b));
        assert_eq!(ra[0], rb[0]);
        assert_eq!(ra[1], rb[2]);
        assert_eq!(ra[2], rb[1]);

        let cap = encode_history(&mut t, &m, &hist[..1]).unwrap();
        assert_eq!(t.shape(cap), &[1, 8]);
    }

    #[test]
    fn fusion_single_key_attends_fully() {
        let m = tiny_model(5);
        let mut t = m.tape();
        let (ids, mask) = pad_tokens(&[4, 5], 5);
        let q = encode_tokens(&mut t, &m, &ids, &mask, Which::Question).unwrap();
        let h = encode_history(&mut t, &m, &[vec![6, 7]]).unwrap();
        let f = fuse_context(&mut t, &m, q, h, &mask).unwrap();
        assert_eq!(t.shape(f.x), &[5, 8]);
        for a in &f.attention {
            assert!(t.value(*a).data().iter().all(|v| *v == 1.0));
        }
        let r = rows(&t, f.x);
        assert!(r[2..].iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion_with_duplicated_key_matches_hand_softmax() {
        // Duplicate history row: the two copies share weight equally, and the
        // attention output equals the single-copy output when that row is
        // the only key.
        let cfg = ModelConfig {
            fusion_residual: false,
            ..tiny_config(12)
        };
        let m = Model::new(cfg, 6).unwrap();
        let mut t = m.tape();
        let (ids, mask) = pad_tokens(&[4, 5, 6], 5);
        let q = encode_tokens(&mut t, &m, &ids, &mask, Which::Question).unwrap();
        let one = encode_history(&mut t, &m, &[vec![7, 8]]).unwrap();
        let two = encode_history(&mut t, &m, &[vec![7, 8], vec![7, 8]]).unwrap();
        let f1 = fuse_context(&mut t, &m, q, one, &mask).unwrap();
        let f2 = fuse_context(&mut t, &m, q, two, &mask).unwrap();
        for a in &f2.attention {
            assert!(t.value(*a).data().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        }
        for (x, y) in t.value(f1.x).data().iter().zip(t.value(f2.x).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_attention_rows_sum_to_one() {
        let m = tiny_model(7);
        let mut t = m.tape();
        let (ids, mask) = pad_tokens(&[4, 5, 6, 7], 5);
        let q = encode_tokens(&mut t, &m, &ids, &mask, Which::Question).unwrap();
        let h = encode_history(&mut t, &m, &[vec![6, 7], vec![8], vec![9, 10, 11]]).unwrap();
        let f = fuse_context(&mut t, &m, q, h, &mask).unwrap();
        for a in &f.attention {
            let v = t.value(*a);
            for r in 0..v.rows() {
                assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn region_projection_contracts() {
        let m = tiny_model(8);
        let mut t = m.tape();
        let z = t.constant(Tensor::zeros([3, 6]));
        let out = project_regions(&mut t, &m, z).unwrap();
        assert!(t.value(out).data().iter().all(|v| *v == 0.0));

        let raw: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();
        let a = t.constant(Tensor::matrix(3, 6, raw.clone()).unwrap());
        let mut permuted = raw[12..].to_vec();
        permuted.extend_from_slice(&raw[..12]);
        let b = t.constant(Tensor::matrix(3, 6, permuted).unwrap());
        let oa = project_regions(&mut t, &m, a).unwrap();
        let ob = project_regions(&mut t, &m, b).unwrap();
        let (ra, rb) = (rows(&t, oa), rows(&t, ob));
        assert_eq!(ra[2], rb[0]);
        assert_eq!(ra[0], rb[1]);

        let bad = t.constant(Tensor::zeros([3, 5]));
        assert!(project_regions(&mut t, &m, bad).is_err());
    }

    #[test]
    fn full_scale_region_shape() {
        let cfg = ModelConfig {
            feature_dim: 2048,
            ..tiny_config(12)
        };
        let m = Model::new(cfg, 0).unwrap();
        let mut t = m.tape();
        let raw = t.constant(Tensor::filled([100, 2048], 0.01));
        let out = project_regions(&mut t, &m, raw).unwrap();
        assert_eq!(t.shape(out), &[100, 8]);
    }
}
