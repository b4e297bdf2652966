use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Single-direction LSTM cell weights; gate order is input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = store.add_init(format!("{name}.w_ih"), &[input, 4 * hidden], rng);
        let w_hh = store.add_init(format!("{name}.w_hh"), &[hidden, 4 * hidden], rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::vector(b).expect("non-empty"));
        Lstm {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    /// Runs over the rows of `inputs` (`[L, d_in]`) and returns the hidden
    /// state at each position, in position order. `init` seeds both the
    /// hidden and the cell state (zeros otherwise). With `reverse` the scan
    /// starts at the last row.
    pub fn run(&self, tape: &mut Tape, inputs: Var, init: Option<Var>, reverse: bool) -> Result<Vec<Var>> {
        let len = tape.value(inputs).rows();
        let h = self.hidden;
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let bias = tape.param(self.bias);
        let proj = tape.matmul(inputs, w_ih)?;
        let proj = tape.add_bias(proj, bias)?;

        let (mut hs, mut cs) = match init {
            Some(v) => (v, v),
            None => {
                let z = tape.constant(Tensor::zeros([1, h]));
                (z, z)
            }
        };
        let mut out = vec![None; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let x_t = tape.slice_rows(proj, t, t + 1)?;
            let rec = tape.matmul(hs, w_hh)?;
            let pre = tape.add(x_t, rec)?;
            let i = tape.slice_cols(pre, 0, h)?;
            let f = tape.slice_cols(pre, h, 2 * h)?;
            let g = tape.slice_cols(pre, 2 * h, 3 * h)?;
            let o = tape.slice_cols(pre, 3 * h, 4 * h)?;
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, cs)?;
            let write = tape.mul(i, g)?;
            cs = tape.add(keep, write)?;
            let ct = tape.tanh(cs);
            hs = tape.mul(o, ct)?;
            out[t] = Some(hs);
        }
        Ok(out.into_iter().map(|v| v.expect("every position visited")).collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    /// Per-position `[h_fwd, h_bwd]`, shape `[L, 2h]`.
    pub fn states(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let f = self.fwd.run(tape, inputs, None, false)?;
        let b = self.bwd.run(tape, inputs, None, true)?;
        let f = tape.concat_rows(&f)?;
        let b = tape.concat_rows(&b)?;
        tape.concat_cols(&[f, b])
    }

    /// `[h_fwd(last), h_bwd(first)]`, shape `[1, 2h]`.
    pub fn final_states(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let f = self.fwd.run(tape, inputs, None, false)?;
        let b = self.bwd.run(tape, inputs, None, true)?;
        tape.concat_cols(&[*f.last().expect("non-empty"), b[0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_seeds_hidden_and_cell_state() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        for id in [lstm.w_ih, lstm.w_hh, lstm.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::with_params(&store);
        let inputs = tape.constant(Tensor::zeros([1, 2]));
        let init = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let out = lstm.run(&mut tape, inputs, Some(init), false).unwrap();
        // Every gate sits at sigmoid(0) = 0.5 and the candidate at tanh(0) = 0.
        let expected: Vec<f64> = [1.0f64, -2.0, 0.5].iter().map(|c| 0.5 * (0.5 * c).tanh()).collect();
        for (got, want) in tape.value(out[0]).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15);
        }
        let cold = lstm.run(&mut tape, inputs, None, false).unwrap();
        assert!(tape.value(cold[0]).data().iter().all(|v| *v == 0.0));
    }
}
