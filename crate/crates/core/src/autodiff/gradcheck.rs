use rand::Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences and returns the maximum relative error over coordinates.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Gradient check over a parameter store. `f` builds the loss on a tape
/// bound to the store; `coords` coordinates are sampled from every
/// parameter tensor (all of them when the tensor is smaller).
pub fn grad_check_params<F, R>(
    store: &ParamStore,
    mut f: F,
    coords: usize,
    h: f64,
    rng: &mut R,
) -> Result<Vec<ParamCheck>>
where
    F: FnMut(&mut Tape) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    tape.backward(loss)?;

    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = tape
            .param_grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let lp = {
                let mut t = Tape::with_params(&probe);
                let l = f(&mut t)?;
                t.value(l).item()
            };
            probe.get_mut(id).data_mut()[i] = orig - h;
            let lm = {
                let mut t = Tape::with_params(&probe);
                let l = f(&mut t)?;
                t.value(l).item()
            };
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (lp - lm) / (2.0 * h)));
        }
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
