use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
    Tensor::matrix(r, c, d.to_vec()).unwrap()
}

fn vecf(d: &[f64]) -> Tensor {
    Tensor::vector(d.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let m = t.constant(mat(2, 2, &[1., 2., 3., 4.]));
    let out = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(out).data(), &[1., 2., 3., 4.]);

    let a = t.constant(mat(1, 2, &[1., 2.]));
    let b = t.constant(mat(2, 1, &[3., 4.]));
    let out = t.matmul(a, b).unwrap();
    assert_eq!(t.value(out).data(), &[11.]);

    let z = t.constant(Tensor::zeros([2, 3]));
    let any = t.constant(mat(3, 2, &[1., -2., 3., 7., 0.5, 9.]));
    let out = t.matmul(z, any).unwrap();
    assert_eq!(t.value(out).data(), &[0.; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_backward_rule() {
    // dA = dC·Bᵀ, dB = Aᵀ·dC with dC = ones
    let mut t = Tape::new();
    let a = t.leaf(mat(1, 2, &[1., 2.]));
    let b = t.leaf(mat(2, 1, &[3., 4.]));
    let c = t.matmul(a, b).unwrap();
    let l = t.sum(c);
    t.backward(l).unwrap();
    assert_eq!(t.grad(a).unwrap(), &[3., 4.]);
    assert_eq!(t.grad(b).unwrap(), &[1., 2.]);
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.leaf(vecf(&[-1., 0., 2.]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0., 0., 2.]);
    let l = t.sum(r);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0., 0., 1.]);

    let mut t = Tape::new();
    let x = t.constant(vecf(&[1.5, -2.]));
    let z = t.constant(Tensor::zeros([2]));
    let s = t.add(x, z).unwrap();
    assert_eq!(t.value(s).data(), &[1.5, -2.]);

    let zero = t.constant(vecf(&[0.]));
    let s = t.sigmoid(zero);
    assert_eq!(t.value(s).data(), &[0.5]);

    let y = t.constant(Tensor::zeros([3]));
    assert!(matches!(t.mul(x, y), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let a = t.constant(vecf(&[0., 0.]));
    let s = t.softmax(a, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);

    let a = t.constant(vecf(&[1000., 1000., 1000.]));
    let s = t.softmax(a, 0).unwrap();
    close(t.value(s).data(), &[1. / 3.; 3], 1e-15);

    let a = t.constant(vecf(&[0., 3f64.ln()]));
    let s = t.softmax(a, 0).unwrap();
    close(t.value(s).data(), &[0.25, 0.75], 1e-15);
}

#[test]
fn masked_softmax_zeros_masked_and_rejects_degenerate() {
    let mut t = Tape::new();
    let a = t.constant(mat(2, 3, &[1., 2., 3., 4., 5., 6.]));
    let s = t
        .masked_softmax(a, 1, Some(&[true, false, true, true, true, false]))
        .unwrap();
    let v = t.value(s);
    assert_eq!(v.at(0, 1), 0.0);
    assert_eq!(v.at(1, 2), 0.0);
    close(&[v.at(0, 0) + v.at(0, 2), v.at(1, 0) + v.at(1, 1)], &[1., 1.], 1e-12);

    // axis 0 normalizes each column
    let s = t.masked_softmax(a, 0, None).unwrap();
    let v = t.value(s);
    for c in 0..3 {
        assert!((v.at(0, c) + v.at(1, c) - 1.0).abs() < 1e-12);
    }

    let r = t.masked_softmax(a, 1, Some(&[false, false, false, true, true, true]));
    assert!(matches!(r, Err(Error::DegenerateSlice(_))));
}

#[test]
fn kl_examples() {
    let mut t = Tape::new();
    let p = t.constant(vecf(&[0.5, 0.5]));
    let k = t.kl_divergence(p, p).unwrap();
    assert_eq!(t.value(k).item(), 0.0);

    let q = t.constant(vecf(&[0.25, 0.75]));
    let k = t.kl_divergence(p, q).unwrap();
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((t.value(k).item() - expected).abs() < 1e-15);
    assert!((t.value(k).item() - 0.14384).abs() < 1e-5);

    let p1 = t.constant(vecf(&[1., 0.]));
    let q1 = t.constant(vecf(&[0.5, 0.5]));
    let k = t.kl_divergence(p1, q1).unwrap();
    assert!((t.value(k).item() - 2f64.ln()).abs() < 1e-15);

    // batch of slices is averaged
    let pp = t.constant(mat(2, 2, &[0.5, 0.5, 1., 0.]));
    let qq = t.constant(mat(2, 2, &[0.5, 0.5, 0.5, 0.5]));
    let k = t.kl_divergence(pp, qq).unwrap();
    assert!((t.value(k).item() - 2f64.ln() / 2.0).abs() < 1e-15);
}

#[test]
fn kl_rejects_invalid_distributions() {
    let mut t = Tape::new();
    let good = t.constant(vecf(&[0.5, 0.5]));
    let neg = t.constant(vecf(&[1.5, -0.5]));
    let short = t.constant(vecf(&[0.5, 0.4]));
    assert!(matches!(t.kl_divergence(neg, good), Err(Error::InvalidDistribution(_))));
    assert!(matches!(t.kl_divergence(good, short), Err(Error::InvalidDistribution(_))));
}

#[test]
fn kl_floor_keeps_zero_q_finite() {
    let mut t = Tape::new();
    let p = t.constant(vecf(&[0.5, 0.5]));
    let q = t.constant(vecf(&[1.0, 0.0]));
    let k = t.kl_divergence(p, q).unwrap();
    let expected = 0.5 * (0.5f64.ln()) + 0.5 * (0.5f64.ln() - KL_FLOOR.ln());
    assert!((t.value(k).item() - expected).abs() < 1e-12);
}

#[test]
fn mse_examples() {
    let mut t = Tape::new();
    let a = t.constant(vecf(&[1., 2.]));
    let m = t.mse(a, a).unwrap();
    assert_eq!(t.value(m).item(), 0.0);
    let z = t.constant(vecf(&[0., 0.]));
    let o = t.constant(vecf(&[1., 1.]));
    let m = t.mse(z, o).unwrap();
    assert_eq!(t.value(m).item(), 1.0);
    let b = t.constant(vecf(&[3., 2.]));
    let m = t.mse(a, b).unwrap();
    assert_eq!(t.value(m).item(), 2.0);
    let c = t.constant(vecf(&[3., 2., 1.]));
    assert!(t.mse(a, c).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let u = t.constant(vecf(&[0.3; 4]));
    let ce = t.cross_entropy(u, 2).unwrap();
    assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-15);

    let l = t.constant(vecf(&[10., -10.]));
    let ce = t.cross_entropy(l, 0).unwrap();
    // -ln(1/(1+e^-20)) = ln(1+e^-20)
    let expected = (-20f64).exp().ln_1p();
    assert!((t.value(ce).item() - expected).abs() < 1e-20);
    assert!((t.value(ce).item() - 2.06e-9).abs() < 1e-11);

    let l = t.constant(vecf(&[0., 3f64.ln()]));
    let ce = t.cross_entropy(l, 1).unwrap();
    assert!((t.value(ce).item() + 0.75f64.ln()).abs() < 1e-15);

    assert!(matches!(t.cross_entropy(l, 2), Err(Error::Index { .. })));
}

#[test]
fn backward_examples() {
    let x0 = vecf(&[1., -2., 3.]);
    let mut t = Tape::new();
    let x = t.leaf(x0.clone());
    let l = t.sum(x);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1., 1., 1.]);

    let mut t = Tape::new();
    let x = t.leaf(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2., -4., 6.]);

    let mut t = Tape::new();
    let x = t.leaf(x0);
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn grad_check_examples() {
    let x = vecf(&[0.3, -1.2, 2.5, 0.7]);
    let err = grad_check(
        |t, x| {
            let s = t.mul(x, x)?;
            Ok(t.sum(s))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");

    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let c = t.constant(Tensor::scalar(4.0));
    let zero = t.scale(xv, 0.0);
    let s = t.sum(zero);
    let l = t.add(s, c).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(xv).unwrap(), &[0.0; 4]);
}

/// Composite covering every op with a backward rule.
fn composite(t: &mut Tape, x: Var) -> crate::Result<Var> {
    let m = t.reshape(x, &[3, 4])?;
    let w = t.constant(
        Tensor::matrix(4, 3, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect()).unwrap(),
    );
    let h = t.matmul(m, w)?;
    let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.05]).unwrap());
    let h = t.add_bias(h, b)?;
    let h = t.tanh(h);
    let ln = t.layer_norm(h)?;
    let ht = t.transpose(ln)?;
    let cat = t.concat_cols(&[ht, ht])?;
    let sl = t.slice_cols(cat, 1, 5)?;
    let rows = t.slice_rows(sl, 0, 2)?;
    let g = t.gather_rows(m, &[2, 0, 2])?;
    let g = t.sigmoid(g);
    let stack = t.concat_rows(&[rows, g])?;
    let p = t.masked_softmax(stack, 1, None)?;
    let q = t.softmax(stack, 0)?;
    let qt = t.transpose(q)?;
    let qt = t.softmax(qt, 1)?;
    let st = t.transpose(stack)?;
    let pt = t.softmax(st, 1)?;
    let kl = t.kl_divergence(pt, qt)?;
    let ce = t.cross_entropy_rows(stack, &[0, 3, 1, 2, 2])?;
    let r = t.relu(stack);
    let z = t.constant(Tensor::zeros([5, 4]));
    let d = t.sub(r, z)?;
    let mse = t.mse(d, p)?;
    let s = t.add(kl, ce)?;
    let s = t.add(s, mse)?;
    Ok(t.scale(s, 1.5))
}

#[test]
fn composite_grad_check() {
    let x = Tensor::vector((0..12).map(|i| ((i as f64) * 0.37).sin() + 0.05).collect()).unwrap();
    let err = grad_check(composite, &x, DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut t = Tape::new();
    let x = t.leaf(vecf(&[2.0]));
    let a = t.scale(x, 3.0);
    let b = t.add(a, x).unwrap();
    let l = t.sum(b);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(vecf(&[1.0, 2.0]));
    let d = t.detach(x);
    let p = t.mul(x, d).unwrap();
    let l = t.sum(p);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    assert!(t.grad(d).is_none());
}

#[test]
fn tensor_serialization_roundtrip() {
    let mut store = ParamStore::new();
    store.add("a", mat(2, 2, &[1., 2., 3., 4.]));
    store.add("b", vecf(&[-0.5]));
    let mut buf = Vec::new();
    store.write_to(&mut buf).unwrap();
    let mut other = ParamStore::new();
    other.add("a", Tensor::zeros([2, 2]));
    other.add("b", Tensor::zeros([1]));
    other.read_values_from(&mut buf.as_slice()).unwrap();
    assert_eq!(other, store);

    let mut wrong = ParamStore::new();
    wrong.add("a", Tensor::zeros([4]));
    wrong.add("b", Tensor::zeros([1]));
    assert!(matches!(
        wrong.read_values_from(&mut buf.as_slice()),
        Err(Error::ManifestMismatch(_))
    ));
}

fn arb_logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..12)
}

fn softmax_of(v: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(v.to_vec()).unwrap());
    let s = t.softmax(a, 0).unwrap();
    t.value(s).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_on_simplex(v in arb_logits()) {
        let p = softmax_of(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn softmax_argmax_shift_invariant(v in arb_logits(), c in -500.0f64..500.0) {
        let argmax = |p: &[f64]| {
            p.iter().enumerate().fold(0, |b, (i, x)| if *x > p[b] { i } else { b })
        };
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert_eq!(argmax(&softmax_of(&v)), argmax(&softmax_of(&shifted)));
    }

    #[test]
    fn kl_gibbs(a in arb_logits(), seed in 0u64..1000) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + ((i as u64 + seed) % 7) as f64).collect();
        let (p, q) = (softmax_of(&a), softmax_of(&b));
        let mut t = Tape::new();
        let pv = t.constant(Tensor::vector(p.clone()).unwrap());
        let qv = t.constant(Tensor::vector(q).unwrap());
        let k = t.kl_divergence(pv, qv).unwrap();
        prop_assert!(t.value(k).item() >= -1e-15);
        let k0 = t.kl_divergence(pv, pv).unwrap();
        prop_assert!(t.value(k0).item().abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear(x in prop::collection::vec(-2.0f64..2.0, 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad_of = |wa: f64, wb: f64| {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::vector(x.clone()).unwrap());
            let th = t.tanh(v);
            let l1 = t.sum(th);
            let sq = t.mul(v, v).unwrap();
            let l2 = t.mean(sq);
            let l1s = t.scale(l1, wa);
            let l2s = t.scale(l2, wb);
            let l = t.add(l1s, l2s).unwrap();
            t.backward(l).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let g = grad_of(a, b);
        let (g1, g2) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..4 {
            prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-9);
        }
    }
}
