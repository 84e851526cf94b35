use deoe_nncore::{
    bce_value, grad_check, sigmoid, Adam, Conv2d, ConvGru, NnError, ParamStore, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, v).unwrap()
}

/// Direct six-loop cross-correlation.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(ic * h + iy as usize) * wd + ix as usize]
                                * w.data()[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 5, 6], -1.0, 1.0);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[3, 5, 6]);
    assert_eq!(tape.value(y), x.data());
}

#[test]
fn conv_constant_field_interior() {
    let c = 2.5;
    let x = Tensor::full(&[1, 6, 6], c);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(x), tape.constant(w));
    let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    let v = tape.value(y);
    for i in 1..5 {
        for j in 1..5 {
            assert_eq!(v[i * 6 + j], 9.0 * c);
        }
    }
    // Corners see only 4 in-bounds taps.
    assert_eq!(v[0], 4.0 * c);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..40 {
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..5);
        let k = [1, 3, 5][trial % 3];
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..=k / 2 + 1);
        let h = rng.random_range(k..k + 9);
        let w = rng.random_range(k..k + 9);
        let x = rand_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
        let kern = rand_tensor(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let bias: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (want, oh, ow) = naive_conv(&x, &kern, &bias, stride, pad);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(kern);
        let bv = tape.constant(Tensor::new(&[o], bias).unwrap());
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.shape(y), &[o, oh, ow]);
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(NnError::Shape { .. })));
    assert!(tape.conv2d(x, w, None, 0, 1).is_err());
}

fn gru_fixture(
    seed: u64,
    input: usize,
    hidden: usize,
    k: usize,
) -> (ParamStore<f64>, ConvGru, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gru = ConvGru::new(&mut store, "gru", input, hidden, k, &mut rng).unwrap();
    (store, gru, rng)
}

#[test]
fn gru_zero_weights_halves_state() {
    let (mut store, gru, mut rng) = gru_fixture(3, 2, 3, 3);
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let h = rand_tensor(&mut rng, &[3, 4, 4], -0.9, 0.9);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (xv, hv) = (tape.constant(x), tape.constant(h.clone()));
    let out = gru.step(&mut tape, &p, xv, hv).unwrap();
    for (a, b) in tape.value(out).iter().zip(h.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn gru_constructed_fixed_point() {
    // Candidate weights zero and bias b give h~ = tanh(b); starting from
    // h = tanh(b) the update leaves the state unchanged for any gate value.
    let (mut store, gru, mut rng) = gru_fixture(4, 2, 2, 3);
    let cw = store.get_mut(gru.candidate.weight);
    cw.data_mut().fill(0.0);
    let bias = [0.3, -0.7];
    store
        .get_mut(gru.candidate.bias)
        .data_mut()
        .copy_from_slice(&bias);
    let x = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let mut h = Tensor::zeros(&[2, 3, 3]);
    for c in 0..2 {
        for v in &mut h.data_mut()[c * 9..(c + 1) * 9] {
            *v = f64::tanh(bias[c]);
        }
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (xv, hv) = (tape.constant(x), tape.constant(h.clone()));
    let out = gru.step(&mut tape, &p, xv, hv).unwrap();
    for (a, b) in tape.value(out).iter().zip(h.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Scalar reference for one GRU step with 3x3 kernels, padding 1.
fn gru_scalar(store: &ParamStore<f64>, gru: &ConvGru, x: &Tensor<f64>, h: &Tensor<f64>) -> Vec<f64> {
    let (ci, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ch = gru.hidden;
    let cat = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut v = a.data().to_vec();
        v.extend_from_slice(b.data());
        Tensor::new(&[a.shape()[0] + b.shape()[0], hh, ww], v).unwrap()
    };
    let xh = cat(x, h);
    let gw = store.get(gru.gates.weight);
    let gb = store.get(gru.gates.bias).data().to_vec();
    let (g, _, _) = naive_conv(&xh, gw, &gb, 1, 1);
    let sig: Vec<f64> = g.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let plane = hh * ww;
    let z = &sig[..ch * plane];
    let r = &sig[ch * plane..];
    let rh: Vec<f64> = r.iter().zip(h.data()).map(|(a, b)| a * b).collect();
    let xrh = cat(x, &Tensor::new(&[ch, hh, ww], rh).unwrap());
    let cw = store.get(gru.candidate.weight);
    let cb = store.get(gru.candidate.bias).data().to_vec();
    let (c, _, _) = naive_conv(&xrh, cw, &cb, 1, 1);
    let _ = ci;
    (0..ch * plane)
        .map(|i| (1.0 - z[i]) * h.data()[i] + z[i] * c[i].tanh())
        .collect()
}

#[test]
fn gru_matches_scalar_oracle_and_stays_bounded() {
    for seed in 0..5 {
        let (store, gru, mut rng) = gru_fixture(10 + seed, 3, 4, 3);
        let x = rand_tensor(&mut rng, &[3, 5, 4], -2.0, 2.0);
        let h = rand_tensor(&mut rng, &[4, 5, 4], -0.99, 0.99);
        let want = gru_scalar(&store, &gru, &x, &h);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (xv, hv) = (tape.constant(x), tape.constant(h));
        let out = gru.step(&mut tape, &p, xv, hv).unwrap();
        for (a, b) in tape.value(out).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
            assert!(a.abs() < 1.0);
        }
    }
}

#[test]
fn gru_shape_mismatch_is_error() {
    let (store, gru, _) = gru_fixture(1, 2, 3, 3);
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let h = tape.constant(Tensor::zeros(&[3, 5, 4]));
    assert!(gru.step(&mut tape, &p, x, h).is_err());
}

#[test]
fn sigmoid_and_dropout_basics() {
    assert_eq!(sigmoid(0.0f64), 0.5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[100], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for training in [false, true] {
        let y = tape.dropout(x, 0.0, training, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
    let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn dropout_preserves_mean() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1_000_000], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
}

#[test]
fn dropout_masks_are_seeded() {
    let run = |seed| {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[64], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn bce_reference_values() {
    assert!(bce_value(1.0f64, 1.0) < 1e-6);
    assert!((bce_value(0.5f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    // Bernoulli entropy at 0.7.
    let h = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
    assert!((bce_value(0.7f64, 0.7) - h).abs() < 1e-12);
    assert!((bce_value(0.7f64, 0.7) - 0.610864).abs() < 1e-5);
    // Clamped at the ends instead of producing infinities.
    assert!(bce_value(0.0f64, 1.0).is_finite());
}

#[test]
fn bce_logits_agrees_with_probability_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z: Vec<f64> = (0..50).map(|_| rng.random_range(-6.0..6.0)).collect();
    let y: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::new(&[50], z.clone()).unwrap());
    let l = tape.bce_logits(zv, y.clone()).unwrap();
    for i in 0..50 {
        let want = bce_value(sigmoid(z[i]), y[i]);
        assert!((tape.value(l)[i] - want).abs() < 1e-9);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[2, 3], 4.0), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[3]), true);
    let y = tape.sigmoid(x);
    assert!(matches!(tape.backward(y), Err(NnError::NonScalarLoss(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0), true);
    let y = tape.mul(x, x).unwrap();
    let d = tape.detach(y);
    let z = tape.mul(d, x).unwrap();
    let s = tape.sum(z);
    let g = tape.backward(s).unwrap();
    // d(sum(detach(x^2) * x))/dx = x^2, no contribution through the detached branch.
    assert_eq!(g.get(x).unwrap(), &[4.0; 3]);
    assert!(!tape.requires_grad(d));
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = ParamStore::<f64>::new();
    p.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
    let before = p.clone();
    let mut adam = Adam::new(&p, 0.1);
    adam.step(&mut p, &[vec![0.0; 3]]).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = ParamStore::<f64>::new();
    let id = p.add("p", Tensor::scalar(3.0)).unwrap();
    let mut adam = Adam::new(&p, 0.1);
    adam.step(&mut p, &[vec![1.0]]).unwrap();
    // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
    let moved = 3.0 - p.get(id).data()[0];
    assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
}

#[test]
fn conv_layer_registers_named_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let conv = Conv2d::new(&mut store, "stem", 4, 8, 3, 2, &mut rng).unwrap();
    assert_eq!(store.get(conv.weight).shape(), &[8, 4, 3, 3]);
    assert_eq!(store.find("stem.bias"), Some(conv.bias));
    let bound = (3.0f32 / 36.0).sqrt();
    assert!(store.get(conv.weight).data().iter().all(|v| v.abs() <= bound));
    assert!(Conv2d::new(&mut store, "stem", 4, 8, 3, 2, &mut rng).is_err());
}

#[test]
fn gradcheck_quadratic_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[17], -3.0, 3.0);
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
    assert_eq!(r.coords_checked, 17);
}

#[test]
fn gradcheck_bce_of_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = rand_tensor(&mut rng, &[20], -4.0, 4.0);
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
    let r = grad_check(
        |t, v| {
            let p = t.sigmoid(v[0]);
            let l = t.bce(p, y.clone())?;
            Ok(t.sum(l))
        },
        &[z],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_detects_a_wrong_gradient() {
    // Detached square: analytic gradient misses the 2x factor.
    let x = Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap();
    let r = grad_check(
        |t, v| {
            let d = t.detach(v[0]);
            let sq = t.mul(v[0], d)?;
            Ok(t.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error > 0.1);
}
