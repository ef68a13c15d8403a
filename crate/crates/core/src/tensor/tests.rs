use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::rng;

/// Reference convolution: a direct six-nested-loop evaluation of
/// out[b,co,oh,ow] = bias[co] + sum_{ci,kh,kw} k[co,ci,kh,kw] * x[...].
/// Written first and kept independent of the optimized kernel it checks.
fn loop_nest_conv(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    mask: Option<&Tensor>,
    padding: Padding,
) -> Tensor {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ph, pw, oh, ow) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
    };
    let mut out = Tensor::zeros(vec![b, cout, oh, ow]);
    for bi in 0..b {
        for co in 0..cout {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let ir = orow + khi;
                                let ic = ocol + kwi;
                                if ir < ph || ic < pw || ir - ph >= h || ic - pw >= w {
                                    continue;
                                }
                                let ki = ((co * cin + ci) * kh + khi) * kw + kwi;
                                let m = mask.map(|m| m.data()[ki]).unwrap_or(1.0);
                                acc += kernel.data()[ki] * m * x.at4(bi, ci, ir - ph, ic - pw);
                            }
                        }
                    }
                    let o = out.idx4(bi, co, orow, ocol);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|i| rng::stream_uniform(seed, &[i as u64], 1.0))
            .collect(),
    )
    .unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_identity_stencil_scaled() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0), false);
    let k = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), false);
    let b = g.leaf(Tensor::zeros(vec![1]), false);
    let out = g.conv2d(x, k, b, None, Padding::Same).unwrap();
    assert_eq!(g.value(out).shape(), [1, 1, 3, 3]);
    assert!(g.value(out).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_all_zero_mask_gives_bias_and_zero_kernel_grad() {
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(vec![2, 2, 4, 4], 3), false);
    let k = g.leaf(rand_tensor(vec![3, 2, 3, 3], 4), true);
    let b = g.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), false);
    let mask = Arc::new(Tensor::zeros(vec![3, 2, 3, 3]));
    let out = g.conv2d(x, k, b, Some(mask), Padding::Same).unwrap();
    for bi in 0..2 {
        for (co, want) in [0.5, -1.0, 2.0].iter().enumerate() {
            for r in 0..4 {
                for c in 0..4 {
                    assert_eq!(g.value(out).at4(bi, co, r, c), *want);
                }
            }
        }
    }
    let loss = g.sum(out);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(k).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_loop_nest_oracle() {
    let x = rand_tensor(vec![1, 2, 5, 5], 10);
    let k = rand_tensor(vec![3, 2, 3, 3], 11);
    let b = rand_tensor(vec![3], 12);
    for padding in [Padding::Same, Padding::Valid] {
        let want = loop_nest_conv(&x, &k, &b, None, padding);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false);
        let kn = g.leaf(k.clone(), false);
        let bn = g.leaf(b.clone(), false);
        let out = g.conv2d(xn, kn, bn, None, padding).unwrap();
        assert_eq!(g.value(out).shape(), want.shape());
        assert!(
            max_abs_diff(g.value(out), &want) < 1e-12,
            "optimized conv diverges from loop-nest oracle"
        );
    }
}

#[test]
fn conv_masked_matches_loop_nest_oracle() {
    let x = rand_tensor(vec![2, 3, 4, 6], 20);
    let k = rand_tensor(vec![4, 3, 3, 3], 21);
    let b = rand_tensor(vec![4], 22);
    let mask = Tensor::new(
        vec![4, 3, 3, 3],
        (0..4 * 3 * 3 * 3)
            .map(|i| (rng::stream_u64(23, &[i as u64]) % 2) as f64)
            .collect(),
    )
    .unwrap();
    let want = loop_nest_conv(&x, &k, &b, Some(&mask), Padding::Same);
    let mut g = Graph::new();
    let xn = g.leaf(x, false);
    let kn = g.leaf(k, false);
    let bn = g.leaf(b, false);
    let out = g
        .conv2d(xn, kn, bn, Some(Arc::new(mask)), Padding::Same)
        .unwrap();
    assert!(max_abs_diff(g.value(out), &want) < 1e-12);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![1, 2, 3, 3]), false);
    let k = g.leaf(Tensor::zeros(vec![1, 3, 1, 1]), false);
    let b = g.leaf(Tensor::zeros(vec![1]), false);
    let err = g.conv2d(x, k, b, None, Padding::Same).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension(_)), "{err}");
}

#[test]
fn conv_forward_is_bit_deterministic() {
    let x = rand_tensor(vec![2, 3, 6, 6], 30);
    let k = rand_tensor(vec![5, 3, 3, 3], 31);
    let b = rand_tensor(vec![5], 32);
    let run = || {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false);
        let kn = g.leaf(k.clone(), false);
        let bn = g.leaf(b.clone(), false);
        let out = g.conv2d(xn, kn, bn, None, Padding::Same).unwrap();
        g.value(out).clone()
    };
    let a = run();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let c = pool.install(run);
    assert!(a.bits_eq(&run()));
    assert!(a.bits_eq(&c), "thread count changed conv output bits");
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    // Subgradient at exactly 0 is 0.
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn add_zero_is_bit_identical() {
    let x = rand_tensor(vec![2, 3], 40);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), false);
    let zn = g.leaf(Tensor::zeros(vec![2, 3]), false);
    let y = g.add(xn, zn).unwrap();
    assert!(g.value(y).bits_eq(&x));
}

#[test]
fn mul_square_backward() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap(), true);
    let y = g.mul(x, x).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn elementwise_shape_mismatch_is_error() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(vec![2]), false);
    let b = g.leaf(Tensor::zeros(vec![3]), false);
    assert!(g.add(a, b).is_err());
    assert!(g.mul(a, b).is_err());
}

#[test]
fn softmax_xent_uniform_and_confident() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(vec![1, 256]), false);
    let (_, per_item) = g.softmax_xent(logits, &[7]).unwrap();
    assert!((g.value(per_item).data()[0] - 256f64.ln()).abs() < 1e-12);

    let mut g = Graph::new();
    let logits = g.leaf(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap(), false);
    let (_, per_item) = g.softmax_xent(logits, &[0]).unwrap();
    let want = (1.0 + (-10.0f64).exp()).ln();
    assert!((g.value(per_item).data()[0] - want).abs() < 1e-12);
}

#[test]
fn softmax_xent_target_out_of_range() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(vec![1, 4]), false);
    let err = g.softmax_xent(logits, &[4]).unwrap_err();
    assert!(matches!(err, crate::Error::Index(_)));
}

#[test]
fn softmax_xent_gradient_matches_finite_differences() {
    let logits = rand_tensor(vec![3, 5], 50);
    let targets = [2u16, 0, 4];
    let eval = |t: &Tensor| -> f64 {
        let mut g = Graph::new();
        let l = g.leaf(t.clone(), false);
        let (loss, _) = g.softmax_xent(l, &targets).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let l = g.leaf(logits.clone(), true);
    let (loss, _) = g.softmax_xent(l, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(l).unwrap();
    let h = 1e-5;
    let mut max_scale = 0f64;
    for v in analytic.data() {
        max_scale = max_scale.max(v.abs());
    }
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += h;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let rel = (fd - analytic.data()[i]).abs() / max_scale.max(1e-12);
        assert!(
            rel < 1e-6,
            "slot {i}: fd {fd} vs analytic {}",
            analytic.data()[i]
        );
    }
}

#[test]
fn strided_xent_matches_contiguous() {
    // [B, G*K, H, W] layout must agree with flat [rows, K] rows.
    let (b, gk, h, w, k) = (2usize, 6usize, 3usize, 2usize, 3usize);
    let logits = rand_tensor(vec![b, gk, h, w], 60);
    let rows = b * (gk / k) * h * w;
    let targets: Vec<u16> = (0..rows)
        .map(|i| (rng::stream_u64(61, &[i as u64]) % k as u64) as u16)
        .collect();
    let mut g = Graph::new();
    let ln = g.leaf(logits.clone(), false);
    let per = g.xent(ln, k, Arc::new(targets.clone())).unwrap();
    // Re-pack by hand into contiguous rows and compare.
    let gg = gk / k;
    let mut row_idx = 0;
    for bi in 0..b {
        for gi in 0..gg {
            for r in 0..h {
                for c in 0..w {
                    let row: Vec<f64> =
                        (0..k).map(|kk| logits.at4(bi, gi * k + kk, r, c)).collect();
                    let mut g2 = Graph::new();
                    let l2 = g2.leaf(Tensor::new(vec![1, k], row).unwrap(), false);
                    let (_, pi) = g2.softmax_xent(l2, &[targets[row_idx]]).unwrap();
                    let want = g2.value(pi).data()[0];
                    let got = g.value(per).data()[row_idx];
                    assert_eq!(got.to_bits(), want.to_bits());
                    row_idx += 1;
                }
            }
        }
    }
}

#[test]
fn rmsprop_zero_gradient_leaves_params() {
    let mut params = BTreeMap::new();
    params.insert(
        "w".to_string(),
        Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
    );
    let before = params["w"].clone();
    let zero = Tensor::zeros(vec![2]);
    let grads = BTreeMap::from([("w".to_string(), &zero)]);
    let mut state = RmsPropState::new();
    rmsprop_step(&mut params, &grads, &mut state, 0.1, 0.9, 1e-8).unwrap();
    assert!(params["w"].bits_eq(&before));
}

#[test]
fn rmsprop_single_step_matches_scalar_oracle() {
    // Scalar oracle, computed inline from the update rule.
    let (p0, g0, lr, decay, eps) = (1.0f64, 1.0f64, 0.1f64, 0.9f64, 1e-8f64);
    let acc = (1.0 - decay) * g0 * g0;
    let want = p0 - lr * g0 / (acc + eps).sqrt();
    assert!((want - 0.68377).abs() < 1e-5, "oracle itself: {want}");

    let mut params = BTreeMap::new();
    params.insert("p".to_string(), Tensor::new(vec![1], vec![p0]).unwrap());
    let g = Tensor::new(vec![1], vec![g0]).unwrap();
    let grads = BTreeMap::from([("p".to_string(), &g)]);
    let mut state = RmsPropState::new();
    rmsprop_step(&mut params, &grads, &mut state, lr, decay, eps).unwrap();
    assert_eq!(params["p"].data()[0].to_bits(), want.to_bits());
    assert!((state.acc["p"].data()[0] - 0.1).abs() < 1e-15);
}

#[test]
fn rmsprop_accumulator_grows_and_steps_shrink() {
    let mut params = BTreeMap::new();
    params.insert("p".to_string(), Tensor::new(vec![1], vec![0.0]).unwrap());
    let g = Tensor::new(vec![1], vec![1.0]).unwrap();
    let mut state = RmsPropState::new();
    let mut prev_p = 0.0;
    let mut prev_acc = 0.0;
    let mut prev_step = f64::INFINITY;
    for _ in 0..5 {
        let grads = BTreeMap::from([("p".to_string(), &g)]);
        rmsprop_step(&mut params, &grads, &mut state, 0.1, 0.9, 1e-8).unwrap();
        let p = params["p"].data()[0];
        let acc = state.acc["p"].data()[0];
        let step = (p - prev_p).abs();
        assert!(acc > prev_acc, "accumulator must strictly increase");
        assert!(step < prev_step, "step magnitude must strictly decrease");
        prev_p = p;
        prev_acc = acc;
        prev_step = step;
    }
}

#[test]
fn rmsprop_rejects_non_finite_gradient() {
    let mut params = BTreeMap::new();
    params.insert(
        "layer.weight".to_string(),
        Tensor::new(vec![1], vec![1.0]).unwrap(),
    );
    let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
    let grads = BTreeMap::from([("layer.weight".to_string(), &g)]);
    let mut state = RmsPropState::new();
    let err = rmsprop_step(&mut params, &grads, &mut state, 0.1, 0.9, 1e-8).unwrap_err();
    assert!(err.to_string().contains("layer.weight"), "{err}");
    assert_eq!(
        params["layer.weight"].data()[0],
        1.0,
        "params must be untouched"
    );
}

#[test]
fn bias_embed_adds_rows_and_routes_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2, 2, 1, 2]), false);
    let table = g.leaf(
        Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        true,
    );
    let out = g.bias_embed(x, table, Arc::new(vec![2, 0])).unwrap();
    assert_eq!(
        g.value(out).data(),
        &[5.0, 5.0, 6.0, 6.0, 1.0, 1.0, 2.0, 2.0]
    );
    let loss = g.sum(out);
    let grads = g.backward(loss).unwrap();
    // Row 2 and row 0 each receive 2 spatial positions per channel.
    assert_eq!(
        grads.get(table).unwrap().data(),
        &[2.0, 2.0, 0.0, 0.0, 2.0, 2.0]
    );
}

#[test]
fn patch_split_round_trips_through_backward() {
    let x = rand_tensor(vec![1, 2, 4, 4], 70);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), true);
    let p = g.patch_split(xn, 2).unwrap();
    assert_eq!(g.value(p).shape(), [4, 2, 2, 2]);
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    // A permutation followed by sum gives gradient 1 everywhere.
    assert!(grads.get(xn).unwrap().data().iter().all(|&v| v == 1.0));
    // Patch (0,1) of channel 1 holds columns 2..4 of rows 0..2.
    assert_eq!(g.value(p).at4(1, 1, 0, 0), x.at4(0, 1, 0, 2));
    assert_eq!(g.value(p).at4(1, 1, 1, 1), x.at4(0, 1, 1, 3));
}

proptest! {
    #[test]
    fn prop_masked_kernel_gradients_annihilate(seed in 0u64..500) {
        let cin = 1 + (seed as usize % 3);
        let cout = 1 + (seed as usize % 2);
        let x = rand_tensor(vec![1, cin, 4, 4], seed.wrapping_add(1));
        let k = rand_tensor(vec![cout, cin, 3, 3], seed.wrapping_add(2));
        let b = rand_tensor(vec![cout], seed.wrapping_add(3));
        let mask = Tensor::new(
            vec![cout, cin, 3, 3],
            (0..cout * cin * 9)
                .map(|i| (rng::stream_u64(seed, &[99, i as u64]) % 2) as f64)
                .collect(),
        ).unwrap();
        let mut g = Graph::new();
        let xn = g.leaf(x, false);
        let kn = g.leaf(k, true);
        let bn = g.leaf(b, false);
        let out = g.conv2d(xn, kn, bn, Some(Arc::new(mask.clone())), Padding::Same).unwrap();
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        for (gv, mv) in grads.get(kn).unwrap().data().iter().zip(mask.data()) {
            if *mv == 0.0 {
                prop_assert_eq!(*gv, 0.0);
            }
        }
    }
}

#[test]
fn conv_input_gradient_matches_finite_differences() {
    let x = rand_tensor(vec![1, 2, 4, 4], 80);
    let k = rand_tensor(vec![2, 2, 3, 3], 81);
    let b = rand_tensor(vec![2], 82);
    let eval = |xt: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xn = g.leaf(xt.clone(), false);
        let kn = g.leaf(k.clone(), false);
        let bn = g.leaf(b.clone(), false);
        let out = g.conv2d(xn, kn, bn, None, Padding::Same).unwrap();
        let r = g.relu(out);
        let s = g.sum(r);
        g.value(s).item()
    };
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), true);
    let kn = g.leaf(k.clone(), false);
    let bn = g.leaf(b.clone(), false);
    let out = g.conv2d(xn, kn, bn, None, Padding::Same).unwrap();
    let r = g.relu(out);
    let loss = g.sum(r);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(xn).unwrap();
    let scale = analytic.data().iter().fold(0f64, |a, v| a.max(v.abs()));
    let h = 1e-6;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        assert!(
            (fd - analytic.data()[i]).abs() / scale.max(1e-12) < 1e-6,
            "slot {i}"
        );
    }
}
