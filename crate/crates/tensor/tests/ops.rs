use mtuc_tensor::{Graph, LayerKind, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct convolution: six nested loops over output position and kernel tap.
fn conv_oracle(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, cin, h, w] = x.shape().try_into().unwrap();
    let [cout, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bb in 0..b {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let c = (j * stride + v) as isize - pad as isize;
                                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((co * cin + ci) * kh + u) * kw + v]
                                    * x.data()[((bb * cin + ci) * h + r as usize) * w + c as usize];
                            }
                        }
                    }
                    out[((bb * cout + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![b, cout, oh, ow], out)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(1);
    let x = Tensor::uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let k = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv_matches_direct_oracle() {
    let mut r = rng(7);
    let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let bias = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.input(x.clone()), g.input(k.clone()), g.input(bias.clone()));
        let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
        let (shape, want) = conv_oracle(&x, &k, bias.data(), stride, pad);
        assert_eq!(g.value(y).shape(), &shape[..]);
        assert_close(g.value(y).data(), &want, 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let k = g.input(Tensor::zeros(&[2, 2, 3, 3]));
    let b = g.input(Tensor::zeros(&[2]));
    let err = g.conv2d(x, k, b, 1, 1).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
    assert!(err.to_string().contains("3 channels"), "{err}");
}

#[test]
fn depthwise_separable_identity() {
    let mut r = rng(2);
    let x = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
    let mut dk = Tensor::zeros(&[3, 1, 3, 3]);
    for c in 0..3 {
        dk.data_mut()[c * 9 + 4] = 1.0;
    }
    let mut pk = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        pk.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, dv, pv, bv) = (g.input(x.clone()), g.input(dk), g.input(pk), g.input(Tensor::zeros(&[3])));
    let y = g.depthwise_separable_conv2d(xv, dv, pv, bv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn depthwise_separable_matches_composed_standard_convs() {
    let mut r = rng(3);
    let x = Tensor::uniform(&[1, 2, 5, 6], -1.0, 1.0, &mut r);
    let dk = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let pk = Tensor::uniform(&[2, 2, 1, 1], -1.0, 1.0, &mut r);
    let bias = Tensor::uniform(&[2], -1.0, 1.0, &mut r);

    // depthwise kernel expanded to a block-diagonal standard kernel
    let mut full = Tensor::zeros(&[2, 2, 3, 3]);
    for c in 0..2 {
        for t in 0..9 {
            full.data_mut()[(c * 2 + c) * 9 + t] = dk.data()[c * 9 + t];
        }
    }
    let (s1, spatial) = conv_oracle(&x, &full, &[0.0, 0.0], 1, 1);
    let spatial = Tensor::new(&s1, spatial).unwrap();
    let (_, want) = conv_oracle(&spatial, &pk, bias.data(), 1, 0);

    let mut g = Graph::new();
    let (xv, dv, pv, bv) = (g.input(x), g.input(dk), g.input(pk), g.input(bias));
    let y = g.depthwise_separable_conv2d(xv, dv, pv, bv).unwrap();
    assert_close(g.value(y).data(), &want, 1e-12);
}

#[test]
fn depthwise_separable_mac_count() {
    // 8 -> 8 channels, 3x3, 16x16 map
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 8, 16, 16]));
    let dk = g.input(Tensor::zeros(&[8, 1, 3, 3]));
    let pk = g.input(Tensor::zeros(&[8, 8, 1, 1]));
    let b = g.input(Tensor::zeros(&[8]));
    g.depthwise_separable_conv2d(x, dk, pk, b).unwrap();
    let ds_macs = g.macs();
    assert_eq!(ds_macs, (8 * 9 + 8 * 8) * 256);
    assert_eq!(ds_macs, 34816);

    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 8, 16, 16]));
    let k = g.input(Tensor::zeros(&[8, 8, 3, 3]));
    let b = g.input(Tensor::zeros(&[8]));
    g.conv2d(x, k, b, 1, 1).unwrap();
    assert_eq!(g.macs(), 147456);
    assert!((ds_macs as f64) / (g.macs() as f64) < 0.25);
}

#[test]
fn depthwise_separable_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let dk = g.input(Tensor::zeros(&[2, 1, 3, 3]));
    let pk = g.input(Tensor::zeros(&[2, 2, 1, 1]));
    let b = g.input(Tensor::zeros(&[2]));
    assert!(g.depthwise_separable_conv2d(x, dk, pk, b).is_err());
}

#[test]
fn global_avg_pool_constant_channels() {
    let mut data = Vec::new();
    for c in 0..3 {
        data.extend(std::iter::repeat_n(c as f64, 16));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 3, 4, 4], data).unwrap());
    let y = g.eval_layer(LayerKind::GlobalAvgPool, &[x]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3]);
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3]));
    let y = g.eval_layer(LayerKind::Softmax, &[x]).unwrap();
    assert_close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn maxpool_then_upsample_is_block_max() {
    let mut r = rng(4);
    let x = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let p = g.eval_layer(LayerKind::MaxPool2, &[xv]).unwrap();
    let u = g.eval_layer(LayerKind::Upsample2Nearest, &[p]).unwrap();
    let out = g.value(u).data();
    for bi in 0..2 {
        for bj in 0..2 {
            let mut m = f64::NEG_INFINITY;
            for i in 0..2 {
                for j in 0..2 {
                    m = m.max(x.data()[(2 * bi + i) * 4 + 2 * bj + j]);
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(out[(2 * bi + i) * 4 + 2 * bj + j], m);
                }
            }
        }
    }
}

#[test]
fn layer_shape_errors() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let b = g.input(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.eval_layer(LayerKind::ConcatChannels, &[a, b]).is_err());
    assert!(g.eval_layer(LayerKind::ResidualAdd, &[a, b]).is_err());
    let odd = g.input(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(g.eval_layer(LayerKind::MaxPool2, &[odd]).is_err());
    assert!(g.eval_layer(LayerKind::Dropout { rate: 1.0, train: true }, &[a]).is_err());
    assert!(g.eval_layer(LayerKind::Dropout { rate: -0.1, train: false }, &[a]).is_err());
}

#[test]
fn dropout_is_identity_when_not_training() {
    let mut g = Graph::with_seed(5);
    let x = g.input(Tensor::full(&[2, 8], 1.5));
    let y = g.eval_layer(LayerKind::Dropout { rate: 0.5, train: false }, &[x]).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let z = g.eval_layer(LayerKind::Dropout { rate: 0.5, train: true }, &[x]).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0 || v == 3.0));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2, 3], 0.7));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut g = Graph::new();
    let w = g.input(Tensor::scalar(0.0));
    let s = g.sigmoid(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[0.25]);
}

#[test]
fn backward_twice_accumulates() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[3], 2.0));
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[8.0; 3]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0; 3]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar() {
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let x = g1.input(Tensor::scalar(1.0));
    let _ = g2.input(Tensor::scalar(1.0));
    assert!(matches!(g2.backward(x), Err(TensorError::ForeignVar)));
    let v = g1.input(Tensor::zeros(&[2]));
    assert!(matches!(g1.backward(v), Err(TensorError::NotScalar(_))));
    let mut ng = Graph::no_grad(0);
    let y = ng.input(Tensor::scalar(1.0));
    let z = ng.sigmoid(y).unwrap();
    assert!(matches!(ng.backward(z), Err(TensorError::TrackingDisabled)));
}

#[test]
fn param_grads_reach_param_set() {
    use mtuc_tensor::ParamSet;
    let mut params = ParamSet::new();
    let id = params.insert("w", Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
    let mut g = Graph::new();
    let w = g.param(&params, id);
    let sq = g.square(w).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    g.accumulate_param_grads(&mut params);
    assert_eq!(params.get(id).grad().unwrap(), &[2.0, -6.0]);
}

/// Tracking on and off run the same kernels; outputs must match bit for bit.
#[test]
fn no_grad_forward_is_bitwise_identical() {
    let mut r = rng(9);
    let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
    let run = |g: &mut Graph| -> Var {
        let (xv, kv, bv) = (g.input(x.clone()), g.input(k.clone()), g.input(b.clone()));
        let c = g.conv2d(xv, kv, bv, 1, 1).unwrap();
        let r = g.relu(c).unwrap();
        let p = g.maxpool2(r).unwrap();
        let s = g.sigmoid(p).unwrap();
        g.global_avg_pool(s).unwrap()
    };
    let mut on = Graph::new();
    let mut off = Graph::no_grad(0);
    let a = run(&mut on);
    let c = run(&mut off);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(on.value(a)), bits(off.value(c)));
}

#[test]
fn relu_and_maxpool_propagate_nan() {
    let mut g = Graph::no_grad(0);
    let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, f64::NAN, -2.0, 0.5]).unwrap());
    let r = g.relu(x).unwrap();
    assert!(g.value(r).data()[1].is_nan());
    assert_eq!(g.value(r).data()[2], 0.0);
    let p = g.maxpool2(r).unwrap();
    assert!(g.value(p).item().is_nan());
}

#[test]
fn log_sigmoid_keeps_precision_when_saturated() {
    let mut g = Graph::no_grad(0);
    let x = g.input(Tensor::new(&[4], vec![-800.0, -20.0, 0.0, 20.0]).unwrap());
    let y = g.log_sigmoid(x, 1e-12).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 1e-12f64.ln());
    assert!((v[1] - (-20.0 - (-20f64).exp().ln_1p())).abs() < 1e-14);
    assert!((v[2] + 2f64.ln()).abs() < 1e-15);
    // -ln(1 + e) by its series, e = exp(-20)
    let e = (-20f64).exp();
    let expect = -(e - e * e / 2.0 + e * e * e / 3.0);
    assert!(((v[3] - expect) / expect).abs() < 1e-15);
}
