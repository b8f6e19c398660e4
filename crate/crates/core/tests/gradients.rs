//! Analytic gradients against central finite differences.

mod common;

use common::*;
use ptvseg::loss::{bce_loss, dice_loss, loss_from_logits, LossKind};
use ptvseg::tensor::*;
use ptvseg::unet::{build_unet, UNetConfig};
use rand::Rng;

const H: f64 = 1e-6;
const LAYER_TOL: f64 = 1e-4;
/// Losses are smooth and small, so a larger step keeps rounding noise down.
const LOSS_H: f64 = 1e-5;

fn check_conv(seed: u64, padding: Padding) {
    let mut r = rng(seed);
    let c_in = r.random_range(1..=3);
    let c_out = r.random_range(1..=3);
    let k = if r.random_bool(0.3) { 1 } else { 3 };
    let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
    let x = rand_tensor(&mut r, &[c_in, h, w]);
    let kern = rand_kernel(&mut r, c_out, c_in, k, k);
    let out = conv2d_forward(&x, &kern, padding).unwrap();
    let probe = rand_tensor(&mut r, out.shape());
    let (gx, gw, gb) = conv2d_backward(&x, &kern, &probe, padding).unwrap();

    let nx = numeric_grad(&x, H, |t| dot(&conv2d_forward(t, &kern, padding).unwrap(), &probe));
    let nw = numeric_grad(&kern.weights, H, |t| {
        let k2 = ConvKernel::new(t.clone(), kern.bias.clone()).unwrap();
        dot(&conv2d_forward(&x, &k2, padding).unwrap(), &probe)
    });
    let nb = numeric_grad(&kern.bias, H, |t| {
        let k2 = ConvKernel::new(kern.weights.clone(), t.clone()).unwrap();
        dot(&conv2d_forward(&x, &k2, padding).unwrap(), &probe)
    });
    assert!(max_rel_err(gx.data(), &nx) < LAYER_TOL, "conv input, seed {seed}");
    assert!(max_rel_err(gw.data(), &nw) < LAYER_TOL, "conv weights, seed {seed}");
    assert!(max_rel_err(gb.data(), &nb) < LAYER_TOL, "conv bias, seed {seed}");
}

#[test]
fn conv_same_gradients() {
    for seed in 0..30 {
        check_conv(seed, Padding::Same);
    }
}

#[test]
fn conv_valid_gradients() {
    for seed in 100..130 {
        check_conv(seed, Padding::Valid);
    }
}

#[test]
fn upconv_gradients() {
    for seed in 200..220 {
        let mut r = rng(seed);
        let (c_in, c_out) = (r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let x = rand_tensor(&mut r, &[c_in, h, w]);
        let kern = rand_kernel(&mut r, c_out, c_in, 2, 2);
        let probe = rand_tensor(&mut r, &[c_out, 2 * h, 2 * w]);
        let (gx, gw, gb) = upconv2x2_backward(&x, &kern, &probe).unwrap();
        let nx = numeric_grad(&x, H, |t| dot(&upconv2x2_forward(t, &kern).unwrap(), &probe));
        let nw = numeric_grad(&kern.weights, H, |t| {
            let k2 = ConvKernel::new(t.clone(), kern.bias.clone()).unwrap();
            dot(&upconv2x2_forward(&x, &k2).unwrap(), &probe)
        });
        let nb = numeric_grad(&kern.bias, H, |t| {
            let k2 = ConvKernel::new(kern.weights.clone(), t.clone()).unwrap();
            dot(&upconv2x2_forward(&x, &k2).unwrap(), &probe)
        });
        assert!(max_rel_err(gx.data(), &nx) < LAYER_TOL);
        assert!(max_rel_err(gw.data(), &nw) < LAYER_TOL);
        assert!(max_rel_err(gb.data(), &nb) < LAYER_TOL);
    }
}

#[test]
fn maxpool_gradients() {
    for seed in 300..320 {
        let mut r = rng(seed);
        let c = r.random_range(1..=3);
        let (h, w) = (2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
        // A shuffled ramp keeps every window's maximum well separated.
        let mut vals: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut r);
        let x = Tensor::new(vec![c, h, w], vals).unwrap();
        let (out, idx) = maxpool2x2_forward(&x).unwrap();
        let probe = rand_tensor(&mut r, out.shape());
        let g = maxpool2x2_backward(&idx, &probe).unwrap();
        let n = numeric_grad(&x, H, |t| dot(&maxpool2x2_forward(t).unwrap().0, &probe));
        assert!(max_rel_err(g.data(), &n) < LAYER_TOL);
    }
}

#[test]
fn relu_and_sigmoid_gradients() {
    for seed in 400..410 {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[2, 3, 4], |_| {
            let m: f64 = r.random_range(0.05..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let probe = rand_tensor(&mut r, x.shape());
        let g = relu_backward(&x, &probe).unwrap();
        let n = numeric_grad(&x, H, |t| dot(&relu_forward(t), &probe));
        assert!(max_rel_err(g.data(), &n) < LAYER_TOL);

        let s = sigmoid_forward(&x);
        let g = sigmoid_backward(&s, &probe).unwrap();
        let n = numeric_grad(&x, H, |t| dot(&sigmoid_forward(t), &probe));
        assert!(max_rel_err(g.data(), &n) < LAYER_TOL);
    }
}

#[test]
fn concat_crop_gradients() {
    for seed in 500..510 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let (dh, dw) = (r.random_range(0..=3), r.random_range(0..=3));
        let a = rand_tensor(&mut r, &[2, h, w]);
        let b = rand_tensor(&mut r, &[3, h + dh, w + dw]);
        let probe = rand_tensor(&mut r, &[5, h, w]);
        let (ga, gb) = concat_channels_backward(&probe, 2, [3, h + dh, w + dw]).unwrap();
        let na = numeric_grad(&a, H, |t| dot(&concat_channels(t, &b).unwrap(), &probe));
        let nb = numeric_grad(&b, H, |t| dot(&concat_channels(&a, t).unwrap(), &probe));
        assert!(max_rel_err(ga.data(), &na) < LAYER_TOL);
        assert!(max_rel_err(gb.data(), &nb) < LAYER_TOL);
    }
}

fn probabilities(r: &mut rand_pcg::Pcg64, n: usize) -> Tensor {
    Tensor::from_fn(&[1, n], |_| r.random_range(0.05..0.95))
}

fn binary(r: &mut rand_pcg::Pcg64, n: usize) -> Tensor {
    Tensor::from_fn(&[1, n], |_| f64::from(u8::from(r.random_bool(0.4))))
}

#[test]
fn bce_gradients() {
    for seed in 600..630 {
        let mut r = rng(seed);
        let n = r.random_range(1..=40);
        let (p, y) = (probabilities(&mut r, n), binary(&mut r, n));
        let g = bce_loss(&p, &y).unwrap().grad;
        let num = numeric_grad(&p, LOSS_H, |t| bce_loss(t, &y).unwrap().value);
        assert!(max_rel_err(g.data(), &num) < 1e-6, "seed {seed}");
    }
}

#[test]
fn dice_gradients() {
    for seed in 700..730 {
        let mut r = rng(seed);
        let n = r.random_range(1..=40);
        let (p, y) = (probabilities(&mut r, n), binary(&mut r, n));
        let g = dice_loss(&p, &y).unwrap().grad;
        let num = numeric_grad(&p, LOSS_H, |t| dice_loss(t, &y).unwrap().value);
        assert!(max_rel_err(g.data(), &num) < 1e-5, "seed {seed}");
    }
}

#[test]
fn fused_logit_losses_match_finite_differences() {
    for seed in 800..820 {
        let mut r = rng(seed);
        let n = r.random_range(1..=30);
        let z = Tensor::from_fn(&[1, n], |_| r.random_range(-6.0..6.0));
        let y = binary(&mut r, n);
        for (kind, tol) in [(LossKind::Bce, 1e-6), (LossKind::Dice, 1e-5)] {
            let g = loss_from_logits(&z, &y, kind).unwrap().grad;
            let num = numeric_grad(&z, LOSS_H, |t| loss_from_logits(t, &y, kind).unwrap().value);
            assert!(max_rel_err(g.data(), &num) < tol, "{kind} seed {seed}");
        }
    }
}

#[test]
fn fused_logit_losses_match_composed_path() {
    for seed in 900..940 {
        let mut r = rng(seed);
        let n = r.random_range(1..=30);
        let z = Tensor::from_fn(&[1, n], |_| r.random_range(-20.0..20.0));
        let y = binary(&mut r, n);
        let p = sigmoid_forward(&z);
        for kind in [LossKind::Bce, LossKind::Dice] {
            let fused = loss_from_logits(&z, &y, kind).unwrap();
            let plain = ptvseg::loss::loss(kind, &p, &y).unwrap();
            let chained = sigmoid_backward(&p, &plain.grad).unwrap();
            // The composed path loses digits in 1 - p as p approaches 1.
            assert!((fused.value - plain.value).abs() <= 1e-10 * fused.value.abs().max(1.0));
            for (a, b) in fused.grad.data().iter().zip(chained.data()) {
                assert!(
                    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12),
                    "{kind} seed {seed}: {a} vs {b}"
                );
            }
        }
    }
}

fn check_unet(seed: u64, config: UNetConfig, size: usize) {
    let mut model = build_unet(config, seed).unwrap();
    let mut r = rng(seed);
    // Zero biases put dead regions exactly on the ReLU kink; move off it.
    for layer in &mut model.layers {
        layer.bias = Tensor::from_fn(layer.bias.shape(), |_| r.random_range(-0.1..0.1));
    }
    let x = Tensor::from_fn(&[1, size, size], |_| r.random_range(0.0..1.0));
    let (p, cache) = model.forward(&x).unwrap();
    let probe = rand_tensor(&mut r, p.shape());
    let grads = model.backward(&cache, &probe).unwrap();
    let mut bad = 0;
    for (li, layer) in model.layers.iter().enumerate() {
        for (which, param, analytic) in [
            ("weights", &layer.weights, &grads.layers[li].weights),
            ("bias", &layer.bias, &grads.layers[li].bias),
        ] {
            // Every entry for small layers, an evenly spaced sample for larger ones.
            let stride = (param.len() / 12).max(1);
            for i in (0..param.len()).step_by(stride) {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let t = if which == "weights" {
                        &mut m.layers[li].weights
                    } else {
                        &mut m.layers[li].bias
                    };
                    t.data_mut()[i] += delta;
                    dot(&m.forward(&x).unwrap().0, &probe)
                };
                let num = (eval(H) - eval(-H)) / (2.0 * H);
                let a = analytic.data()[i];
                if !(rel_err(a, num) < LAYER_TOL || (a - num).abs() < 1e-9) {
                    eprintln!("layer {li} {which}[{i}]: analytic {a} numeric {num}");
                    bad += 1;
                }
            }
        }
    }
    assert_eq!(bad, 0);
}

#[test]
fn unet_same_padding_gradients() {
    let config = UNetConfig {
        base_channels: 2,
        depth: 2,
        ..UNetConfig::default()
    };
    for seed in 0..3 {
        check_unet(seed, config, 8);
    }
}

#[test]
fn unet_valid_padding_gradients() {
    let config = UNetConfig {
        base_channels: 2,
        depth: 1,
        padding: Padding::Valid,
        ..UNetConfig::default()
    };
    for seed in 10..12 {
        check_unet(seed, config, 20);
    }
}
