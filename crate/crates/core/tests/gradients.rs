mod common;

use common::{network_loss, perturb_norms, random_labels, random_tensor};
use gradbench::nn::{MicroResNet, MicroResNetConfig, Mode};
use gradbench::tensor::kernels::{conv2d_backward, conv2d_forward, matmul};
use gradbench::tensor::{grad_check, Tape, Tensor};
use gradbench::trainer::bce_value;


fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * f * oh * ow];
    for n in 0..b {
        for o in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * c + ch) * h + y as usize) * wd + xx as usize;
                                let wi = ((o * c + ch) * kh + u) * kw + v;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((n * f + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, f, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_matches_naive_loops() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 3), (2, 2, 3)] {
        let x = random_tensor(&[2, 3, 7, 6], -1.0, 1.0, 1);
        let w = random_tensor(&[4, 3, k, k], -1.0, 1.0, 2);
        let fast = conv2d_forward(&x, &w, stride, pad).unwrap();
        let slow = naive_conv(&x, &w, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(max_abs_diff(fast.data(), slow.data()) < 1e-12);
    }
}

#[test]
fn conv_backward_is_the_adjoint() {
    // <conv(x, w), g> is bilinear, so its partials are exactly the backward outputs.
    let x = random_tensor(&[2, 2, 5, 5], -1.0, 1.0, 3);
    let w = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, 4);
    let y = naive_conv(&x, &w, 2, 1);
    let g = random_tensor(y.shape(), -1.0, 1.0, 5);
    let (dx, dw) = conv2d_backward(&x, &w, &g, 2, 1, true, true).unwrap();
    let (dx, dw) = (dx.unwrap(), dw.unwrap());
    let pairing = |x: &Tensor, w: &Tensor| -> f64 {
        naive_conv(x, w, 2, 1).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    for i in 0..x.len() {
        let mut e = Tensor::zeros(x.shape());
        e.data_mut()[i] = 1.0;
        assert!((pairing(&e, &w) - dx.data()[i]).abs() < 1e-12);
    }
    for i in 0..w.len() {
        let mut e = Tensor::zeros(w.shape());
        e.data_mut()[i] = 1.0;
        assert!((pairing(&x, &e) - dw.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn matmul_matches_naive_loops() {
    let a = random_tensor(&[5, 7], -2.0, 2.0, 6);
    let b = random_tensor(&[7, 3], -2.0, 2.0, 7);
    let c = matmul(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let expect: f64 = (0..7).map(|k| a.data()[i * 7 + k] * b.data()[k * 3 + j]).sum();
            assert!((c.data()[i * 3 + j] - expect).abs() < 1e-12);
        }
    }
    assert!(matmul(&a, &a).is_err());
}

#[test]
fn network_graph_matches_model_forward() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut model = MicroResNet::new(common::small_config(), 3).unwrap();
        perturb_norms(&mut model, 4);
        model.set_mode(mode);
        let images = random_tensor(&[3, 1, 8, 8], -1.5, 1.5, 5);
        let labels = random_labels(3, 14, 6);
        let (params, f) = network_loss(&model, images.clone(), labels.clone());
        let mut tape = Tape::new();
        let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f(&mut tape, &leaves).unwrap();
        let direct = bce_value(&model.predict(&images).unwrap(), &labels).unwrap();
        assert_eq!(tape.value(loss).item(), Some(direct));
    }
}

#[test]
fn small_network_eval_mode_passes_grad_check() {
    let err = common::network_grad_check(&common::small_config(), 1, Mode::Eval, 2, 1e-5, None);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn small_network_train_mode_passes_grad_check() {
    let err = common::network_grad_check(&common::small_config(), 1, Mode::Train, 3, 1e-5, None);
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn default_network_passes_grad_check_on_sampled_coordinates() {
    let err = common::network_grad_check(&MicroResNetConfig::default(), 1, Mode::Eval, 2, 1e-6, Some(97));
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn every_layer_passes_grad_check() {
    for (name, params, f) in common::layer_cases() {
        let err = grad_check(&f, &params, 1e-5).unwrap();
        eprintln!("{name}: {err:e}");
        assert!(err < 1e-5, "{name}: {err:e}");
    }
}
