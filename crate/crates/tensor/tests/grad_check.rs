//! Finite-difference verification of every differentiable primitive, plus
//! second-order (backward-through-backward) checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_tensor::{nn, ops, Tensor};

fn randu(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(data, shape)
}

/// Central finite differences of `f` w.r.t. `x`, compared against the
/// analytic gradient of `f(x)` from the tape.
fn check_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Tensor<f64>, tol: f64) {
    let x = x.detach().requires_grad();
    let loss = f(&x);
    let grads = loss.backward(false);
    let analytic = grads.grad(&x).expect("no gradient for input").to_vec();

    let h = 1e-5;
    let base = x.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        x.set_data(&plus);
        let lp = f(&x).item();
        let mut minus = base.clone();
        minus[i] -= h;
        x.set_data(&minus);
        let lm = f(&x).item();
        x.set_data(&base);
        let fd = (lp - lm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
        let rel = (analytic[i] - fd).abs() / denom;
        assert!(
            rel < tol,
            "grad mismatch at {i}: analytic {} vs fd {} (rel {rel:.3e})",
            analytic[i],
            fd
        );
    }
}

#[test]
fn elementwise_binary_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let a = randu(&[3, 4], -2.0, 2.0, &mut rng);
    let b = randu(&[3, 4], 0.5, 2.0, &mut rng);
    check_grad(&a, |x| ops::mean_all(&ops::add(x, &b)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::sub(&b, x)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::mul(x, &b)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::div(x, &b)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::div(&b, &ops::add_scalar(&ops::mul(x, x), 1.0))), 1e-6);
}

#[test]
fn elementwise_unary_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let a = randu(&[2, 5], 0.2, 1.8, &mut rng);
    let signed = randu(&[2, 5], -2.0, 2.0, &mut rng);
    check_grad(&a, |x| ops::mean_all(&ops::exp(x)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::ln(x)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::sqrt(x)), 1e-6);
    check_grad(&signed, |x| ops::mean_all(&ops::tanh(x)), 1e-6);
    check_grad(&signed, |x| ops::mean_all(&ops::sigmoid(x)), 1e-6);
    check_grad(&signed, |x| ops::mean_all(&ops::abs(x)), 1e-5);
    check_grad(&signed, |x| ops::mean_all(&ops::powi(x, 3)), 1e-6);
    check_grad(&signed, |x| ops::mean_all(&ops::leaky_relu(x, 0.01)), 1e-5);
    check_grad(&signed, |x| ops::mean_all(&ops::neg(x)), 1e-6);
    check_grad(&signed, |x| ops::mean_all(&ops::clamp(x, -1.5, 1.5)), 1e-5);
}

#[test]
fn matmul_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let a = randu(&[3, 4], -1.0, 1.0, &mut rng);
    let b = randu(&[4, 2], -1.0, 1.0, &mut rng);
    let bt = randu(&[2, 4], -1.0, 1.0, &mut rng);
    let at = randu(&[4, 3], -1.0, 1.0, &mut rng);
    check_grad(&a, |x| ops::mean_all(&ops::matmul(x, &b)), 1e-6);
    check_grad(&b, |x| ops::mean_all(&ops::matmul(&a, x)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::matmul_nt(x, &bt)), 1e-6);
    check_grad(&bt, |x| ops::mean_all(&ops::matmul_nt(&a, x)), 1e-6);
    check_grad(&at, |x| ops::mean_all(&ops::matmul_tn(x, &b)), 1e-6);
    check_grad(&b, |x| ops::mean_all(&ops::matmul_tn(&at, x)), 1e-6);
}

#[test]
fn reduction_and_broadcast_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let x = randu(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::sum_axes(x, &[2, 3]), 2)), 1e-6);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::sum_axes(x, &[0, 2, 3]), 2)), 1e-6);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::sum_axes(x, &[1]), 2)), 1e-6);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::sum_axes(x, &[0, 2]), 2)), 1e-6);

    let s = randu(&[1, 3, 1, 1], -1.0, 1.0, &mut rng);
    check_grad(&s, |p| ops::mean_all(&ops::mul(&x, &ops::broadcast_to(p, x.shape()))), 1e-6);
    let s2 = randu(&[2, 3, 1, 1], -1.0, 1.0, &mut rng);
    check_grad(&s2, |p| ops::mean_all(&ops::mul(&x, &ops::broadcast_to(p, x.shape()))), 1e-6);
    let row = randu(&[1, 6], -1.0, 1.0, &mut rng);
    let y = randu(&[5, 6], -1.0, 1.0, &mut rng);
    check_grad(&row, |p| ops::mean_all(&ops::mul(&y, &ops::broadcast_to(p, y.shape()))), 1e-6);
    let sc = randu(&[1], -1.0, 1.0, &mut rng);
    check_grad(&sc, |p| ops::mean_all(&ops::mul(&y, &ops::broadcast_to(p, y.shape()))), 1e-6);
}

#[test]
fn fused_channel_op_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x = randu(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let s1 = randu(&[1, 3, 1, 1], 0.5, 1.5, &mut rng);
    let sn = randu(&[2, 3, 1, 1], 0.5, 1.5, &mut rng);
    check_grad(&x, |x| ops::mean_all(&ops::mul_nc(x, &s1)), 1e-6);
    check_grad(&s1, |p| ops::mean_all(&ops::mul_nc(&x, p)), 1e-6);
    check_grad(&sn, |p| ops::mean_all(&ops::mul_nc(&x, p)), 1e-6);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::add_nc(x, &sn), 2)), 1e-6);
    check_grad(&sn, |p| ops::mean_all(&ops::powi(&ops::add_nc(&x, p), 2)), 1e-6);
}

#[test]
fn shape_op_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let a = randu(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = randu(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    check_grad(&a, |x| {
        ops::mean_all(&ops::powi(&ops::concat_c(&[x, &b]), 2))
    }, 1e-6);
    check_grad(&b, |x| {
        ops::mean_all(&ops::powi(&ops::concat_c(&[&a, x]), 2))
    }, 1e-6);
    check_grad(&b, |x| ops::mean_all(&ops::powi(&ops::slice_c(x, 1, 2), 2)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::powi(&ops::scatter_c(x, 5, 2), 2)), 1e-6);
    check_grad(&a, |x| ops::mean_all(&ops::powi(&ops::reshape(x, &[4, 9]), 2)), 1e-6);
}

#[test]
fn conv_grads_and_adjoint_identities() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 1), (1, 3, 7)] {
        let x = randu(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let w = randu(&[4, 3, k, k], -0.5, 0.5, &mut rng);
        check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::conv2d(x, &w, stride, pad), 2)), 1e-5);
        check_grad(&w, |w| ops::mean_all(&ops::powi(&ops::conv2d(&x, w, stride, pad), 2)), 1e-5);

        // adjoint identity <C(x,w), g> == <x, I(g,w)> == <w, W(x,g)>
        let y = ops::conv2d(&x, &w, stride, pad);
        let g = randu(y.shape(), -1.0, 1.0, &mut rng);
        let ig = ops::conv2d_input_grad(&g, &w, stride, pad, (8, 8));
        let wg = ops::conv2d_weight_grad(&x, &g, stride, pad, (k, k));
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data().iter()).map(|(p, q)| p * q).sum()
        };
        let d1 = dot(&y, &g);
        let d2 = dot(&x, &ig);
        let d3 = dot(&w, &wg);
        assert!((d1 - d2).abs() < 1e-9 * d1.abs().max(1.0), "{d1} vs {d2}");
        assert!((d1 - d3).abs() < 1e-9 * d1.abs().max(1.0), "{d1} vs {d3}");
    }
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let (n, ci, co, h, w, k, stride, pad) = (2, 3, 4, 7, 6, 3, 2, 1);
    let x = randu(&[n, ci, h, w], -1.0, 1.0, &mut rng);
    let wt = randu(&[co, ci, k, k], -1.0, 1.0, &mut rng);
    let y = ops::conv2d(&x, &wt, stride, pad);
    let (ho, wo) = (y.shape()[2], y.shape()[3]);

    let xd = x.to_vec();
    let wd = wt.to_vec();
    let yd = y.to_vec();
    for img in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..k {
                            for j in 0..k {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                    let xv = xd[((img * ci + c) * h + ih as usize) * w + iw as usize];
                                    let wv = wd[((o * ci + c) * k + i) * k + j];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    let got = yd[((img * co + o) * ho + oh) * wo + ow];
                    assert!((acc - got).abs() < 1e-10, "naive {acc} vs conv {got}");
                }
            }
        }
    }
}

#[test]
fn transposed_conv_layer_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = randu(&[2, 4, 4, 4], -1.0, 1.0, &mut rng);
    let w = randu(&[4, 3, 4, 4], -0.5, 0.5, &mut rng);
    check_grad(&x, |x| {
        ops::mean_all(&ops::powi(&ops::conv2d_input_grad(x, &w, 2, 1, (8, 8)), 2))
    }, 1e-5);
    check_grad(&w, |w| {
        ops::mean_all(&ops::powi(&ops::conv2d_input_grad(&x, w, 2, 1, (8, 8)), 2))
    }, 1e-5);
}

#[test]
fn pool_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    let x = randu(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&ops::avg_pool2(x), 2)), 1e-6);
}

#[test]
fn instance_norm_and_softmax_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let x = randu(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let norm = nn::InstanceNorm2d::<f64>::new(3);
    check_grad(&x, |x| ops::mean_all(&ops::powi(&norm.forward(x), 2)), 1e-5);

    let logits = randu(&[3, 5], -2.0, 2.0, &mut rng);
    check_grad(&logits, |x| {
        ops::mean_all(&ops::powi(&nn::softmax_rows(x), 2))
    }, 1e-6);

    let v = randu(&[3, 6], -1.0, 1.0, &mut rng);
    check_grad(&v, |x| {
        ops::mean_all(&ops::powi(&nn::l2_normalize_rows(x), 3))
    }, 1e-5);
}

#[test]
fn second_order_polynomial() {
    // y = sum(x^3); z = sum((dy/dx)^2) = sum(9 x^4); dz/dx = 36 x^3.
    let x = Tensor::<f64>::from_vec(vec![0.5, -1.25, 2.0], &[3]).requires_grad();
    let y = ops::sum_all(&ops::powi(&x, 3));
    let g1 = y.backward(true);
    let gx = g1.grad(&x).unwrap();
    let z = ops::sum_all(&ops::powi(gx, 2));
    let g2 = z.backward(false);
    let gz = g2.grad(&x).unwrap().to_vec();
    for (i, &v) in x.to_vec().iter().enumerate() {
        let expect = 36.0 * v.powi(3);
        assert!((gz[i] - expect).abs() < 1e-9, "{} vs {expect}", gz[i]);
    }
}

#[test]
fn second_order_gradient_penalty_through_conv() {
    // Gradient-penalty shape: p(w) = (||d score/d x|| - 1)^2 for a small conv
    // net. Verify dp/dw against finite differences.
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let x = randu(&[1, 2, 6, 6], -1.0, 1.0, &mut rng).requires_grad();
    let w1 = randu(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let w2 = randu(&[1, 3, 3, 3], -0.5, 0.5, &mut rng);

    let penalty = |w1t: &Tensor<f64>, w2t: &Tensor<f64>| -> Tensor<f64> {
        let h = ops::leaky_relu(&ops::conv2d(&x, w1t, 1, 1), 0.01);
        let score = ops::mean_all(&ops::conv2d(&h, w2t, 1, 1));
        let grads = score.backward(true);
        let gx = grads.grad(&x).unwrap().clone();
        let norm = ops::sqrt(&ops::sum_all(&ops::powi(&gx, 2)));
        ops::powi(&ops::add_scalar(&norm, -1.0), 2)
    };

    for (which, shape) in [(0usize, [3usize, 2, 3, 3]), (1, [1, 3, 3, 3])] {
        let wvar = if which == 0 { w1.detach() } else { w2.detach() }.requires_grad();
        let f = |wt: &Tensor<f64>| {
            if which == 0 {
                penalty(wt, &w2)
            } else {
                penalty(&w1, wt)
            }
        };
        let loss = f(&wvar);
        let grads = loss.backward(false);
        let analytic = grads.grad(&wvar).expect("no second-order grad").to_vec();
        let h = 1e-5;
        let base = wvar.to_vec();
        let n_check = shape.iter().product::<usize>().min(20);
        for i in 0..n_check {
            let mut plus = base.clone();
            plus[i] += h;
            wvar.set_data(&plus);
            let lp = f(&wvar).item();
            let mut minus = base.clone();
            minus[i] -= h;
            wvar.set_data(&minus);
            let lm = f(&wvar).item();
            wvar.set_data(&base);
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "2nd-order grad mismatch at {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let x = randu(&[4, 8, 16, 16], -1.0, 1.0, &mut rng);
    let w = randu(&[8, 8, 3, 3], -0.3, 0.3, &mut rng);
    let norm = nn::InstanceNorm2d::<f64>::new(8);

    let run = || {
        let xv = x.detach().requires_grad();
        let y = norm.forward(&ops::conv2d(&xv, &w, 1, 1));
        let loss = ops::mean_all(&ops::mul(&y, &y));
        let grads = loss.backward(false);
        (loss.item(), grads.grad(&xv).unwrap().to_vec())
    };

    let (l_par, g_par) = run();
    veil_tensor::set_force_sequential(true);
    let (l_seq, g_seq) = run();
    veil_tensor::set_force_sequential(false);
    assert_eq!(l_par.to_bits(), l_seq.to_bits());
    assert_eq!(g_par.len(), g_seq.len());
    for (a, b) in g_par.iter().zip(&g_seq) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
