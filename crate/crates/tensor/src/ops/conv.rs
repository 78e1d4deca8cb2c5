//! 2-d convolution and its two adjoints, NCHW / OIHW layout.
//!
//! The three ops form a closed family under differentiation:
//! with `C(x, w)` the forward conv, `I(g, w)` the gradient w.r.t. the input
//! (also used as the forward pass of transposed convolution) and `W(x, g)`
//! the gradient w.r.t. the weights,
//!
//!   dC/dx -> I,  dC/dw -> W,
//!   dI/dg -> C,  dI/dw -> W,
//!   dW/dx -> I,  dW/dg -> C,
//!
//! so arbitrarily nested derivatives stay inside the family.

use crate::par::map_indices;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::shape4;

#[derive(Clone, Copy)]
struct Geom {
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
        assert!(
            input + 2 * pad >= k,
            "conv geometry: input {input} too small for kernel {k} with pad {pad}"
        );
        (input + 2 * pad - k) / stride + 1
    }
}

fn im2col<E: Scalar>(x: &[E], g: &Geom, col: &mut [E]) {
    // col layout: [ci*kh*kw, ho*wo] row-major
    let howo = g.ho * g.wo;
    debug_assert_eq!(col.len(), g.ci * g.kh * g.kw * howo);
    let mut row = 0usize;
    for c in 0..g.ci {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut col[row * howo..(row + 1) * howo];
                let mut idx = 0usize;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        for _ in 0..g.wo {
                            dst[idx] = E::zero();
                            idx += 1;
                        }
                        continue;
                    }
                    let xrow = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        dst[idx] = if iw < 0 || iw >= g.w as isize {
                            E::zero()
                        } else {
                            xrow[iw as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<E: Scalar>(col: &[E], g: &Geom, x: &mut [E]) {
    let howo = g.ho * g.wo;
    let mut row = 0usize;
    for c in 0..g.ci {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &col[row * howo..(row + 1) * howo];
                let mut idx = 0usize;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        idx += g.wo;
                        continue;
                    }
                    let base = ih as usize * g.w;
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            let p = base + iw as usize;
                            xc[p] = xc[p] + src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `x [N,Ci,H,W] * w [Co,Ci,kh,kw] -> [N,Co,Ho,Wo]`
pub fn conv2d<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, stride: usize, pad: usize) -> Tensor<E> {
    let (n, ci, h, wd) = shape4(x);
    let (co, ci2, kh, kw) = shape4(w);
    assert_eq!(ci, ci2, "conv2d: channel mismatch {ci} vs {ci2}");
    let ho = Geom::out_dim(h, kh, stride, pad);
    let wo = Geom::out_dim(wd, kw, stride, pad);
    let geom = Geom { ci, co, kh, kw, h, w: wd, ho, wo, stride, pad };

    let xg = x.data();
    let wg = w.data();
    let xd: &[E] = &xg;
    let wdta: &[E] = &wg;
    let per_img = co * ho * wo;
    let in_per_img = ci * h * wd;
    let k2 = ci * kh * kw;

    let imgs = map_indices(n, |img| {
        let mut col = vec![E::zero(); k2 * ho * wo];
        im2col(&xd[img * in_per_img..(img + 1) * in_per_img], &geom, &mut col);
        let mut out = vec![E::zero(); per_img];
        E::gemm(
            co, k2, ho * wo,
            E::one(),
            wdta, k2 as isize, 1,
            &col, (ho * wo) as isize, 1,
            E::zero(),
            &mut out, (ho * wo) as isize, 1,
        );
        out
    });
    drop(xg);
    drop(wg);
    let mut data = Vec::with_capacity(n * per_img);
    for img in imgs {
        data.extend_from_slice(&img);
    }

    let (nx, nw) = (x.needs_grad(), w.needs_grad());
    let (xc, wc) = (x.clone(), w.clone());
    Tensor::from_op(
        data,
        vec![n, co, ho, wo],
        vec![x.clone(), w.clone()],
        Box::new(move |g| {
            vec![
                nx.then(|| conv2d_input_grad(g, &wc, stride, pad, (h, wd))),
                nw.then(|| conv2d_weight_grad(&xc, g, stride, pad, (kh, kw))),
            ]
        }),
    )
}

/// Adjoint of [`conv2d`] w.r.t. its input; also the forward pass of a
/// transposed convolution. `a [N,Co,Ho,Wo] * w [Co,Ci,kh,kw] -> [N,Ci,H,W]`
/// where `(H, W) = out_hw` must be geometry-consistent.
pub fn conv2d_input_grad<E: Scalar>(
    a: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Tensor<E> {
    let (n, co, ho, wo) = shape4(a);
    let (co2, ci, kh, kw) = shape4(w);
    assert_eq!(co, co2, "conv2d_input_grad: channel mismatch");
    let (h, wd) = out_hw;
    assert_eq!(ho, Geom::out_dim(h, kh, stride, pad), "inconsistent geometry");
    assert_eq!(wo, Geom::out_dim(wd, kw, stride, pad), "inconsistent geometry");
    let geom = Geom { ci, co, kh, kw, h, w: wd, ho, wo, stride, pad };

    let ag = a.data();
    let wg = w.data();
    let ad: &[E] = &ag;
    let wdta: &[E] = &wg;
    let k2 = ci * kh * kw;
    let per_out = ci * h * wd;
    let per_a = co * ho * wo;

    let imgs = map_indices(n, |img| {
        // col = w^T [k2, co] @ a_img [co, ho*wo]
        let mut col = vec![E::zero(); k2 * ho * wo];
        E::gemm(
            k2, co, ho * wo,
            E::one(),
            wdta, 1, k2 as isize,
            &ad[img * per_a..(img + 1) * per_a], (ho * wo) as isize, 1,
            E::zero(),
            &mut col, (ho * wo) as isize, 1,
        );
        let mut out = vec![E::zero(); per_out];
        col2im_add(&col, &geom, &mut out);
        out
    });
    drop(ag);
    drop(wg);
    let mut data = Vec::with_capacity(n * per_out);
    for img in imgs {
        data.extend_from_slice(&img);
    }

    let (na, nw) = (a.needs_grad(), w.needs_grad());
    let (ac, wc) = (a.clone(), w.clone());
    Tensor::from_op(
        data,
        vec![n, ci, h, wd],
        vec![a.clone(), w.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| conv2d(g, &wc, stride, pad)),
                nw.then(|| conv2d_weight_grad(g, &ac, stride, pad, (kh, kw))),
            ]
        }),
    )
}

/// Adjoint of [`conv2d`] w.r.t. its weights.
/// `x [N,Ci,H,W], a [N,Co,Ho,Wo] -> [Co,Ci,kh,kw]`
pub fn conv2d_weight_grad<E: Scalar>(
    x: &Tensor<E>,
    a: &Tensor<E>,
    stride: usize,
    pad: usize,
    k_hw: (usize, usize),
) -> Tensor<E> {
    let (n, ci, h, wd) = shape4(x);
    let (n2, co, ho, wo) = shape4(a);
    assert_eq!(n, n2, "conv2d_weight_grad: batch mismatch");
    let (kh, kw) = k_hw;
    assert_eq!(ho, Geom::out_dim(h, kh, stride, pad), "inconsistent geometry");
    assert_eq!(wo, Geom::out_dim(wd, kw, stride, pad), "inconsistent geometry");
    let geom = Geom { ci, co, kh, kw, h, w: wd, ho, wo, stride, pad };

    let xg = x.data();
    let ag = a.data();
    let xd: &[E] = &xg;
    let ad: &[E] = &ag;
    let k2 = ci * kh * kw;
    let in_per_img = ci * h * wd;
    let per_a = co * ho * wo;

    // Accumulate over the batch in fixed-size blocks so the reduction order
    // is independent of the thread count.
    const BLOCK: usize = 4;
    let n_blocks = n.div_ceil(BLOCK);
    let partials = map_indices(n_blocks, |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(n);
        let mut dw = vec![E::zero(); co * k2];
        let mut col = vec![E::zero(); k2 * ho * wo];
        for img in lo..hi {
            im2col(&xd[img * in_per_img..(img + 1) * in_per_img], &geom, &mut col);
            // dw += a_img [co, howo] @ col^T [howo, k2]
            E::gemm(
                co, ho * wo, k2,
                E::one(),
                &ad[img * per_a..(img + 1) * per_a], (ho * wo) as isize, 1,
                &col, 1, (ho * wo) as isize,
                E::one(),
                &mut dw, k2 as isize, 1,
            );
        }
        dw
    });
    drop(xg);
    drop(ag);
    let mut data = vec![E::zero(); co * k2];
    for p in partials {
        for (d, s) in data.iter_mut().zip(p) {
            *d = *d + s;
        }
    }

    let (nx, na) = (x.needs_grad(), a.needs_grad());
    let (xc, ac) = (x.clone(), a.clone());
    Tensor::from_op(
        data,
        vec![co, ci, kh, kw],
        vec![x.clone(), a.clone()],
        Box::new(move |g| {
            vec![
                nx.then(|| conv2d_input_grad(&ac, g, stride, pad, (h, wd))),
                na.then(|| conv2d(&xc, g, stride, pad)),
            ]
        }),
    )
}
