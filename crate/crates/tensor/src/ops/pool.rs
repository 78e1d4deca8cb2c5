//! 2x2 average pooling and its adjoint.

use crate::par::map_indices;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::shape4;

/// 2x2 stride-2 average pooling; spatial dims must be even.
pub fn avg_pool2<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = shape4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 requires even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let xg = x.data();
    let xd: &[E] = &xg;
    let planes = map_indices(n * c, |p| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let mut out = Vec::with_capacity(ho * wo);
        for oh in 0..ho {
            let r0 = &src[(2 * oh) * w..(2 * oh + 1) * w];
            let r1 = &src[(2 * oh + 1) * w..(2 * oh + 2) * w];
            for ow in 0..wo {
                let s = r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1];
                out.push(s * quarter);
            }
        }
        out
    });
    drop(xg);
    let mut data = Vec::with_capacity(n * c * ho * wo);
    for p in planes {
        data.extend_from_slice(&p);
    }
    let needs = x.needs_grad();
    Tensor::from_op(
        data,
        vec![n, c, ho, wo],
        vec![x.clone()],
        Box::new(move |g| vec![needs.then(|| avg_unpool2(g, (h, w)))]),
    )
}

/// Adjoint of [`avg_pool2`]: replicate each value into a 2x2 block scaled by
/// 1/4.
pub fn avg_unpool2<E: Scalar>(x: &Tensor<E>, out_hw: (usize, usize)) -> Tensor<E> {
    let (n, c, ho, wo) = shape4(x);
    let (h, w) = out_hw;
    assert!(h == 2 * ho && w == 2 * wo, "avg_unpool2 geometry mismatch");
    let quarter = E::from_f64(0.25);
    let xg = x.data();
    let xd: &[E] = &xg;
    let planes = map_indices(n * c, |p| {
        let src = &xd[p * ho * wo..(p + 1) * ho * wo];
        let mut out = vec![E::zero(); h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let v = src[oh * wo + ow] * quarter;
                out[(2 * oh) * w + 2 * ow] = v;
                out[(2 * oh) * w + 2 * ow + 1] = v;
                out[(2 * oh + 1) * w + 2 * ow] = v;
                out[(2 * oh + 1) * w + 2 * ow + 1] = v;
            }
        }
        out
    });
    drop(xg);
    let mut data = Vec::with_capacity(n * c * h * w);
    for p in planes {
        data.extend_from_slice(&p);
    }
    let needs = x.needs_grad();
    Tensor::from_op(
        data,
        vec![n, c, h, w],
        vec![x.clone()],
        Box::new(move |g| vec![needs.then(|| avg_pool2(g))]),
    )
}
